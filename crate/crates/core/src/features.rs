//! MFCC front end with an exact reverse-mode gradient back to the waveform.
//!
//! Pipeline: pre-emphasis over the whole signal, framing, Hamming window,
//! zero-padded FFT, power spectrum `|X|²`, triangular mel filterbank,
//! `ln(max(e, floor))`, orthonormal DCT-II truncated to `num_cepstra`.
//!
//! [`MfccPlan::extract_traced`] keeps the per-frame spectra and mel energies
//! so that [`MfccPlan::backward`] can form the vector-Jacobian product
//! without recomputing the forward pass.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    pub num_mel_filters: usize,
    pub num_cepstra: usize,
    pub log_floor: f64,
    pub fft_size: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            preemphasis: 0.97,
            num_mel_filters: 26,
            num_cepstra: 13,
            log_floor: 1e-10,
            fft_size: 256,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.frame_length_ms > 0.0 && self.frame_shift_ms > 0.0) {
            return bad("frame length and shift must be positive");
        }
        if self.frame_shift_ms > self.frame_length_ms {
            return bad("frame shift exceeds frame length");
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad("preemphasis must lie in [0, 1)");
        }
        if self.num_cepstra == 0 || self.num_cepstra > self.num_mel_filters {
            return bad("need 0 < num_cepstra <= num_mel_filters");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        let (frame, shift) = self.frame_geometry(sample_rate);
        if frame == 0 || shift == 0 {
            return bad("frame or shift rounds to zero samples");
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < frame {
            return bad("fft_size must be a power of two no smaller than the frame");
        }
        Ok(())
    }

    /// `(frame_samples, shift_samples)` at `sample_rate`.
    pub fn frame_geometry(&self, sample_rate: u32) -> (usize, usize) {
        let to_samples = |ms: f64| (ms * sample_rate as f64 / 1000.0).round() as usize;
        (to_samples(self.frame_length_ms), to_samples(self.frame_shift_ms))
    }

    /// Number of frames produced for `num_samples` input samples.
    pub fn frame_count(&self, num_samples: usize, sample_rate: u32) -> usize {
        let (frame, shift) = self.frame_geometry(sample_rate);
        if num_samples < frame {
            0
        } else {
            (num_samples - frame) / shift + 1
        }
    }
}

/// Per-frame cepstra plus the framing metadata that maps rows back to
/// sample ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub frame_len: usize,
    pub frame_shift: usize,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn num_coeffs(&self) -> usize {
        self.values.cols()
    }

    /// First sample covered by frame `i`.
    pub fn frame_start(&self, i: usize) -> usize {
        i * self.frame_shift
    }
}

struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed window, filterbank, DCT basis and FFT plans for one
/// `(FeatureConfig, sample_rate)` pair.
pub struct MfccPlan {
    cfg: FeatureConfig,
    sample_rate: u32,
    frame_len: usize,
    frame_shift: usize,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    dct: Matrix,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccPlan")
            .field("cfg", &self.cfg)
            .field("sample_rate", &self.sample_rate)
            .finish_non_exhaustive()
    }
}

/// Forward intermediates needed by [`MfccPlan::backward`].
#[derive(Debug, Clone)]
pub struct MfccTrace {
    num_samples: usize,
    spectra: Vec<Vec<Complex64>>,
    mel_energies: Vec<Vec<f64>>,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MfccPlan {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let (frame_len, frame_shift) = cfg.frame_geometry(sample_rate);
        let window = (0..frame_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (frame_len - 1) as f64).cos())
            .collect();

        let n_fft = cfg.fft_size;
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.num_mel_filters + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (cfg.num_mel_filters + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let filters = (0..cfg.num_mel_filters)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights_full: Vec<f64> = (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect();
                let first = weights_full.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = weights_full.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                MelFilter { first_bin: first, weights: weights_full[first..=last].to_vec() }
            })
            .collect();

        let m = cfg.num_mel_filters;
        let mut dct = Matrix::zeros(cfg.num_cepstra, m);
        for j in 0..cfg.num_cepstra {
            let scale = if j == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            for i in 0..m {
                dct.set(j, i, scale * (PI * j as f64 * (2 * i + 1) as f64 / (2 * m) as f64).cos());
            }
        }

        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            frame_len,
            frame_shift,
            window,
            filters,
            dct,
            fft: planner.plan_fft_forward(n_fft),
            ifft: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn frame_shift(&self) -> usize {
        self.frame_shift
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        self.cfg.frame_count(num_samples, self.sample_rate)
    }

    pub fn extract(&self, samples: &[f64]) -> Result<FeatureMatrix> {
        self.run(samples, false).map(|(f, _)| f)
    }

    pub fn extract_traced(&self, samples: &[f64]) -> Result<(FeatureMatrix, MfccTrace)> {
        self.run(samples, true)
    }

    fn run(&self, samples: &[f64], keep: bool) -> Result<(FeatureMatrix, MfccTrace)> {
        let n_frames = self.num_frames(samples.len());
        if n_frames == 0 {
            return Err(Error::AudioTooShort { samples: samples.len(), needed: self.frame_len });
        }
        let alpha = self.cfg.preemphasis;
        let emphasized: Vec<f64> = (0..samples.len())
            .map(|t| if t == 0 { samples[0] } else { samples[t] - alpha * samples[t - 1] })
            .collect();

        let n_fft = self.cfg.fft_size;
        let n_bins = n_fft / 2 + 1;
        let mut values = Matrix::zeros(n_frames, self.cfg.num_cepstra);
        let mut trace = MfccTrace {
            num_samples: samples.len(),
            spectra: Vec::with_capacity(if keep { n_frames } else { 0 }),
            mel_energies: Vec::with_capacity(if keep { n_frames } else { 0 }),
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; n_bins];
        let mut log_mel = vec![0.0; self.filters.len()];
        for i in 0..n_frames {
            let start = i * self.frame_shift;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (n, w) in self.window.iter().enumerate() {
                buf[n].re = emphasized[start + n] * w;
            }
            self.fft.process(&mut buf);
            for (p, x) in power.iter_mut().zip(&buf) {
                *p = x.norm_sqr();
            }
            let energies: Vec<f64> = self
                .filters
                .iter()
                .map(|f| {
                    f.weights
                        .iter()
                        .zip(&power[f.first_bin..])
                        .map(|(w, p)| w * p)
                        .sum::<f64>()
                })
                .collect();
            for (l, &e) in log_mel.iter_mut().zip(&energies) {
                *l = e.max(self.cfg.log_floor).ln();
            }
            let row = values.row_mut(i);
            for (j, c) in row.iter_mut().enumerate() {
                *c = self.dct.row(j).iter().zip(&log_mel).map(|(d, l)| d * l).sum();
            }
            if keep {
                trace.spectra.push(buf[..n_bins].to_vec());
                trace.mel_energies.push(energies);
            }
        }
        Ok((
            FeatureMatrix { values, frame_len: self.frame_len, frame_shift: self.frame_shift },
            trace,
        ))
    }

    /// Vector-Jacobian product: gradient of a scalar w.r.t. the input
    /// samples given its gradient w.r.t. every feature entry.
    pub fn backward(&self, trace: &MfccTrace, upstream: &Matrix) -> Result<Vec<f64>> {
        let n_frames = trace.spectra.len();
        if upstream.shape() != (n_frames, self.cfg.num_cepstra) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", n_frames, self.cfg.num_cepstra),
                got: format!("{}x{}", upstream.rows(), upstream.cols()),
            });
        }
        let n_fft = self.cfg.fft_size;
        let n_bins = n_fft / 2 + 1;
        let mut grad_emph = vec![0.0; trace.num_samples];
        let mut g_log = vec![0.0; self.filters.len()];
        let mut g_power = vec![0.0; n_bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        for i in 0..n_frames {
            let g_c = upstream.row(i);
            if g_c.iter().all(|&g| g == 0.0) {
                continue;
            }
            for (m, gl) in g_log.iter_mut().enumerate() {
                *gl = (0..self.cfg.num_cepstra).map(|j| self.dct.get(j, m) * g_c[j]).sum();
            }
            g_power.iter_mut().for_each(|g| *g = 0.0);
            for ((f, &e), &gl) in self.filters.iter().zip(&trace.mel_energies[i]).zip(&g_log) {
                if e <= self.cfg.log_floor {
                    continue;
                }
                let g_e = gl / e;
                for (k, w) in f.weights.iter().enumerate() {
                    g_power[f.first_bin + k] += w * g_e;
                }
            }
            // d|X_k|²/dx_n = 2·Re(conj(X_k)·e^{-2πikn/N}); summing over k
            // is the real part of an unnormalized inverse DFT of g_k·X_k.
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (k, (g, x)) in g_power.iter().zip(&trace.spectra[i]).enumerate() {
                buf[k] = x * *g;
            }
            self.ifft.process(&mut buf);
            let start = i * self.frame_shift;
            for (n, w) in self.window.iter().enumerate() {
                grad_emph[start + n] += 2.0 * buf[n].re * w;
            }
        }
        let alpha = self.cfg.preemphasis;
        let len = grad_emph.len();
        Ok((0..len)
            .map(|t| {
                if t + 1 < len {
                    grad_emph[t] - alpha * grad_emph[t + 1]
                } else {
                    grad_emph[t]
                }
            })
            .collect())
    }
}

pub fn extract_mfcc(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    MfccPlan::new(cfg, audio.sample_rate())?.extract(audio.samples())
}

pub fn mfcc_input_gradient(
    audio: &AudioBuffer,
    cfg: &FeatureConfig,
    upstream: &Matrix,
) -> Result<Vec<f64>> {
    let plan = MfccPlan::new(cfg, audio.sample_rate())?;
    let (_, trace) = plan.extract_traced(audio.samples())?;
    plan.backward(&trace, upstream)
}

/// Stacks rows `i-left ..= i+right` into row `i`, replicating edge rows.
pub fn splice_context(features: &Matrix, left: usize, right: usize) -> Matrix {
    let (n, d) = features.shape();
    let width = (left + right + 1) * d;
    let mut out = Matrix::zeros(n, width);
    for i in 0..n {
        let row = out.row_mut(i);
        for (slot, offset) in (-(left as isize)..=right as isize).enumerate() {
            let src = (i as isize + offset).clamp(0, n as isize - 1) as usize;
            row[slot * d..(slot + 1) * d].copy_from_slice(features.row(src));
        }
    }
    out
}

/// Adjoint of [`splice_context`]: scatter-adds each slot back to its source row.
pub fn splice_context_adjoint(grad: &Matrix, dim: usize, left: usize, right: usize) -> Matrix {
    let n = grad.rows();
    let mut out = Matrix::zeros(n, dim);
    for i in 0..n {
        let row = grad.row(i);
        for (slot, offset) in (-(left as isize)..=right as isize).enumerate() {
            let src = (i as isize + offset).clamp(0, n as isize - 1) as usize;
            let dst = out.row_mut(src);
            for (d, g) in dst.iter_mut().zip(&row[slot * dim..(slot + 1) * dim]) {
                *d += g;
            }
        }
    }
    out
}
