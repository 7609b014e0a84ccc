//! Mono waveform container, 16-bit PCM WAV codec, resampling and power/SNR
//! primitives.
//!
//! Samples are `f64` amplitudes in `[-1, 1]`. The PCM mapping is
//! `sample = code / 32768`, so every value read from disk lies on the
//! 1/32768 grid and [`AudioBuffer::quantized`] snaps arbitrary buffers onto
//! the same grid.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Internal working rate of the whole pipeline.
pub const CANONICAL_RATE: u32 = 8000;

const PCM_SCALE: f64 = 32768.0;
/// Largest sample value representable in 16-bit PCM.
pub const PCM_MAX: f64 = i16::MAX as f64 / PCM_SCALE;

/// Half-width (in input samples) of the anti-alias filter kernel.
const SINC_HALF_TAPS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, saturating every sample into `[-1, 1]`.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::OutOfRange("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::OutOfRange(format!("non-finite sample at index {i}")));
        }
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn negate(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|s| -s).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Multiplies by `gain` and saturates.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| (s * gain).clamp(-1.0, 1.0)).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Snaps every sample onto the 16-bit PCM grid, so that writing and
    /// reading the buffer back is lossless.
    pub fn quantized(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| quantize_sample(s)).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples `[start, end)` as a new buffer at the same rate.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }
}

pub(crate) fn pcm_code(s: f64) -> i16 {
    (s * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub(crate) fn quantize_sample(s: f64) -> f64 {
    pcm_code(s) as f64 / PCM_SCALE
}

/// Reads a 16-bit PCM mono WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = hound::WavReader::open(path).map_err(wav_error)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        let format = match spec.sample_format {
            hound::SampleFormat::Int => 1,
            hound::SampleFormat::Float => 3,
        };
        return Err(Error::UnsupportedEncoding { format, bits: spec.bits_per_sample });
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_error)?;
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes a 16-bit PCM mono WAV file (canonical 44-byte header).
pub fn write_wav(buffer: &AudioBuffer, path: impl AsRef<Path>) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buffer.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(wav_error)?;
    for &s in &buffer.samples {
        writer.write_sample(pcm_code(s)).map_err(wav_error)?;
    }
    writer.finalize().map_err(wav_error)
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedEncoding { format: 0, bits: 0 },
        other => Error::MalformedWav(other.to_string()),
    }
}

/// Reads a WAV file and brings it to the canonical rate and PCM grid.
pub fn load_for_pipeline(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let raw = read_wav(path)?;
    Ok(resample(&raw, CANONICAL_RATE)?.quantized())
}

/// Mean-square power.
pub fn signal_power(buffer: &AudioBuffer) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    Ok(buffer.samples.iter().map(|s| s * s).sum::<f64>() / buffer.len() as f64)
}

/// `10·log10(P_signal / P_noise)`.
pub fn snr_db(signal: &AudioBuffer, noise: &AudioBuffer) -> Result<f64> {
    if signal.len() != noise.len() {
        return Err(Error::LengthMismatch { left: signal.len(), right: noise.len() });
    }
    let ps = signal_power(signal)?;
    let pn = signal_power(noise)?;
    if pn == 0.0 {
        return Err(Error::ZeroPower);
    }
    Ok(10.0 * (ps / pn).log10())
}

/// Element-wise sum, hard-clipped to `[-1, 1]`.
pub fn mix(a: &AudioBuffer, b: &AudioBuffer) -> Result<AudioBuffer> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::RateMismatch { left: a.sample_rate, right: b.sample_rate });
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(AudioBuffer {
        samples: a
            .samples
            .iter()
            .zip(&b.samples)
            .map(|(x, y)| (x + y).clamp(-1.0, 1.0))
            .collect(),
        sample_rate: a.sample_rate,
    })
}

/// Decimates to `round(ratio · rate)` after windowed-sinc anti-alias
/// filtering at 0.45 × the new rate.
pub fn downsample(buffer: &AudioBuffer, ratio: f64) -> Result<AudioBuffer> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::OutOfRange(format!("downsample ratio {ratio} not in (0, 1]")));
    }
    if ratio == 1.0 {
        return Ok(buffer.clone());
    }
    let new_rate = (ratio * buffer.sample_rate as f64).round() as u32;
    if new_rate == 0 {
        return Err(Error::OutOfRange(format!("ratio {ratio} yields a zero sample rate")));
    }
    resample(buffer, new_rate)
}

/// Linear-interpolation resampling to `new_rate`; low-pass filtered first
/// when the rate decreases.
pub fn resample(buffer: &AudioBuffer, new_rate: u32) -> Result<AudioBuffer> {
    if new_rate == 0 {
        return Err(Error::OutOfRange("target sample rate must be positive".into()));
    }
    if new_rate == buffer.sample_rate || buffer.is_empty() {
        return Ok(AudioBuffer { samples: buffer.samples.clone(), sample_rate: new_rate });
    }
    let source = if new_rate < buffer.sample_rate {
        let cutoff = 0.45 * new_rate as f64 / buffer.sample_rate as f64;
        lowpass(&buffer.samples, cutoff)
    } else {
        buffer.samples.clone()
    };
    let step = buffer.sample_rate as f64 / new_rate as f64;
    let out_len = ((buffer.len() as f64) / step).round().max(1.0) as usize;
    let last = source.len() - 1;
    let samples = (0..out_len)
        .map(|j| {
            let pos = j as f64 * step;
            let i = pos.floor() as usize;
            if i >= last {
                return source[last];
            }
            let frac = pos - i as f64;
            source[i] * (1.0 - frac) + source[i + 1] * frac
        })
        .map(|s| s.clamp(-1.0, 1.0))
        .collect();
    Ok(AudioBuffer { samples, sample_rate: new_rate })
}

/// Blackman-windowed sinc low-pass; `cutoff` in cycles per sample.
fn lowpass(x: &[f64], cutoff: f64) -> Vec<f64> {
    let taps = 2 * SINC_HALF_TAPS + 1;
    let mut kernel: Vec<f64> = (0..taps)
        .map(|n| {
            let m = n as f64 - SINC_HALF_TAPS as f64;
            let sinc = if m == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * m).sin() / (PI * m)
            };
            let t = n as f64 / (taps - 1) as f64;
            let window = 0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos();
            sinc * window
        })
        .collect();
    let dc: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= dc);

    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(k, h)| {
                    let j = i + k as isize - SINC_HALF_TAPS as isize;
                    (0..n).contains(&j).then(|| h * x[j as usize])
                })
                .sum()
        })
        .collect()
}

/// Sine tone helper used by tests and synthetic material.
pub fn sine(freq_hz: f64, amplitude: f64, len: usize, sample_rate: u32) -> AudioBuffer {
    let samples = (0..len)
        .map(|i| amplitude * (2.0 * PI * freq_hz * i as f64 / sample_rate as f64).sin())
        .collect();
    AudioBuffer::new(samples, sample_rate).expect("sine parameters are valid")
}
