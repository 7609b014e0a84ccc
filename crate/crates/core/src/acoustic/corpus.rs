//! Synthetic training material: a two-formant "voice" for every toy
//! phoneme, seeded word-sequence utterances with frame labels, and
//! synthetic music to serve as carrier songs.
//!
//! Each phoneme is a pair of sines at its table formants. The three HMM
//! states share the frequencies but weight the two formants differently
//! (f1-heavy, balanced, f2-heavy), so every state has its own spectral
//! envelope. Frame labels come straight from the rendering schedule: a
//! frame takes the label of the segment under its centre sample.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{self, AudioBuffer, CANONICAL_RATE};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::lexicon::{Lexicon, PdfId, PhonemeTable, STATES_PER_PHONEME};

/// Relative (f1, f2) amplitudes for HMM states 0, 1, 2.
const STATE_PROFILE: [(f64, f64); 3] = [(1.0, 0.25), (0.7, 0.7), (0.25, 1.0)];

/// Length of the amplitude smoothing kernel (samples).
const RAMP: usize = 33;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderParams {
    pub sample_rate: u32,
    pub features: FeatureConfig,
    /// Inclusive range of frames per HMM state.
    pub state_frames: (usize, usize),
    pub gap_frames: (usize, usize),
    pub edge_frames: (usize, usize),
    /// Range of the per-utterance formant amplitude.
    pub gain: (f64, f64),
    /// Bound of the uniform background noise.
    pub noise_amplitude: f64,
    /// Relative per-phoneme frequency jitter.
    pub formant_jitter: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            sample_rate: CANONICAL_RATE,
            features: FeatureConfig::default(),
            state_frames: (7, 12),
            gap_frames: (6, 12),
            edge_frames: (8, 14),
            gain: (0.12, 0.22),
            noise_amplitude: 0.002,
            formant_jitter: 0.02,
        }
    }
}

/// One rendered utterance and its frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub audio: AudioBuffer,
    pub labels: Vec<PdfId>,
    pub words: Vec<String>,
}

struct Segment {
    pdf: PdfId,
    len: usize,
    formants: Option<(f64, f64)>,
    state: u8,
}

/// Renders `words` separated by short silences. Deterministic in `seed`.
pub fn render_words(
    words: &[String],
    table: &PhonemeTable,
    lexicon: &Lexicon,
    params: &RenderParams,
    seed: u64,
) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_with(words, table, lexicon, params, &mut rng)
}

fn render_with(
    words: &[String],
    table: &PhonemeTable,
    lexicon: &Lexicon,
    params: &RenderParams,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    let silence = table
        .silence_pdf()
        .ok_or_else(|| Error::InvalidConfig("table has no silence entry".into()))?;
    let (frame_len, shift) = params.features.frame_geometry(params.sample_rate);
    let frames = |rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)| rng.gen_range(lo..=hi) * shift;

    let mut segments = Vec::new();
    let edge = frames(rng, params.edge_frames);
    segments.push(Segment { pdf: silence, len: edge, formants: None, state: 0 });
    for (wi, word) in words.iter().enumerate() {
        if wi > 0 {
            let gap = frames(rng, params.gap_frames);
            segments.push(Segment { pdf: silence, len: gap, formants: None, state: 0 });
        }
        for phone in lexicon.pronunciation(word)? {
            let f = table
                .formants(phone)
                .ok_or_else(|| Error::InvalidConfig(format!("no formants for {phone}")))?;
            let j1 = 1.0 + rng.gen_range(-params.formant_jitter..=params.formant_jitter);
            let j2 = 1.0 + rng.gen_range(-params.formant_jitter..=params.formant_jitter);
            for state in 0..STATES_PER_PHONEME {
                let pdf = table
                    .pdf_for(phone, state)
                    .ok_or_else(|| Error::InvalidConfig(format!("no pdf for {phone}/{state}")))?;
                segments.push(Segment {
                    pdf,
                    len: frames(rng, params.state_frames),
                    formants: Some((f.f1_hz * j1, f.f2_hz * j2)),
                    state,
                });
            }
        }
    }
    let edge = frames(rng, params.edge_frames) + frame_len;
    segments.push(Segment { pdf: silence, len: edge, formants: None, state: 0 });

    let total: usize = segments.iter().map(|s| s.len).sum();
    let mut amp1 = Vec::with_capacity(total);
    let mut amp2 = Vec::with_capacity(total);
    let mut freq1 = Vec::with_capacity(total);
    let mut freq2 = Vec::with_capacity(total);
    let mut owner = Vec::with_capacity(total);
    let gain = rng.gen_range(params.gain.0..=params.gain.1);
    let mut last_freqs = (0.0, 0.0);
    for seg in &segments {
        let (a1, a2) = match seg.formants {
            Some(_) => {
                let (p1, p2) = STATE_PROFILE[seg.state as usize];
                (gain * p1, gain * p2)
            }
            None => (0.0, 0.0),
        };
        if let Some(f) = seg.formants {
            last_freqs = f;
        }
        for _ in 0..seg.len {
            amp1.push(a1);
            amp2.push(a2);
            freq1.push(last_freqs.0);
            freq2.push(last_freqs.1);
            owner.push(seg.pdf);
        }
    }
    let amp1 = smooth(&amp1);
    let amp2 = smooth(&amp2);

    let rate = params.sample_rate as f64;
    let (mut ph1, mut ph2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let samples: Vec<f64> = (0..total)
        .map(|t| {
            ph1 = (ph1 + 2.0 * PI * freq1[t] / rate) % (2.0 * PI);
            ph2 = (ph2 + 2.0 * PI * freq2[t] / rate) % (2.0 * PI);
            let noise = if params.noise_amplitude > 0.0 {
                rng.gen_range(-params.noise_amplitude..params.noise_amplitude)
            } else {
                0.0
            };
            amp1[t] * ph1.sin() + amp2[t] * ph2.sin() + noise
        })
        .collect();

    let n_frames = params.features.frame_count(total, params.sample_rate);
    let labels = (0..n_frames).map(|i| owner[i * shift + frame_len / 2]).collect();
    Ok(Utterance {
        audio: AudioBuffer::new(samples, params.sample_rate)?.quantized(),
        labels,
        words: words.to_vec(),
    })
}

/// Centered moving average.
fn smooth(x: &[f64]) -> Vec<f64> {
    let half = RAMP / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub utterances: usize,
    pub words_per_utterance: (usize, usize),
    pub seed: u64,
    pub render: RenderParams,
    /// Probability of additive uniform noise at an SNR drawn from `noise_snr_db`.
    pub noise_prob: f64,
    pub noise_snr_db: (f64, f64),
    /// Probability of a decimate-and-restore pass at a ratio drawn from `squeeze_ratio`.
    pub squeeze_prob: f64,
    pub squeeze_ratio: (f64, f64),
    /// Probability of rendering without the background noise floor.
    pub digital_silence_prob: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            utterances: 400,
            words_per_utterance: (1, 3),
            seed: 1,
            render: RenderParams::default(),
            noise_prob: 0.5,
            noise_snr_db: (8.0, 30.0),
            squeeze_prob: 0.4,
            squeeze_ratio: (0.6, 0.9),
            digital_silence_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub utterances: Vec<Utterance>,
    pub seed: u64,
    pub num_pdfs: usize,
}

impl ToyCorpus {
    pub fn num_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.labels.len()).sum()
    }
}

/// Seeded corpus of random word strings with per-utterance augmentation.
pub fn generate_synthetic_corpus(
    table: &PhonemeTable,
    lexicon: &Lexicon,
    spec: &CorpusSpec,
) -> Result<ToyCorpus> {
    let vocab = lexicon.vocabulary();
    if vocab.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let utterances = (0..spec.utterances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let (lo, hi) = spec.words_per_utterance;
            let count = rng.gen_range(lo.max(1)..=hi.max(lo).max(1));
            let words: Vec<String> =
                (0..count).map(|_| vocab.choose(&mut rng).unwrap().to_string()).collect();
            let mut render = spec.render.clone();
            if rng.gen_bool(spec.digital_silence_prob) {
                render.noise_amplitude = 0.0;
            }
            let mut utt = render_with(&words, table, lexicon, &render, &mut rng)?;
            if rng.gen_bool(spec.squeeze_prob) {
                let ratio = rng.gen_range(spec.squeeze_ratio.0..=spec.squeeze_ratio.1);
                utt.audio = squeeze_restore(&utt.audio, ratio)?;
            }
            if rng.gen_bool(spec.noise_prob) {
                let snr = rng.gen_range(spec.noise_snr_db.0..=spec.noise_snr_db.1);
                let power = audio::signal_power(&utt.audio)?;
                let bound = (3.0 * power / 10f64.powf(snr / 10.0)).sqrt();
                let noise: Vec<f64> =
                    (0..utt.audio.len()).map(|_| rng.gen_range(-bound..bound)).collect();
                let noise = AudioBuffer::new(noise, utt.audio.sample_rate())?;
                utt.audio = audio::mix(&utt.audio, &noise)?.quantized();
            }
            Ok(utt)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyCorpus { utterances, seed: spec.seed, num_pdfs: table.num_pdfs() })
}

/// Decimates by `ratio` and restores the original rate and length.
pub fn squeeze_restore(buffer: &AudioBuffer, ratio: f64) -> Result<AudioBuffer> {
    let down = audio::downsample(buffer, ratio)?;
    let up = audio::resample(&down, buffer.sample_rate())?;
    let mut samples = up.into_samples();
    let last = samples.last().copied().unwrap_or(0.0);
    samples.resize(buffer.len(), last);
    AudioBuffer::new(samples, buffer.sample_rate())
}

/// Seeded synthetic music: a plucked melody over a sustained bass line,
/// both with a few harmonics, snapped to the PCM grid.
pub fn synthesize_song(duration_secs: f64, seed: u64, sample_rate: u32) -> AudioBuffer {
    // A-minor pentatonic, two octaves from A3.
    const SCALE: [f64; 10] =
        [220.0, 261.63, 293.66, 329.63, 392.0, 440.0, 523.25, 587.33, 659.25, 783.99];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (duration_secs * sample_rate as f64).round() as usize;
    let rate = sample_rate as f64;
    let mut out = vec![0.0; len];

    let add_note = |out: &mut Vec<f64>, start: usize, dur: usize, f0: f64, amp: f64, decay: f64| {
        let harmonics = [1.0, 0.5, 0.3, 0.15];
        let attack = (0.01 * rate) as usize;
        for t in 0..dur.min(len.saturating_sub(start)) {
            let time = t as f64 / rate;
            let env = if t < attack {
                t as f64 / attack as f64
            } else {
                (-(time - attack as f64 / rate) * decay).exp()
            };
            let release = ((dur - t) as f64 / (0.02 * rate)).min(1.0);
            let v: f64 = harmonics
                .iter()
                .enumerate()
                .filter(|(h, _)| f0 * (*h as f64 + 1.0) < rate / 2.0)
                .map(|(h, a)| a * (2.0 * PI * f0 * (h as f64 + 1.0) * time).sin())
                .sum();
            out[start + t] += amp * env * release * v;
        }
    };

    let mut t = 0;
    while t < len {
        let dur = (rng.gen_range(0.15..0.4) * rate) as usize;
        let f0 = *SCALE.choose(&mut rng).unwrap();
        add_note(&mut out, t, dur, f0, 0.16, 3.0);
        t += dur;
    }
    let mut t = 0;
    while t < len {
        let dur = (rng.gen_range(0.8..1.6) * rate) as usize;
        let f0 = SCALE[rng.gen_range(0..5)] / 2.0;
        add_note(&mut out, t, dur, f0, 0.12, 0.8);
        t += dur;
    }
    AudioBuffer::new(out, sample_rate).expect("finite song samples").quantized()
}
