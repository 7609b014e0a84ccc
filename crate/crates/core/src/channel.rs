//! Additive-noise playback channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{mix, AudioBuffer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    /// Amplitude bound `N`; noise samples lie in `(-N, N)`.
    pub noise_bound: f64,
    /// Recorded device noise, looped to length and used instead of random draws.
    pub captured_noise: Option<AudioBuffer>,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn uniform(noise_bound: f64, seed: u64) -> Result<Self> {
        let cfg = Self { noise_bound, captured_noise: None, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_bound) {
            return Err(Error::OutOfRange(format!("noise bound {} not in [0, 1)", self.noise_bound)));
        }
        if let Some(c) = &self.captured_noise {
            if c.is_empty() {
                return Err(Error::EmptyBuffer);
            }
        }
        Ok(())
    }

    /// True when the channel adds nothing.
    pub fn is_silent(&self) -> bool {
        self.noise_bound == 0.0
    }

    /// Bound giving a channel SNR of `snr_db` against a signal of power `power`
    /// (uniform noise on `(-N, N)` has power `N²/3`).
    pub fn bound_for_snr(power: f64, snr_db: f64) -> f64 {
        (3.0 * power / 10f64.powf(snr_db / 10.0)).sqrt()
    }
}

/// Noise draw `draw_index` of length `len`. Each `(seed, draw_index)` pair
/// selects its own ChaCha stream.
pub fn sample_noise(len: usize, cfg: &ChannelConfig, draw_index: u64, sample_rate: u32) -> AudioBuffer {
    let n = cfg.noise_bound;
    if n == 0.0 {
        return AudioBuffer::zeros(len, sample_rate);
    }
    if let Some(captured) = cfg.captured_noise.as_ref().filter(|c| !c.is_empty()) {
        let peak = captured.peak();
        // Strictly inside the bound, like the random draws.
        let gain = if peak > 0.0 { n * (1.0 - 1e-9) / peak } else { 0.0 };
        let src = captured.samples();
        let samples = (0..len).map(|i| src[i % src.len()] * gain).collect();
        return AudioBuffer::new(samples, sample_rate).expect("finite noise");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(draw_index);
    let samples = (0..len)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-n..n);
            if v != -n {
                break v;
            }
        })
        .collect();
    AudioBuffer::new(samples, sample_rate).expect("finite noise")
}

/// `clip(audio + n)` for draw `draw_index`.
pub fn apply_channel(audio: &AudioBuffer, cfg: &ChannelConfig, draw_index: u64) -> Result<AudioBuffer> {
    if cfg.is_silent() {
        return Ok(audio.clone());
    }
    let noise = sample_noise(audio.len(), cfg, draw_index, audio.sample_rate());
    mix(audio, &noise)
}
