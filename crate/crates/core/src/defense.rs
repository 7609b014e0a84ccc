//! Transcript-divergence detectors: decode the input as-is and after a
//! mild transformation, and flag it when the two transcripts differ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acoustic::corpus::squeeze_restore;
use crate::acoustic::AcousticModel;
use crate::audio::{mix, signal_power, AudioBuffer};
use crate::decoder::decode_text;
use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, PhonemeTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseKind {
    Turbulence,
    Squeezing,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::Turbulence => "turbulence",
            DefenseKind::Squeezing => "squeeze",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseVerdict {
    pub detected: bool,
    pub text1: Vec<String>,
    pub text2: Vec<String>,
    pub defense: DefenseKind,
    /// Turbulence SNR in dB, or squeeze ratio.
    pub parameter: f64,
}

impl DefenseVerdict {
    fn new(text1: Vec<String>, text2: Vec<String>, defense: DefenseKind, parameter: f64) -> Self {
        Self { detected: text1 != text2, text1, text2, defense, parameter }
    }

    pub const CSV_HEADER: &'static str = "file,defense,parameter,detected,text1,text2";

    pub fn csv_row(&self, file: &str) -> String {
        format!(
            "{},{},{},{},{},{}",
            file,
            self.defense.name(),
            self.parameter,
            u8::from(self.detected),
            self.text1.join(" "),
            self.text2.join(" ")
        )
    }
}

/// Uniform noise scaled so that `snr_db(audio, noise)` equals `snr_db`.
pub fn turbulence_noise(audio: &AudioBuffer, snr_db: f64, seed: u64) -> Result<AudioBuffer> {
    let p = signal_power(audio)?;
    if p == 0.0 {
        return Err(Error::ZeroPower);
    }
    if snr_db.is_nan() {
        return Err(Error::OutOfRange("turbulence SNR is NaN".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(AudioBuffer::zeros(audio.len(), audio.sample_rate()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..audio.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pn = raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64;
    let gain = (p / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    AudioBuffer::new(raw.iter().map(|v| v * gain).collect(), audio.sample_rate())
}

/// Decimate-and-restore at `ratio` of the original rate.
pub fn squeeze(audio: &AudioBuffer, ratio: f64) -> Result<AudioBuffer> {
    squeeze_restore(audio, ratio)
}

pub fn turbulence_with<F>(audio: &AudioBuffer, snr_db: f64, seed: u64, asr: F) -> Result<DefenseVerdict>
where
    F: Fn(&AudioBuffer) -> Result<Vec<String>>,
{
    let noise = turbulence_noise(audio, snr_db, seed)?;
    let text1 = asr(audio)?;
    let text2 = if snr_db == f64::INFINITY { text1.clone() } else { asr(&mix(audio, &noise)?)? };
    Ok(DefenseVerdict::new(text1, text2, DefenseKind::Turbulence, snr_db))
}

pub fn squeezing_with<F>(audio: &AudioBuffer, ratio: f64, asr: F) -> Result<DefenseVerdict>
where
    F: Fn(&AudioBuffer) -> Result<Vec<String>>,
{
    let squeezed = squeeze(audio, ratio)?;
    let text1 = asr(audio)?;
    let text2 = asr(&squeezed)?;
    Ok(DefenseVerdict::new(text1, text2, DefenseKind::Squeezing, ratio))
}

fn model_asr<'a>(
    model: &'a AcousticModel,
    table: &'a PhonemeTable,
    lexicon: &'a Lexicon,
) -> impl Fn(&AudioBuffer) -> Result<Vec<String>> + 'a {
    move |a: &AudioBuffer| Ok(decode_text(a, model, table, lexicon)?.words)
}

pub fn detect_turbulence(
    audio: &AudioBuffer,
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
    snr_db: f64,
    seed: u64,
) -> Result<DefenseVerdict> {
    turbulence_with(audio, snr_db, seed, model_asr(model, table, lexicon))
}

pub fn detect_squeezing(
    audio: &AudioBuffer,
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
    ratio: f64,
) -> Result<DefenseVerdict> {
    squeezing_with(audio, ratio, model_asr(model, table, lexicon))
}
