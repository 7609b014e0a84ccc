//! MFCC-domain correlation and the parameter sweeps, emitted as CSV.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::acoustic::corpus::{render_words, RenderParams};
use crate::acoustic::AcousticModel;
use crate::audio::AudioBuffer;
use crate::channel::ChannelConfig;
use crate::crafter::{command_target, craft_waa, CraftConfig};
use crate::defense::{detect_squeezing, detect_turbulence, DefenseKind};
use crate::error::{Error, Result};
use crate::features::{extract_mfcc, FeatureConfig};
use crate::lexicon::{Lexicon, PhonemeTable};

pub const SWEEP_CSV_HEADER: &str =
    "param,corr_song,corr_cmd,success_pct,detect_clean_pct,detect_wta_pct,detect_waa_pct,trials,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrelationMode {
    /// Centered covariance over the product of standard deviations.
    #[default]
    AsWritten,
    /// The same formula on average ranks.
    Rank,
}

/// Correlation of the flattened MFCC matrices, trimmed to the shorter input.
pub fn correlation(a: &AudioBuffer, b: &AudioBuffer, cfg: &FeatureConfig) -> Result<f64> {
    correlation_with(a, b, cfg, CorrelationMode::AsWritten)
}

pub fn correlation_with(a: &AudioBuffer, b: &AudioBuffer, cfg: &FeatureConfig, mode: CorrelationMode) -> Result<f64> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::RateMismatch { left: a.sample_rate(), right: b.sample_rate() });
    }
    let n = a.len().min(b.len());
    let x = centered_features(&a.slice(0, n), cfg)?;
    let y = centered_features(&b.slice(0, n), cfg)?;
    match mode {
        CorrelationMode::AsWritten => correlation_as_written(&x, &y),
        CorrelationMode::Rank => correlation_as_written(&ranks(&x), &ranks(&y)),
    }
}

/// Flattened MFCCs with each coefficient's mean over frames removed, so the
/// fixed per-coefficient offsets do not dominate the correlation.
fn centered_features(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    let f = extract_mfcc(audio, cfg)?;
    let (rows, d) = f.values.shape();
    let mut means = vec![0.0; d];
    for r in f.values.iter_rows() {
        means.iter_mut().zip(r).for_each(|(m, v)| *m += v / rows as f64);
    }
    Ok(f.values.iter_rows().flat_map(|r| r.iter().zip(&means).map(|(v, m)| v - m)).collect())
}

/// `Cov(X, Y) / sqrt(Var X · Var Y)` on two equal-length vectors.
pub fn correlation_as_written(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // Rounding leaves tiny residues on constant inputs.
    let flat = |s: f64, v: &[f64]| {
        let scale = v.iter().fold(1.0_f64, |m, a| m.max(a.abs()));
        (s / n).sqrt() <= 1e-12 * scale
    };
    if flat(sxx, x) || flat(syy, y) {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepRow {
    pub param: f64,
    pub corr_song: Option<f64>,
    pub corr_cmd: Option<f64>,
    pub success_pct: Option<f64>,
    pub detect_clean_pct: Option<f64>,
    pub detect_wta_pct: Option<f64>,
    pub detect_waa_pct: Option<f64>,
    pub trials: usize,
    pub seed: u64,
}

/// CSV with [`SWEEP_CSV_HEADER`]; absent values are empty cells.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.param,
            cell(r.corr_song),
            cell(r.corr_cmd),
            cell(r.success_pct),
            cell(r.detect_clean_pct),
            cell(r.detect_wta_pct),
            cell(r.detect_waa_pct),
            r.trials,
            r.seed
        );
    }
    out
}

/// Crafts a WAA sample per training bound in `n_values` and measures its
/// correlations and its success over `trials` draws of `eval`.
#[allow(clippy::too_many_arguments)]
pub fn run_noise_sweep(
    song: &AudioBuffer,
    command: &[String],
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
    n_values: &[f64],
    trials: usize,
    seed: u64,
    base: &CraftConfig,
    eval: &ChannelConfig,
) -> Result<Vec<SweepRow>> {
    let target = command_target(command, model, table, lexicon, seed, 3)?;
    // Rendered at the frame-reduced timing so it lines up with the target.
    let reduced = RenderParams {
        state_frames: (3, 3),
        gap_frames: (3, 3),
        edge_frames: (3, 3),
        ..RenderParams::default()
    };
    let command_audio = render_words(command, table, lexicon, &reduced, seed)?.audio;
    let features = model.feature_config();
    let shift = model.plan().frame_shift();
    n_values
        .par_iter()
        .map(|&n| {
            let cfg = CraftConfig { noise_bound: n, seed, eval_noise_draws: trials, ..base.clone() };
            let res = craft_waa(song, &target, model, table, lexicon, &cfg, eval)?;
            let start = (res.offset * shift).min(res.audio.len());
            let end = (start + command_audio.len()).min(res.audio.len());
            Ok(SweepRow {
                param: n,
                corr_song: Some(correlation(&res.audio, song, features)?),
                corr_cmd: Some(correlation(&res.audio.slice(start, end), &command_audio, features)?),
                success_pct: res.noisy_success.map(|f| 100.0 * f),
                trials,
                seed,
                ..SweepRow::default()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleLabel {
    Clean,
    Wta,
    Waa,
}

impl SampleLabel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(SampleLabel::Clean),
            "wta" => Ok(SampleLabel::Wta),
            "waa" => Ok(SampleLabel::Waa),
            other => Err(Error::InvalidConfig(format!("unknown sample label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub label: SampleLabel,
    pub audio: AudioBuffer,
}

/// Seed of turbulence trial `trial` on sample `index`.
pub fn trial_seed(seed: u64, index: usize, trial: usize) -> u64 {
    // splitmix64 finalizer over the packed triple.
    let mut z = seed ^ ((index as u64) << 32) ^ trial as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Detection rate per label at each grid point. Squeezing is
/// deterministic, so it runs one trial per sample.
#[allow(clippy::too_many_arguments)]
pub fn run_defense_sweep(
    samples: &[LabeledSample],
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
    defense: DefenseKind,
    grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let trials = match defense {
        DefenseKind::Turbulence => trials.max(1),
        DefenseKind::Squeezing => 1,
    };
    grid.iter()
        .map(|&param| {
            let jobs: Vec<(usize, usize)> =
                (0..samples.len()).flat_map(|i| (0..trials).map(move |t| (i, t))).collect();
            let hits = jobs
                .par_iter()
                .map(|&(i, t)| {
                    let audio = &samples[i].audio;
                    let v = match defense {
                        DefenseKind::Turbulence => {
                            detect_turbulence(audio, model, table, lexicon, param, trial_seed(seed, i, t))?
                        }
                        DefenseKind::Squeezing => detect_squeezing(audio, model, table, lexicon, param)?,
                    };
                    Ok(v.detected)
                })
                .collect::<Result<Vec<bool>>>()?;
            let rate = |label: SampleLabel| {
                let (mut n, mut d) = (0usize, 0usize);
                for (&(i, _), &hit) in jobs.iter().zip(&hits) {
                    if samples[i].label == label {
                        n += 1;
                        d += usize::from(hit);
                    }
                }
                (n > 0).then(|| 100.0 * d as f64 / n as f64)
            };
            Ok(SweepRow {
                param,
                detect_clean_pct: rate(SampleLabel::Clean),
                detect_wta_pct: rate(SampleLabel::Wta),
                detect_waa_pct: rate(SampleLabel::Waa),
                trials,
                seed,
                ..SweepRow::default()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::sine;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    /// Textbook two-pass Pearson, written independently.
    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
        cov / (sx * sy)
    }

    #[test]
    fn self_correlation_is_one() {
        let cfg = FeatureConfig::default();
        let a = noise(8000, 1);
        assert!((correlation(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let r = correlation_with(&a, &a, &cfg, CorrelationMode::Rank).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let cfg = FeatureConfig::default();
        let r = correlation(&noise(80_000, 1), &noise(80_000, 2), &cfg).unwrap();
        assert!(r.abs() <= 0.1, "{r}");
        // Without per-coefficient centering the shared offsets dominate.
        let fa = extract_mfcc(&noise(80_000, 1), &cfg).unwrap();
        let fb = extract_mfcc(&noise(80_000, 2), &cfg).unwrap();
        let raw = correlation_as_written(fa.values.as_slice(), fb.values.as_slice()).unwrap();
        assert!(raw > 0.9, "{raw}");
    }

    #[test]
    fn symmetric_and_trimmed() {
        let cfg = FeatureConfig::default();
        let a = noise(6000, 3);
        let b = sine(440.0, 0.3, 9000, 8000);
        let ab = correlation(&a, &b, &cfg).unwrap();
        let ba = correlation(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert_eq!(ab, correlation(&a, &b.slice(0, 6000), &cfg).unwrap());
    }

    #[test]
    fn constant_features_error() {
        assert!(matches!(correlation_as_written(&[1.0, 1.0], &[0.0, 2.0]), Err(Error::ZeroVariance)));
        let cfg = FeatureConfig::default();
        let z = AudioBuffer::zeros(800, 8000);
        let r = correlation(&z, &noise(800, 1), &cfg);
        assert!(matches!(r, Err(Error::ZeroVariance)), "{r:?}");
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![SweepRow {
            param: 0.5,
            detect_wta_pct: Some(100.0),
            trials: 3,
            seed: 9,
            ..SweepRow::default()
        }];
        assert_eq!(sweep_csv(&rows), format!("{SWEEP_CSV_HEADER}\n0.5,,,,,100,,3,9\n"));
    }

    #[test]
    fn empty_sample_set_errors() {
        let m = crate::acoustic::test_support::random_model(1, 37);
        let t = PhonemeTable::toy();
        let lex = Lexicon::toy(&t);
        let r = run_defense_sweep(&[], &m, &t, &lex, DefenseKind::Squeezing, &[0.7], 1, 0);
        assert!(matches!(r, Err(Error::EmptySampleSet)));
    }

    #[test]
    fn trial_seeds_differ() {
        let s: std::collections::HashSet<u64> =
            (0..10).flat_map(|i| (0..10).map(move |t| trial_seed(7, i, t))).collect();
        assert_eq!(s.len(), 100);
    }

    proptest! {
        #[test]
        fn matches_textbook_pearson(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..60)) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            match correlation_as_written(&x, &y) {
                Ok(r) => {
                    prop_assert!((-1.0..=1.0).contains(&r));
                    prop_assert!((r - pearson(&x, &y).clamp(-1.0, 1.0)).abs() < 1e-9);
                }
                Err(e) => prop_assert!(matches!(e, Error::ZeroVariance)),
            }
        }
    }
}
