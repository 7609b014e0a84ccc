//! Adversarial crafting: projected gradient descent on a per-sample
//! perturbation so the song's frame-level argmax follows a command's pdf-id
//! target. `craft_wta` optimizes against the clean input, `craft_waa`
//! against the input plus random channel noise.
//!
//! Only the samples that feed the target frames are perturbed, so each
//! iteration runs the model on a short window around the target and reuses
//! the song's cached frame decisions everywhere else.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;

use crate::acoustic::{AcousticModel, ForwardTrace, PosteriorMatrix};
use crate::audio::{AudioBuffer, PCM_MAX};
use crate::channel::{apply_channel, sample_noise, ChannelConfig};
use crate::decoder::{argmax, decode_pdfs, decode_text, most_likely_pdf_sequence, success_rate, DEFAULT_MIN_RUN};
use crate::error::{Error, Result};
use crate::lexicon::{
    extract_target_sequence, reduce_frames, synthesize_command, Lexicon, PdfId, PhonemeTable, TargetSequence,
};
use crate::matrix::Matrix;

/// First noise-draw index of the validation draws used by the WAA stopping rule.
pub const VALIDATION_DRAW_BASE: u64 = 1 << 40;
/// First noise-draw index of held-out evaluation draws.
pub const EVAL_DRAW_BASE: u64 = 1 << 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surrogate {
    /// `Σ −log a[offset+i, b_i]`.
    CrossEntropy,
    /// `Σ |E[pdf-id] − b_i|` with the softmax-expected id.
    LiteralL1,
}

impl Surrogate {
    pub fn name(self) -> &'static str {
        match self {
            Surrogate::CrossEntropy => "cross_entropy",
            Surrogate::LiteralL1 => "literal_l1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(Surrogate::CrossEntropy),
            "literal_l1" => Ok(Surrogate::LiteralL1),
            other => Err(Error::InvalidConfig(format!("unknown surrogate {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraftConfig {
    /// Per-sample bound on the perturbation.
    pub l: f64,
    /// Training noise bound `N` for WAA.
    pub noise_bound: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub noise_draws_per_iter: usize,
    pub eval_noise_draws: usize,
    pub surrogate: Surrogate,
    pub seed: u64,
    /// WAA stops once this many validation draws succeed at `validation_target` rate.
    pub validation_draws: usize,
    pub validation_target: f64,
    pub check_every: usize,
}

impl Default for CraftConfig {
    fn default() -> Self {
        Self {
            l: 0.15,
            noise_bound: 0.0,
            learning_rate: 0.01,
            max_iters: 5000,
            noise_draws_per_iter: 4,
            eval_noise_draws: 20,
            surrogate: Surrogate::CrossEntropy,
            seed: 0,
            validation_draws: 16,
            validation_target: 0.9,
            check_every: 25,
        }
    }
}

impl CraftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.l) {
            return Err(Error::OutOfRange(format!("l = {} not in [0, 1]", self.l)));
        }
        if !(0.0..1.0).contains(&self.noise_bound) {
            return Err(Error::OutOfRange(format!("N = {} not in [0, 1)", self.noise_bound)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::OutOfRange(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.noise_draws_per_iter == 0 || self.check_every == 0 {
            return Err(Error::OutOfRange("noise draws and check interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.validation_target) {
            return Err(Error::OutOfRange("validation target must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss: f64,
    pub mismatch: usize,
    pub best_mismatch: usize,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraftResult {
    pub audio: AudioBuffer,
    /// `audio − song`, sample by sample.
    pub perturbation: AudioBuffer,
    pub target: TargetSequence,
    pub offset: usize,
    pub iterations: usize,
    pub history: Vec<IterRecord>,
    /// `+∞` when the perturbation is zero.
    pub snr_db: f64,
    pub decoded: Vec<String>,
    pub clean_success: bool,
    /// Held-out channel success fraction (WAA only).
    pub noisy_success: Option<f64>,
    /// Last validation fraction seen by the stopping rule (WAA only).
    pub validation_success: Option<f64>,
}

impl CraftResult {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("iteration,loss,mismatch,best_mismatch,snr_db\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{},{},{},{}", r.iteration, r.loss, r.mismatch, r.best_mismatch, r.snr_db);
        }
        out
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command: {}", self.target.command.join(" "));
        let _ = writeln!(out, "decoded: {}", self.decoded.join(" "));
        let _ = writeln!(out, "clean_success: {}", self.clean_success);
        let _ = writeln!(out, "offset_frames: {}", self.offset);
        let _ = writeln!(out, "target_frames: {}", self.target.len());
        let _ = writeln!(out, "iterations: {}", self.iterations);
        let _ = writeln!(out, "snr_db: {}", self.snr_db);
        let _ = writeln!(out, "max_abs_perturbation: {}", self.perturbation.peak());
        if let Some(f) = self.validation_success {
            let _ = writeln!(out, "validation_success: {f}");
        }
        if let Some(f) = self.noisy_success {
            let _ = writeln!(out, "noisy_success: {f}");
        }
        out
    }
}

/// Frames where `m[offset + i] != b[i]`.
pub fn pdf_mismatch(m: &[PdfId], b: &TargetSequence, offset: usize) -> Result<usize> {
    check_fit(m.len(), b.len(), offset)?;
    Ok(m[offset..offset + b.len()].iter().zip(&b.pdfs).filter(|(x, y)| x != y).count())
}

fn check_fit(frames: usize, len: usize, offset: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::EmptyTarget);
    }
    if offset + len > frames {
        return Err(Error::OffsetOutOfRange { offset, len, frames });
    }
    Ok(())
}

/// Surrogate loss of `b` placed at `offset`, with its gradient w.r.t. the logits of `a`.
pub fn surrogate_loss(
    a: &PosteriorMatrix,
    b: &TargetSequence,
    offset: usize,
    surrogate: Surrogate,
) -> Result<(f64, Matrix)> {
    check_fit(a.num_frames(), b.len(), offset)?;
    let mut grad = Matrix::zeros(a.num_frames(), a.num_pdfs());
    let loss = accumulate_loss(a, &b.pdfs, offset, surrogate, &mut grad);
    Ok((loss, grad))
}

fn accumulate_loss(a: &PosteriorMatrix, b: &[PdfId], offset: usize, surrogate: Surrogate, grad: &mut Matrix) -> f64 {
    let mut loss = 0.0;
    for (i, &target) in b.iter().enumerate() {
        let r = offset + i;
        let p = a.probs().row(r);
        let g = grad.row_mut(r);
        match surrogate {
            Surrogate::CrossEntropy => {
                loss -= a.log_prob(r, target);
                for (j, (gj, pj)) in g.iter_mut().zip(p).enumerate() {
                    *gj = pj - if j == target as usize { 1.0 } else { 0.0 };
                }
            }
            Surrogate::LiteralL1 => {
                let e: f64 = p.iter().enumerate().map(|(j, pj)| j as f64 * pj).sum();
                let d = e - target as f64;
                loss += d.abs();
                let s = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                for (j, (gj, pj)) in g.iter_mut().zip(p).enumerate() {
                    *gj = s * pj * (j as f64 - e);
                }
            }
        }
    }
    loss
}

/// Synthesizes `words`, takes the model's per-frame argmax, and caps
/// repeated ids at `min_repeat` frames.
pub fn command_target(
    words: &[String],
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
    seed: u64,
    min_repeat: usize,
) -> Result<TargetSequence> {
    let audio = synthesize_command(words, table, lexicon, seed)?;
    let b = extract_target_sequence(&audio, model, words)?;
    reduce_frames(&b, min_repeat)
}

/// First offset with the fewest mismatching frames.
pub fn best_offset(m: &[PdfId], b: &TargetSequence) -> Result<usize> {
    if b.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if b.len() > m.len() {
        return Err(Error::SongTooShort { frames: m.len(), needed: b.len() });
    }
    let mut best = (usize::MAX, 0);
    for off in 0..=m.len() - b.len() {
        let mm = pdf_mismatch(m, b, off)?;
        if mm < best.0 {
            best = (mm, off);
        }
    }
    Ok(best.1)
}

/// Fraction of held-out channel draws after which `audio` still decodes to `command`.
pub fn noisy_success_fraction(
    audio: &AudioBuffer,
    command: &[String],
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
    channel: &ChannelConfig,
    draws: usize,
) -> Result<f64> {
    success_fraction(audio, command, model, table, lexicon, channel, EVAL_DRAW_BASE, draws)
}

#[allow(clippy::too_many_arguments)]
fn success_fraction(
    audio: &AudioBuffer,
    command: &[String],
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
    channel: &ChannelConfig,
    base: u64,
    draws: usize,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::OutOfRange("need at least one noise draw".into()));
    }
    let hits = (0..draws as u64)
        .into_par_iter()
        .map(|k| {
            let noisy = apply_channel(audio, channel, base + k)?;
            let words = decode_text(&noisy, model, table, lexicon)?.words;
            Ok(success_rate(&words, command)? == 100.0)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / draws as f64)
}

/// Sample and frame ranges touched by a target placed at `offset`.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    target: Range<usize>,
    /// Samples the optimizer may change.
    delta: Range<usize>,
    /// Frames whose decision can change.
    affected: Range<usize>,
    /// Frames computed per iteration; the first one is a throwaway margin
    /// when it is not frame 0, since pre-emphasis needs the previous sample.
    frames: Range<usize>,
    samples: Range<usize>,
}

fn layout(model: &AcousticModel, n_frames: usize, offset: usize, q: usize) -> Layout {
    let plan = model.plan();
    let (fl, fs) = (plan.frame_len(), plan.frame_shift());
    let (cl, cr) = model.context();
    let target = offset..offset + q;
    let feeding = target.start.saturating_sub(cl)..(target.end + cr).min(n_frames);
    let delta = feeding.start * fs..(feeding.end - 1) * fs + fl;
    // A frame reads samples [start - 1, start + fl) after pre-emphasis.
    let touches = |f: usize| f * fs + fl > delta.start && f * fs < delta.end + 1;
    let first = (0..n_frames).find(|&f| touches(f)).expect("target frames touch their own samples");
    let last = (0..n_frames).rev().find(|&f| touches(f)).expect("non-empty");
    let affected = first.saturating_sub(cr)..(last + 1 + cl).min(n_frames);
    let mut lo = affected.start.saturating_sub(cl);
    if lo > 0 {
        lo -= 1;
    }
    let frames = lo..(affected.end + cr).min(n_frames);
    let samples = frames.start * fs..(frames.end - 1) * fs + fl;
    Layout { target, delta, affected, frames, samples }
}

#[inline]
fn pcm_clip(v: f64) -> f64 {
    v.clamp(-1.0, PCM_MAX)
}

#[inline]
fn in_range(v: f64) -> bool {
    (-1.0..=PCM_MAX).contains(&v)
}

/// Truncates toward zero onto the 16-bit grid, so `|q(v)| <= |v|`.
#[inline]
fn grid_trunc(v: f64) -> f64 {
    (v * 32768.0).trunc() / 32768.0
}

struct Problem<'a> {
    song: &'a AudioBuffer,
    target: &'a TargetSequence,
    model: &'a AcousticModel,
    table: &'a PhonemeTable,
    lexicon: &'a Lexicon,
    cfg: &'a CraftConfig,
}

/// Perturbed samples over `Layout::delta`.
type Snapshot = Vec<f64>;

impl Problem<'_> {
    fn window_forward(&self, x: &[f64], lay: &Layout) -> Result<(PosteriorMatrix, ForwardTrace)> {
        self.model.forward_traced(&x[lay.samples.clone()])
    }

    /// Loss on the target rows and its gradient w.r.t. the window samples.
    fn loss_and_grad(&self, post: &PosteriorMatrix, trace: &ForwardTrace, lay: &Layout) -> Result<(f64, Vec<f64>)> {
        let mut g = Matrix::zeros(post.num_frames(), post.num_pdfs());
        let off = lay.target.start - lay.frames.start;
        let loss = accumulate_loss(post, &self.target.pdfs, off, self.cfg.surrogate, &mut g);
        Ok((loss, self.model.backward(trace, &g)?))
    }

    fn clean_loss(&self, post: &PosteriorMatrix, lay: &Layout) -> f64 {
        let off = lay.target.start - lay.frames.start;
        let mut scratch = Matrix::zeros(post.num_frames(), post.num_pdfs());
        accumulate_loss(post, &self.target.pdfs, off, self.cfg.surrogate, &mut scratch)
    }

    fn run(&self, train_noise: Option<&ChannelConfig>) -> Result<CraftResult> {
        let (song, model, cfg) = (self.song, self.model, self.cfg);
        cfg.validate()?;
        if song.sample_rate() != model.sample_rate() {
            return Err(Error::RateMismatch { left: song.sample_rate(), right: model.sample_rate() });
        }
        if self.target.is_empty() || self.target.command.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let q = self.target.len();
        let n_frames = model.frame_count(song.len());
        if n_frames < q {
            return Err(Error::SongTooShort { frames: n_frames, needed: q });
        }
        let mut m = most_likely_pdf_sequence(&model.forward(song)?)?;
        let offset = best_offset(&m, self.target)?;
        let lay = layout(model, n_frames, offset, q);
        let x = song.samples();
        let command = &self.target.command;
        let song_energy: f64 = x.iter().map(|v| v * v).sum();

        let mut delta = vec![0.0; lay.delta.len()];
        let mut xq = x.to_vec();
        let mut history = Vec::new();
        let mut best_mismatch = usize::MAX;
        let mut best: Option<Snapshot> = None;
        let mut validated: Option<(f64, Snapshot)> = None;
        let mut last_check: Option<usize> = None;
        let mut last_fraction = None;
        let mut steps = 0usize;
        let mut finished = false;

        loop {
            let (post, trace) = self.window_forward(&xq, &lay)?;
            let win_off = lay.frames.start;
            for f in lay.affected.clone() {
                m[f] = argmax(post.logits().row(f - win_off)) as PdfId;
            }
            let mismatch = pdf_mismatch(&m, self.target, offset)?;
            let words = decode_pdfs(&m, self.table, self.lexicon, DEFAULT_MIN_RUN).words;
            let success = success_rate(&words, command)? == 100.0;
            let pert_energy: f64 = lay.delta.clone().map(|s| (xq[s] - x[s]).powi(2)).sum();
            let snr = snr_from_energy(song_energy, pert_energy);
            if mismatch < best_mismatch {
                best_mismatch = mismatch;
                best = Some(xq[lay.delta.clone()].to_vec());
            }
            history.push(IterRecord {
                iteration: steps,
                loss: self.clean_loss(&post, &lay),
                mismatch,
                best_mismatch,
                snr_db: snr,
            });

            if success {
                match train_noise {
                    None => {
                        finished = true;
                        break;
                    }
                    Some(noise) => {
                        let due = last_check.map_or(true, |c| steps - c >= cfg.check_every);
                        if due {
                            last_check = Some(steps);
                            let audio = AudioBuffer::new(xq.clone(), song.sample_rate())?;
                            let frac = success_fraction(
                                &audio,
                                command,
                                model,
                                self.table,
                                self.lexicon,
                                noise,
                                VALIDATION_DRAW_BASE,
                                cfg.validation_draws.max(1),
                            )?;
                            last_fraction = Some(frac);
                            if validated.as_ref().map_or(true, |(f, _)| frac > *f) {
                                validated = Some((frac, xq[lay.delta.clone()].to_vec()));
                            }
                            if frac >= cfg.validation_target {
                                finished = true;
                                break;
                            }
                        }
                    }
                }
            }
            if steps >= cfg.max_iters || cfg.l == 0.0 {
                break;
            }

            let grad = match train_noise {
                None => {
                    let (_, g) = self.loss_and_grad(&post, &trace, &lay)?;
                    g
                }
                Some(noise) => self.noisy_grad(&xq, &lay, noise, steps)?,
            };
            let base = lay.samples.start;
            let masked: Vec<f64> = lay
                .delta
                .clone()
                .zip(&delta)
                .map(|(s, d)| if in_range(x[s] + grid_trunc(*d)) { grad[s - base] } else { 0.0 })
                .collect();
            let gmax = masked.iter().fold(0.0_f64, |a, g| a.max(g.abs()));
            if gmax > 0.0 {
                let step = cfg.learning_rate / gmax;
                for (d, g) in delta.iter_mut().zip(&masked) {
                    *d = (*d - step * g).clamp(-cfg.l, cfg.l);
                }
            }
            for (s, d) in lay.delta.clone().zip(&delta) {
                xq[s] = pcm_clip(x[s] + grid_trunc(*d));
            }
            steps += 1;
        }

        if !finished {
            let pick = validated.map(|(_, s)| s).or(best);
            if let Some(snap) = pick {
                xq[lay.delta.clone()].copy_from_slice(&snap);
            }
        }

        let audio = AudioBuffer::new(xq, song.sample_rate())?;
        let pert: Vec<f64> = audio.samples().iter().zip(x).map(|(a, b)| a - b).collect();
        let pert_energy: f64 = pert.iter().map(|v| v * v).sum();
        let decoded = decode_text(&audio, model, self.table, self.lexicon)?.words;
        let clean_success = success_rate(&decoded, command)? == 100.0;
        Ok(CraftResult {
            perturbation: AudioBuffer::new(pert, song.sample_rate())?,
            audio,
            target: self.target.clone(),
            offset,
            iterations: steps,
            history,
            snr_db: snr_from_energy(song_energy, pert_energy),
            decoded,
            clean_success,
            noisy_success: None,
            validation_success: last_fraction,
        })
    }

    /// Mean sample gradient over this iteration's training noise draws,
    /// masked where the noisy signal clips.
    fn noisy_grad(&self, xq: &[f64], lay: &Layout, noise: &ChannelConfig, iter: usize) -> Result<Vec<f64>> {
        let draws = self.cfg.noise_draws_per_iter;
        let win = lay.samples.clone();
        let parts = (0..draws)
            .into_par_iter()
            .map(|j| {
                let idx = (iter * draws + j) as u64;
                let n = sample_noise(xq.len(), noise, idx, self.song.sample_rate());
                let n = &n.samples()[win.clone()];
                let raw: Vec<f64> = xq[win.clone()].iter().zip(n).map(|(a, b)| a + b).collect();
                let noisy: Vec<f64> = raw.iter().map(|&v| pcm_clip(v)).collect();
                let (post, trace) = self.model.forward_traced(&noisy)?;
                let (_, mut g) = self.loss_and_grad(&post, &trace, lay)?;
                for (gv, r) in g.iter_mut().zip(&raw) {
                    if !in_range(*r) {
                        *gv = 0.0;
                    }
                }
                Ok(g)
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let mut sum = vec![0.0; win.len()];
        for g in &parts {
            sum.iter_mut().zip(g).for_each(|(s, v)| *s += v);
        }
        let inv = 1.0 / draws as f64;
        sum.iter_mut().for_each(|s| *s *= inv);
        Ok(sum)
    }
}

fn snr_from_energy(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

/// Crafts an adversarial song for direct (file-level) input.
pub fn craft_wta(
    song: &AudioBuffer,
    target: &TargetSequence,
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
    cfg: &CraftConfig,
) -> Result<CraftResult> {
    Problem { song, target, model, table, lexicon, cfg }.run(None)
}

/// Crafts an adversarial song that survives additive channel noise.
/// Training draws use `cfg.noise_bound` (and the channel's captured noise,
/// if any) under `cfg.seed`; the reported noisy success uses `channel`.
pub fn craft_waa(
    song: &AudioBuffer,
    target: &TargetSequence,
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
    cfg: &CraftConfig,
    channel: &ChannelConfig,
) -> Result<CraftResult> {
    channel.validate()?;
    let train = ChannelConfig {
        noise_bound: if cfg.noise_bound == 0.0 && channel.captured_noise.is_some() {
            channel.noise_bound
        } else {
            cfg.noise_bound
        },
        captured_noise: channel.captured_noise.clone(),
        seed: cfg.seed,
    };
    let problem = Problem { song, target, model, table, lexicon, cfg };
    let mut result = if train.is_silent() { problem.run(None)? } else { problem.run(Some(&train))? };
    result.noisy_success = Some(noisy_success_fraction(
        &result.audio,
        &target.command,
        model,
        table,
        lexicon,
        channel,
        cfg.eval_noise_draws.max(1),
    )?);
    Ok(result)
}
