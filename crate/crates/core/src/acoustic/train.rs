//! Frame-level cross-entropy training with Adam. Fully deterministic for a
//! given corpus and seed: one ChaCha stream drives initialization and
//! shuffling, and gradient sums run in a fixed order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::corpus::ToyCorpus;
use super::{AcousticModel, Dense, ModelShape};
use crate::audio::CANONICAL_RATE;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, MfccPlan};
use crate::lexicon::PdfId;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub context_left: usize,
    pub context_right: usize,
    pub features: FeatureConfig,
    pub seed: u64,
    /// Trailing fraction of the corpus kept out of training.
    pub holdout_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            epochs: 12,
            batch_size: 128,
            hidden: vec![64, 64],
            context_left: 4,
            context_right: 4,
            features: FeatureConfig::default(),
            seed: 7,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub train_frames: usize,
    pub heldout_frames: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

struct FrameSet {
    inputs: Matrix,
    labels: Vec<PdfId>,
}

/// Chunk size for parallel gradient accumulation; sums are reduced in
/// chunk order so results do not depend on scheduling.
const GRAD_CHUNK: usize = 32;

pub fn train_toy_model(corpus: &ToyCorpus, hyper: &TrainHyper) -> Result<(AcousticModel, TrainReport)> {
    if corpus.utterances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if hyper.batch_size == 0 || hyper.learning_rate <= 0.0 {
        return Err(Error::InvalidConfig("batch size and learning rate must be positive".into()));
    }
    let shape = ModelShape {
        features: hyper.features.clone(),
        sample_rate: CANONICAL_RATE,
        context_left: hyper.context_left,
        context_right: hyper.context_right,
        hidden: hyper.hidden.clone(),
        num_pdfs: corpus.num_pdfs,
    };
    let plan = MfccPlan::new(&shape.features, shape.sample_rate)?;
    let n_utt = corpus.utterances.len();
    let n_hold = ((n_utt as f64) * hyper.holdout_fraction).round() as usize;
    let n_hold = n_hold.min(n_utt - 1);
    let (train_utts, hold_utts) = corpus.utterances.split_at(n_utt - n_hold);

    let feats = corpus
        .utterances
        .iter()
        .map(|u| {
            if u.audio.sample_rate() != shape.sample_rate {
                return Err(Error::RateMismatch { left: u.audio.sample_rate(), right: shape.sample_rate });
            }
            let f = plan.extract(u.audio.samples())?;
            if f.num_frames() != u.labels.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} labels", f.num_frames()),
                    got: format!("{} labels", u.labels.len()),
                });
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;

    let ceps = shape.features.num_cepstra;
    let (mut mean, mut var) = (vec![0.0; ceps], vec![0.0; ceps]);
    let mut count = 0usize;
    for f in &feats[..train_utts.len()] {
        for row in f.values.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            count += 1;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for f in &feats[..train_utts.len()] {
        for row in f.values.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v / count as f64).sqrt().max(1e-8)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let dims = shape.dims();
    let layers: Vec<Dense> = dims
        .windows(2)
        .map(|w| {
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            Dense {
                inputs: w[0],
                outputs: w[1],
                weights: (0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)).collect(),
                bias: vec![0.0; w[1]],
            }
        })
        .collect();
    let mut model = AcousticModel::new(&shape, mean, scale, layers, hyper.seed)?;

    let gather = |range: std::ops::Range<usize>, utts: &[super::corpus::Utterance]| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (f, u) in feats[range].iter().zip(utts) {
            let x = model.network_input(f);
            rows.extend_from_slice(x.as_slice());
            labels.extend_from_slice(&u.labels);
        }
        FrameSet { inputs: Matrix::from_vec(labels.len(), dims[0], rows), labels }
    };
    let train = gather(0..train_utts.len(), train_utts);
    let hold = gather(train_utts.len()..n_utt, hold_utts);

    let mut adam = Adam::new(&model.layers, hyper.learning_rate);
    let mut order: Vec<usize> = (0..train.labels.len()).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let (loss, grads) = batch_gradient(&model, &train, batch);
            epoch_loss += loss;
            adam.step(model.layers_mut(), &grads);
        }
        final_loss = epoch_loss / train.labels.len() as f64;
    }

    let report = TrainReport {
        epochs: hyper.epochs,
        train_frames: train.labels.len(),
        heldout_frames: hold.labels.len(),
        final_loss,
        train_accuracy: accuracy(&model, &train),
        heldout_accuracy: accuracy(&model, &hold),
    };
    Ok((model, report))
}

fn accuracy(model: &AcousticModel, set: &FrameSet) -> f64 {
    if set.labels.is_empty() {
        return f64::NAN;
    }
    let logits = model.logits_for_input(set.inputs.clone());
    let correct = logits
        .iter_rows()
        .zip(&set.labels)
        .filter(|(row, &label)| argmax(row) == label as usize)
        .count();
    correct as f64 / set.labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Summed cross-entropy and its gradient over `batch`, averaged per frame.
fn batch_gradient(model: &AcousticModel, set: &FrameSet, batch: &[usize]) -> (f64, Vec<Dense>) {
    let parts: Vec<(f64, Vec<Dense>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| chunk_gradient(model, set, chunk))
        .collect();
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, part) in grads.iter_mut().zip(&g) {
            acc.weights.iter_mut().zip(&part.weights).for_each(|(a, b)| *a += b);
            acc.bias.iter_mut().zip(&part.bias).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.weights.iter_mut().for_each(|v| *v *= inv);
        g.bias.iter_mut().for_each(|v| *v *= inv);
    }
    (loss, grads)
}

fn chunk_gradient(model: &AcousticModel, set: &FrameSet, chunk: &[usize]) -> (f64, Vec<Dense>) {
    let cols = set.inputs.cols();
    let mut x = Matrix::zeros(chunk.len(), cols);
    for (r, &i) in chunk.iter().enumerate() {
        x.row_mut(r).copy_from_slice(set.inputs.row(i));
    }
    let (logits, inputs) = model.run_layers(x);
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &i) in chunk.iter().enumerate() {
        let z = logits.row(r);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let label = set.labels[i] as usize;
        loss += lse - z[label];
        for (j, gv) in g.row_mut(r).iter_mut().enumerate() {
            *gv = (z[j] - lse).exp() - if j == label { 1.0 } else { 0.0 };
        }
    }
    let layers = model.layers();
    let mut grads: Vec<Dense> = layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let xin = &inputs[l];
        let gw = &mut grads[l];
        for (gr, xr) in g.iter_rows().zip(xin.iter_rows()) {
            for (j, &gj) in gr.iter().enumerate() {
                gw.bias[j] += gj;
                let w = &mut gw.weights[j * layer.inputs..(j + 1) * layer.inputs];
                for (wv, xv) in w.iter_mut().zip(xr) {
                    *wv += gj * xv;
                }
            }
        }
        if l > 0 {
            let mut gi = layer.backprop(&g);
            for (gv, a) in gi.as_mut_slice().iter_mut().zip(xin.as_slice()) {
                *gv *= 1.0 - a * a;
            }
            g = gi;
        }
    }
    (loss, grads)
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    fn new(layers: &[Dense], lr: f64) -> Self {
        let zeros: Vec<Dense> = layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    fn step(&mut self, layers: &mut [Dense], grads: &[Dense]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for (((layer, g), m), v) in layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            update(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}
