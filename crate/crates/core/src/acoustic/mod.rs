//! Frame-level DNN acoustic model: spliced, normalized MFCC frames →
//! tanh hidden layers → softmax over pdf-ids.
//!
//! The model is immutable once trained. [`AcousticModel::forward_traced`]
//! plus [`AcousticModel::backward`] give the exact gradient of any loss on
//! the output logits with respect to the raw waveform samples.

pub mod corpus;
mod io;
pub mod train;

use std::sync::Arc;

pub use corpus::{generate_synthetic_corpus, synthesize_song, CorpusSpec, RenderParams, ToyCorpus};
pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{train_toy_model, TrainHyper, TrainReport};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::features::{
    splice_context, splice_context_adjoint, FeatureConfig, FeatureMatrix, MfccPlan, MfccTrace,
};
use crate::lexicon::PdfId;
use crate::matrix::Matrix;

/// Fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// `x · Wᵀ + b` for every row of `x`.
    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.outputs);
        for (r, xr) in x.iter_rows().enumerate() {
            let o = out.row_mut(r);
            for (j, oj) in o.iter_mut().enumerate() {
                let w = &self.weights[j * self.inputs..(j + 1) * self.inputs];
                *oj = self.bias[j] + dot(w, xr);
            }
        }
        out
    }

    /// `g · W` for every row of `g`.
    fn backprop(&self, g: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(g.rows(), self.inputs);
        for (r, gr) in g.iter_rows().enumerate() {
            let o = out.row_mut(r);
            for (j, &gj) in gr.iter().enumerate() {
                if gj == 0.0 {
                    continue;
                }
                let w = &self.weights[j * self.inputs..(j + 1) * self.inputs];
                for (oi, wi) in o.iter_mut().zip(w) {
                    *oi += gj * wi;
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-frame pdf-id posteriors, kept alongside the logits they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    logits: Matrix,
    probs: Matrix,
    log_norm: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn from_logits(logits: Matrix) -> Self {
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        let mut log_norm = Vec::with_capacity(logits.rows());
        for (i, z) in logits.iter_rows().enumerate() {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for (p, v) in probs.row_mut(i).iter_mut().zip(z) {
                *p = (v - lse).exp();
            }
            log_norm.push(lse);
        }
        Self { logits, probs, log_norm }
    }

    /// Builds a matrix whose softmax reproduces `probs` (rows renormalized).
    pub fn from_probs(probs: &Matrix) -> Self {
        let logits = Matrix::from_vec(
            probs.rows(),
            probs.cols(),
            probs.as_slice().iter().map(|p| p.max(1e-300).ln()).collect(),
        );
        Self::from_logits(logits)
    }

    pub fn num_frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_pdfs(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn prob(&self, frame: usize, pdf: PdfId) -> f64 {
        self.probs.get(frame, pdf as usize)
    }

    pub fn log_prob(&self, frame: usize, pdf: PdfId) -> f64 {
        self.logits.get(frame, pdf as usize) - self.log_norm[frame]
    }

    /// Frames `[start, end)` as a new matrix.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        let k = self.num_pdfs();
        let take = |m: &Matrix| {
            Matrix::from_vec(end - start, k, m.as_slice()[start * k..end * k].to_vec())
        };
        Self {
            logits: take(&self.logits),
            probs: take(&self.probs),
            log_norm: self.log_norm[start..end].to_vec(),
        }
    }
}

/// Intermediates of one forward pass, consumed by [`AcousticModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    mfcc: MfccTrace,
    /// Input of each layer; entry 0 is the normalized spliced features.
    layer_inputs: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct AcousticModel {
    features: FeatureConfig,
    sample_rate: u32,
    context_left: usize,
    context_right: usize,
    norm_mean: Vec<f64>,
    norm_scale: Vec<f64>,
    layers: Vec<Dense>,
    seed: u64,
    plan: Arc<MfccPlan>,
}

impl PartialEq for AcousticModel {
    fn eq(&self, other: &Self) -> bool {
        self.features == other.features
            && self.sample_rate == other.sample_rate
            && self.context_left == other.context_left
            && self.context_right == other.context_right
            && self.norm_mean == other.norm_mean
            && self.norm_scale == other.norm_scale
            && self.layers == other.layers
            && self.seed == other.seed
    }
}

/// Everything except the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub features: FeatureConfig,
    pub sample_rate: u32,
    pub context_left: usize,
    pub context_right: usize,
    pub hidden: Vec<usize>,
    pub num_pdfs: usize,
}

impl ModelShape {
    pub fn input_dim(&self) -> usize {
        (self.context_left + self.context_right + 1) * self.features.num_cepstra
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(&self.hidden);
        d.push(self.num_pdfs);
        d
    }
}

impl AcousticModel {
    pub fn new(
        shape: &ModelShape,
        norm_mean: Vec<f64>,
        norm_scale: Vec<f64>,
        layers: Vec<Dense>,
        seed: u64,
    ) -> Result<Self> {
        let dims = shape.dims();
        let ceps = shape.features.num_cepstra;
        if norm_mean.len() != ceps || norm_scale.len() != ceps {
            return Err(Error::InvalidConfig("normalization length differs from num_cepstra".into()));
        }
        if layers.len() + 1 != dims.len() {
            return Err(Error::InvalidConfig("layer count does not match shape".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.inputs != dims[l]
                || layer.outputs != dims[l + 1]
                || layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(Error::InvalidConfig(format!("layer {l} dimensions do not chain")));
            }
        }
        let plan = Arc::new(MfccPlan::new(&shape.features, shape.sample_rate)?);
        Ok(Self {
            features: shape.features.clone(),
            sample_rate: shape.sample_rate,
            context_left: shape.context_left,
            context_right: shape.context_right,
            norm_mean,
            norm_scale,
            layers,
            seed,
            plan,
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            features: self.features.clone(),
            sample_rate: self.sample_rate,
            context_left: self.context_left,
            context_right: self.context_right,
            hidden: self.layers[..self.layers.len() - 1].iter().map(|l| l.outputs).collect(),
            num_pdfs: self.num_pdfs(),
        }
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.features
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn context(&self) -> (usize, usize) {
        (self.context_left, self.context_right)
    }

    pub fn num_pdfs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn normalization(&self) -> (&[f64], &[f64]) {
        (&self.norm_mean, &self.norm_scale)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn plan(&self) -> &MfccPlan {
        &self.plan
    }

    pub fn frame_count(&self, num_samples: usize) -> usize {
        self.plan.num_frames(num_samples)
    }

    /// Normalized, spliced network input for a feature matrix.
    pub fn network_input(&self, features: &FeatureMatrix) -> Matrix {
        let mut normed = features.values.clone();
        let d = normed.cols();
        for row in normed.as_mut_slice().chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.norm_mean).zip(&self.norm_scale) {
                *v = (*v - m) * s;
            }
        }
        splice_context(&normed, self.context_left, self.context_right)
    }

    /// Logits for a batch of network inputs, returning every layer input.
    pub(crate) fn run_layers(&self, input: Matrix) -> (Matrix, Vec<Matrix>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&x);
            if l < last {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut x, z));
        }
        (x, inputs)
    }

    pub fn logits_for_input(&self, input: Matrix) -> Matrix {
        self.run_layers(input).0
    }

    fn check_rate(&self, audio: &AudioBuffer) -> Result<()> {
        if audio.sample_rate() != self.sample_rate {
            return Err(Error::RateMismatch { left: audio.sample_rate(), right: self.sample_rate });
        }
        Ok(())
    }

    pub fn forward(&self, audio: &AudioBuffer) -> Result<PosteriorMatrix> {
        self.check_rate(audio)?;
        self.forward_samples(audio.samples())
    }

    pub fn forward_samples(&self, samples: &[f64]) -> Result<PosteriorMatrix> {
        let features = self.plan.extract(samples)?;
        let (logits, _) = self.run_layers(self.network_input(&features));
        Ok(PosteriorMatrix::from_logits(logits))
    }

    pub fn forward_traced(&self, samples: &[f64]) -> Result<(PosteriorMatrix, ForwardTrace)> {
        let (features, mfcc) = self.plan.extract_traced(samples)?;
        let (logits, layer_inputs) = self.run_layers(self.network_input(&features));
        Ok((PosteriorMatrix::from_logits(logits), ForwardTrace { mfcc, layer_inputs }))
    }

    /// Gradient w.r.t. the input samples of a loss whose gradient w.r.t.
    /// the output logits is `grad_logits`.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Matrix) -> Result<Vec<f64>> {
        let frames = trace.layer_inputs[0].rows();
        if grad_logits.shape() != (frames, self.num_pdfs()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", frames, self.num_pdfs()),
                got: format!("{}x{}", grad_logits.rows(), grad_logits.cols()),
            });
        }
        let mut g = grad_logits.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let mut gi = layer.backprop(&g);
            if l > 0 {
                // Input of layer l is tanh output of layer l-1.
                for (gv, a) in gi.as_mut_slice().iter_mut().zip(trace.layer_inputs[l].as_slice()) {
                    *gv *= 1.0 - a * a;
                }
            }
            g = gi;
        }
        let d = self.features.num_cepstra;
        let mut g_feat = splice_context_adjoint(&g, d, self.context_left, self.context_right);
        for row in g_feat.as_mut_slice().chunks_exact_mut(d) {
            for (v, s) in row.iter_mut().zip(&self.norm_scale) {
                *v *= s;
            }
        }
        self.plan.backward(&trace.mfcc, &g_feat)
    }

    /// Convenience wrapper: `forward_traced` followed by `backward`.
    pub fn input_gradient(&self, audio: &AudioBuffer, grad_logits: &Matrix) -> Result<Vec<f64>> {
        self.check_rate(audio)?;
        let (_, trace) = self.forward_traced(audio.samples())?;
        self.backward(&trace, grad_logits)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_model(seed: u64, num_pdfs: usize) -> AcousticModel {
        let shape = ModelShape {
            features: FeatureConfig::default(),
            sample_rate: 8000,
            context_left: 2,
            context_right: 2,
            hidden: vec![16, 12],
            num_pdfs,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = shape.dims();
        let layers = dims
            .windows(2)
            .map(|w| {
                let scale = (1.0 / w[0] as f64).sqrt();
                Dense {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| rng.gen_range(-scale..scale)).collect(),
                    bias: (0..w[1]).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                }
            })
            .collect();
        let mean = vec![-10.0; 13];
        let mut scale = vec![0.3; 13];
        scale[0] = 0.05;
        AcousticModel::new(&shape, mean, scale, layers, seed).unwrap()
    }

    pub fn noise(len: usize, amp: f64, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.gen_range(-amp..amp)).collect(), 8000).unwrap()
    }
}
