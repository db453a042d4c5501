//! Compact time-delay network producing unit-norm ear embeddings.
//!
//! Layout: conv1 (kernel over frames) -> ReLU -> conv2 -> ReLU -> mean/std
//! statistics pooling -> linear projection -> L2 normalisation. Gradients are
//! derived by hand; `backward` is checked against central differences in the
//! test suite.

mod checkpoint;
mod loss;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use loss::{aam_loss, AamOutput};
pub use net::{backward, backward_weighted, forward, forward_cached, init_net, input_gradient, stats_pool, ForwardCache};
pub use train::{train, TrainHyper, TrainOutcome, TrainSample};

use serde::{Deserialize, Serialize};

/// Fixed scale applied to dB features before the first layer.
pub const INPUT_SCALE: f64 = 0.1;
/// Variance floor inside the standard-deviation pooling term.
pub const STD_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EmbedError {
    #[error("need at least {min} frames, got {frames}")]
    ShortInput { frames: usize, min: usize },
    #[error("feature matrix has {got} bands, network expects {expected}")]
    BandMismatch { got: usize, expected: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("training diverged in epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("embedding is not unit norm (norm {0})")]
    NotUnit(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub in_bands: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
}

impl ArchConfig {
    pub fn with_classes(n_classes: usize) -> Self {
        Self {
            in_bands: 40,
            conv1_channels: 32,
            conv1_kernel: 5,
            conv2_channels: 32,
            conv2_kernel: 3,
            embed_dim: 32,
            n_classes,
        }
    }

    /// Minimum number of input frames for one pooled output frame.
    pub fn min_frames(&self) -> usize {
        self.conv1_kernel + self.conv2_kernel - 1
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        let dims = [
            self.in_bands,
            self.conv1_channels,
            self.conv1_kernel,
            self.conv2_channels,
            self.conv2_kernel,
            self.embed_dim,
            self.n_classes,
        ];
        if dims.contains(&0) {
            return Err(EmbedError::Hyper("all architecture dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor, row-major. Used for parameters and gradients alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    /// `[conv1_channels][conv1_kernel][in_bands]`
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// `[conv2_channels][conv2_kernel][conv1_channels]`
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// `[embed_dim][2 * conv2_channels]`
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
    /// `[n_classes][embed_dim]`, rows unit norm for parameters.
    pub class_w: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 7] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "proj.weight",
    "proj.bias",
    "class.weight",
];

impl ParamSet {
    pub fn zeros(arch: &ArchConfig) -> Self {
        let ArchConfig {
            in_bands,
            conv1_channels: c1,
            conv1_kernel: k1,
            conv2_channels: c2,
            conv2_kernel: k2,
            embed_dim: e,
            n_classes: n,
        } = *arch;
        Self {
            conv1_w: vec![0.0; c1 * k1 * in_bands],
            conv1_b: vec![0.0; c1],
            conv2_w: vec![0.0; c2 * k2 * c1],
            conv2_b: vec![0.0; c2],
            proj_w: vec![0.0; e * 2 * c2],
            proj_b: vec![0.0; e],
            class_w: vec![0.0; n * e],
        }
    }

    pub fn tensors(&self) -> [&Vec<f64>; 7] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.proj_w,
            &self.proj_b,
            &self.class_w,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.class_w,
        ]
    }

    /// `self += alpha * other`
    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Network parameters with their architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub arch: ArchConfig,
    pub weights: ParamSet,
}

impl NetParams {
    pub fn class_row(&self, c: usize) -> &[f64] {
        let e = self.arch.embed_dim;
        &self.weights.class_w[c * e..(c + 1) * e]
    }

    pub fn renormalize_classes(&mut self) {
        let e = self.arch.embed_dim;
        for row in self.weights.class_w.chunks_mut(e) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wrap a vector that is already unit norm (within 1e-6).
    pub fn from_unit(v: Vec<f64>) -> Result<Self, EmbedError> {
        let n = l2(&v);
        if (n - 1.0).abs() > 1e-6 {
            return Err(EmbedError::NotUnit(n));
        }
        Ok(Self(v))
    }

    /// Normalise an arbitrary non-zero vector.
    pub fn normalized(v: Vec<f64>) -> Result<Self, EmbedError> {
        let n = l2(&v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(EmbedError::NotUnit(n));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
