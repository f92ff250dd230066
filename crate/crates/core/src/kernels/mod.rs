//! Forward and backward 3-D network primitives: two interchangeable
//! convolution engines plus a brute-force reference, max pooling, transposed
//! convolution, fused batch-norm+scale, and ReLU.

mod batchnorm;
mod conv;
mod deconv;
mod pool;
mod relu;

pub use batchnorm::{
    batchnorm3d_backward, batchnorm3d_fused, batchnorm3d_separate, batchnorm3d_train, BnCache,
};
pub use conv::{conv3d_backward, conv3d_forward};
pub use deconv::{deconv3d_backward, deconv3d_forward};
pub use pool::{maxpool3d, maxpool3d_backward};
pub use relu::{relu, relu_backward};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor5};

/// Convolution filter bank: weights (out_c, in_c, kd, kh, kw) plus one bias
/// per output channel.
#[derive(Debug, Clone)]
pub struct ConvWeights {
    pub w: Tensor5,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    pub fn new(w: Tensor5, bias: Vec<f32>) -> Self {
        ConvWeights { w, bias }
    }

    pub fn zeros(g: &ConvGeometry) -> Self {
        let (kd, kh, kw) = g.kernel;
        ConvWeights {
            w: Tensor5::zeros(g.out_channels, g.in_channels, kd, kh, kw),
            bias: vec![0.0; g.out_channels],
        }
    }

    pub fn validate_for(&self, g: &ConvGeometry) -> Result<()> {
        let dims = self.w.dims();
        let want = (g.out_channels, g.in_channels, g.kernel.0, g.kernel.1, g.kernel.2);
        if dims != want {
            return Err(Error::Shape(format!(
                "conv weights are {dims:?} but geometry expects {want:?}"
            )));
        }
        if self.bias.len() != g.out_channels {
            return Err(Error::Shape(format!(
                "conv bias has {} entries but geometry expects {}",
                self.bias.len(),
                g.out_channels
            )));
        }
        Ok(())
    }
}

/// Transposed-convolution filter bank: weights (in_c, out_c, kd, kh, kw) plus
/// one bias per output channel. The layout is the adjoint view of
/// [`ConvWeights`]: a deconv with weights w is the adjoint of a strided conv
/// whose filter bank is the same array read with in/out swapped.
#[derive(Debug, Clone)]
pub struct DeconvWeights {
    pub w: Tensor5,
    pub bias: Vec<f32>,
}

impl DeconvWeights {
    pub fn new(w: Tensor5, bias: Vec<f32>) -> Self {
        DeconvWeights { w, bias }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, k: usize) -> Self {
        DeconvWeights {
            w: Tensor5::zeros(in_channels, out_channels, k, k, k),
            bias: vec![0.0; out_channels],
        }
    }
}

/// Which algorithm realizes the convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvEngine {
    /// im2col patch lowering followed by one blocked GEMM per sample.
    GemmLowering,
    /// 2-D convolutions between depth slices, summed into each output slice.
    SliceDecomposed,
    /// Brute-force seven-loop transcription of the definition; the oracle the
    /// other two are tested against.
    NaiveReference,
}

impl ConvEngine {
    pub const ALL: [ConvEngine; 3] =
        [ConvEngine::GemmLowering, ConvEngine::SliceDecomposed, ConvEngine::NaiveReference];

    pub fn name(&self) -> &'static str {
        match self {
            ConvEngine::GemmLowering => "gemm",
            ConvEngine::SliceDecomposed => "slice",
            ConvEngine::NaiveReference => "naive",
        }
    }
}

/// Batch-norm + scale parameters for one channel axis.
#[derive(Debug, Clone)]
pub struct BnScaleParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BnScaleParams {
    /// Identity transform: gamma 1, beta 0, fresh running stats.
    pub fn identity(channels: usize) -> Self {
        BnScaleParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate_for(&self, channels: usize) -> Result<()> {
        if self.gamma.len() != channels
            || self.beta.len() != channels
            || self.running_mean.len() != channels
            || self.running_var.len() != channels
        {
            return Err(Error::Shape(format!(
                "batch-norm params sized for {} channels, input has {channels}",
                self.gamma.len()
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("running variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Whether batch norm uses batch statistics (and updates running stats) or
/// the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}
