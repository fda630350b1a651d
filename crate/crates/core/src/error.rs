//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("matmul dimension mismatch: {left:?} x {right:?}")]
    MatmulDims { left: Vec<usize>, right: Vec<usize> },

    #[error("matmul requires rank-2 tensors, got {shape:?}")]
    MatmulRank { shape: Vec<usize> },

    #[error("invalid tensor shape {shape:?} for {len} data elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("empty tensor passed to {op}")]
    EmptyTensor { op: &'static str },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward loss is not on the active tape")]
    LossNotOnTape,

    #[error("parameter {index} has no populated gradient")]
    MissingGrad { index: usize },

    #[error("optimizer state length {state} does not match parameter count {params}")]
    OptimizerStateMismatch { state: usize, params: usize },

    #[error("grad_check step size {h} outside (0, 1e-2]")]
    BadGradCheckStep { h: f64 },

    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("schedule bounds invalid: t_min={t_min}, t_max={t_max}")]
    BadScheduleBounds { t_min: f64, t_max: f64 },

    #[error("alpha(t) = {alpha} too small at t = {t} (degenerate division)")]
    DegenerateAlpha { alpha: f64, t: f64 },

    #[error("delta_sigma {delta_sigma} outside [0, {sigma}]")]
    DeltaSigmaOutOfRange { delta_sigma: f64, sigma: f64 },

    #[error("injection sequence exits schedule bounds: t_start={t_start}, n={n}, spacing={spacing}")]
    InjectionOutOfRange { t_start: f64, n: usize, spacing: f64 },

    #[error("sampler requires steps >= 1")]
    ZeroSamplerSteps,

    #[error("grad_tail {grad_tail} exceeds cap min(steps, 5) = {cap}")]
    GradTailTooLong { grad_tail: usize, cap: usize },

    #[error("empty token list")]
    EmptyTokenList,

    #[error("unknown token id {id} for vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("embedding norm {norm} below 1e-12 (cannot normalize)")]
    ZeroNormEmbedding { norm: f64 },

    #[error("empty batch passed to {op}")]
    EmptyBatch { op: &'static str },

    #[error("reward list length {got} does not match policy n+1 = {expected}")]
    AggregationLengthMismatch { got: usize, expected: usize },

    #[error("noise level {level} outside (0, 0.2]")]
    BadNoiseLevel { level: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("pixel value {value} outside [0, 1]")]
    PixelOutOfRange { value: f64 },

    #[error("preference pair has bit-identical winner and loser")]
    DegeneratePair,
}

pub type Result<T> = std::result::Result<T, Error>;
