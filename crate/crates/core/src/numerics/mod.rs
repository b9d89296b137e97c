//! Dense `f64` tensors, reverse-mode differentiation and Adam.

mod graph;
mod optim;
mod tensor;

pub use graph::{xlogx, Graph, Var};
pub use optim::{Adam, ParamSet};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("slice {start}..{end} out of range for shape {shape:?}")]
    SliceOutOfRange {
        shape: Vec<usize>,
        start: usize,
        end: usize,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("optimizer got {grads} gradients for {params} parameters")]
    ParamCount { params: usize, grads: usize },
}

/// Max-subtracted softmax of a plain vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    graph::softmax_row(v, &mut out);
    out
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    out
}

/// Largest coordinate-wise relative error between two gradients. The
/// denominator is floored at `floor` so that coordinates with a vanishing
/// true gradient are compared absolutely.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
