//! Minimal dense-tensor library with tape-based reverse-mode autodiff.
//!
//! Tensors are immutable row-major `f64` buffers. Differentiable computation
//! runs through a [`Graph`]: every op validates shapes, checks its output for
//! NaN/Inf (an error state, never silently propagated), and records a node on
//! the tape. [`Graph::backward`] replays the tape in reverse and accumulates
//! gradients for every reachable leaf. A [`Graph::stop_gradient`] node passes
//! its forward value through unchanged and contributes exactly zero gradient.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

pub mod gradcheck;
mod graph;

pub use graph::{Gradients, Graph, NodeId};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape in {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("invalid parameter in {op}: {detail}")]
    InvalidParameter { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("tensor does not belong to this graph")]
    ForeignGraph,
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Identity of a tensor inside a particular graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct GraphRef {
    pub graph: u64,
    pub node: NodeId,
}

/// Dense N-dimensional array of 64-bit reals, row-major.
///
/// A tensor may or may not be attached to an autodiff graph. Detached tensors
/// are immutable constants and safely shareable across threads; attached
/// tensors additionally carry their node identity within one graph.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<GraphRef>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch { len: data.len(), shape });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor-new" });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]), node: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), node: None }
    }

    /// Uniform random tensor on [lo, hi), deterministic for a seeded `rng`.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Detached copy: same shape and values, no graph membership.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// Detached copy with one element replaced. Used by finite-difference
    /// probes and the gradient-descent update.
    pub fn with_value_at(&self, index: usize, value: f64) -> Tensor {
        let mut data = self.data.as_ref().clone();
        data[index] = value;
        Tensor { shape: self.shape.clone(), data: Arc::new(data), node: None }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<GraphRef>) -> Tensor {
        Tensor { shape, data, node }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Collection of named parameter tensors that can be walked in a stable order.
///
/// Used to attach parameters to a graph, read their gradients back, apply a
/// gradient-descent update, and serialize checkpoints — all without the
/// caller knowing the concrete parameter layout.
pub trait ParamGroup: Sized {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));

    fn map(&self, f: &mut dyn FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self>;

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Attach every parameter to `graph` as a leaf, preserving order.
    fn attach(&self, graph: &Graph) -> Result<Self> {
        self.map(&mut |_, t| graph.input(t))
    }

    fn numel(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}
