//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The graph is rebuilt on every forward pass (define-by-run): ops are
//! recorded on a [`Graph`] tape in creation order and [`Graph::backward`]
//! walks the tape in reverse. Tensors themselves are immutable handles —
//! a detached tensor (no tape node) is `Send + Sync` and can be evaluated
//! from many threads, while graph construction and backward are
//! single-writer by design.
//!
//! Supported broadcasting is intentionally minimal: binary ops accept
//! equal shapes or a scalar on either side; anything else must be
//! reshaped or tiled explicitly (see [`Graph::tile_rows`]).

mod checkpoint;
mod conv;
mod graph;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::bilinear_upsample2x;
pub use graph::{Backward, Graph, NodeId};
pub use params::{Adam, Param, ParamStore};

use std::sync::Arc;

/// Immutable dense tensor handle. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Tensor {
    pub(crate) data: Arc<Vec<f32>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    /// Detached tensor from raw data. Panics if `shape` does not match the length.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { data: Arc::new(data), shape: shape.to_vec(), node: None }
    }

    /// Detached scalar.
    pub fn scalar(v: f32) -> Self {
        Tensor::from_vec(vec![v], &[1])
    }

    /// Detached zero tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same storage and graph node under a new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { data: self.data.clone(), shape: shape.to_vec(), node: self.node }
    }

    /// True when the tensor participates in a graph.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Copy of the underlying values.
    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_length_invariant() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(t.numel(), t.shape().iter().product::<usize>());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_mismatch_rejected() {
        let _ = Tensor::from_vec(vec![1.0; 5], &[2, 3]);
    }

    #[test]
    fn reshape_keeps_storage() {
        let t = Tensor::from_vec(vec![0.0; 12], &[3, 4]);
        let r = t.reshaped(&[2, 6]);
        assert_eq!(r.shape(), &[2, 6]);
        assert!(Arc::ptr_eq(&t.data, &r.data));
    }

    #[test]
    fn detached_tensors_never_receive_gradient() {
        let mut g = Graph::new();
        let c = Tensor::from_vec(vec![2.0, 3.0], &[2]);
        let x = g.leaf(&Tensor::from_vec(vec![1.0, 4.0], &[2]));
        let y = g.mul(&x, &c);
        let loss = g.sum(&y);
        g.backward(&loss);
        assert!(g.grad(&c).is_none());
        assert_eq!(g.grad(&x).unwrap(), &[2.0, 3.0]);
    }
}
