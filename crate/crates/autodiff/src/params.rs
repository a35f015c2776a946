//! Named parameter storage and the Adam optimizer.

use crate::{Graph, Tensor};
use std::collections::HashMap;
use std::sync::Arc;

/// One learnable tensor with its gradient accumulator and Adam state.
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f32>>,
    pub grad: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Ordered collection of named parameters. Iteration order is registration
/// order, which keeps checkpoints and updates deterministic.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    bindings: Vec<(usize, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Panics on duplicate names.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Vec<f32>) {
        assert_eq!(init.len(), shape.iter().product::<usize>(), "init length for {}", name);
        assert!(
            !self.index.contains_key(name),
            "parameter {} registered twice",
            name
        );
        let n = init.len();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value: Arc::new(init),
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {}", name))]
    }

    /// Bind a parameter into a graph as a differentiable leaf. The binding
    /// is remembered so `collect_grads` can route gradients back. Binding
    /// the same parameter several times in one pass is fine; contributions
    /// sum.
    pub fn bind(&mut self, g: &mut Graph, name: &str) -> Tensor {
        let idx = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {}", name));
        let p = &self.params[idx];
        let t = g.leaf(&Tensor { data: p.value.clone(), shape: p.shape.clone(), node: None });
        self.bindings.push((idx, t.clone()));
        t
    }

    /// Read-only (frozen) view: a detached tensor sharing the value storage.
    pub fn frozen(&self, name: &str) -> Tensor {
        let p = self.get(name);
        Tensor { data: p.value.clone(), shape: p.shape.clone(), node: None }
    }

    /// Pull gradients of every bound parameter out of the graph and add them
    /// to the per-parameter accumulators. Clears the binding list.
    pub fn collect_grads(&mut self, g: &Graph) {
        let bindings = std::mem::take(&mut self.bindings);
        for (idx, t) in bindings {
            if let Some(grad) = g.grad(&t) {
                for (a, b) in self.params[idx].grad.iter_mut().zip(grad.iter()) {
                    *a += *b;
                }
            }
        }
    }

    /// Drop bindings without collecting (e.g. a forward-only pass).
    pub fn clear_bindings(&mut self) {
        self.bindings.clear();
    }

    /// Add externally accumulated gradients (parallel shard training).
    pub fn add_grads(&mut self, grads: &HashMap<String, Vec<f32>>) {
        for (name, g) in grads {
            let idx = self.index[name.as_str()];
            for (a, b) in self.params[idx].grad.iter_mut().zip(g.iter()) {
                *a += *b;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Overwrite a parameter's values (checkpoint restore). Shape must match.
    pub fn load_values(&mut self, name: &str, shape: &[usize], values: Vec<f32>) {
        let idx = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {}", name));
        let p = &mut self.params[idx];
        assert_eq!(p.shape, shape, "checkpoint shape mismatch for {}", name);
        p.value = Arc::new(values);
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Standard Adam. Moment state lives in the store and persists across calls;
/// `step` zeroes gradients afterwards.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    pub fn with(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in &mut store.params {
            let value = Arc::make_mut(&mut p.value);
            for i in 0..value.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}
