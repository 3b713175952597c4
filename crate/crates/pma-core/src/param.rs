//! Shared trainable-parameter cells. A `Param` is a cheap cloneable handle;
//! graphs lease the current value during a forward pass and accumulate
//! gradients back into the cell on backward.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
struct ParamState {
    name: String,
    value: Tensor,
    grad: Tensor,
    trainable: bool,
    /// Bumped on every value mutation; lets shared-use contracts detect
    /// mid-forward edits.
    version: u64,
    /// Set by backward when a gradient lands here; cleared by the optimizer.
    grad_fresh: bool,
}

#[derive(Debug, Clone)]
pub struct Param {
    id: u64,
    state: Arc<RwLock<ParamState>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Param {
        let grad = Tensor::zeros(value.shape());
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            state: Arc::new(RwLock::new(ParamState {
                name: name.into(),
                value,
                grad,
                trainable,
                version: 0,
                grad_fresh: false,
            })),
        }
    }

    /// Stable identity of the cell (not of the handle).
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> String {
        self.state.read().unwrap().name.clone()
    }

    pub fn trainable(&self) -> bool {
        self.state.read().unwrap().trainable
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.state.write().unwrap().trainable = trainable;
    }

    pub fn value(&self) -> Tensor {
        self.state.read().unwrap().value.clone()
    }

    pub fn grad(&self) -> Tensor {
        self.state.read().unwrap().grad.clone()
    }

    pub fn numel(&self) -> usize {
        self.state.read().unwrap().value.numel()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.state.read().unwrap().value.shape().to_vec()
    }

    pub fn version(&self) -> u64 {
        self.state.read().unwrap().version
    }

    pub fn grad_fresh(&self) -> bool {
        self.state.read().unwrap().grad_fresh
    }

    pub fn set_value(&self, value: Tensor) {
        let mut s = self.state.write().unwrap();
        assert!(
            value.same_shape(&s.value),
            "set_value must preserve shape ({:?} vs {:?})",
            value.shape(),
            s.value.shape()
        );
        s.value = value;
        s.version += 1;
    }

    /// In-place nudge of one element; used by finite differencing.
    pub fn nudge(&self, index: usize, delta: f64) {
        let mut s = self.state.write().unwrap();
        s.value.data_mut()[index] += delta;
        s.version += 1;
    }

    pub fn value_at(&self, index: usize) -> f64 {
        self.state.read().unwrap().value.data()[index]
    }

    pub fn set_value_at(&self, index: usize, v: f64) {
        let mut s = self.state.write().unwrap();
        s.value.data_mut()[index] = v;
        s.version += 1;
    }

    pub fn zero_grad(&self) {
        let mut s = self.state.write().unwrap();
        s.grad = Tensor::zeros(s.value.shape());
        s.grad_fresh = false;
    }

    pub fn scale_grad(&self, factor: f64) {
        let mut s = self.state.write().unwrap();
        for g in s.grad.data_mut() {
            *g *= factor;
        }
    }

    /// Accumulate a gradient contribution. Non-trainable cells keep a zero
    /// grad by contract, so contributions are dropped for them.
    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut s = self.state.write().unwrap();
        if !s.trainable {
            return;
        }
        for (g, c) in s.grad.data_mut().iter_mut().zip(contribution) {
            *g += c;
        }
        s.grad_fresh = true;
    }

    /// Apply `f` to (value, grad) under the lock; `f` must not change shapes.
    pub(crate) fn update_value<F: FnOnce(&mut [f64], &[f64])>(&self, f: F) {
        let mut s = self.state.write().unwrap();
        let ParamState { value, grad, .. } = &mut *s;
        // Split borrow: grad is read-only here.
        let grad_data: Vec<f64> = grad.data().to_vec();
        f(value.data_mut(), &grad_data);
        s.version += 1;
    }

    pub(crate) fn clear_grad_fresh(&self) {
        self.state.write().unwrap().grad_fresh = false;
    }
}

/// Sum of version counters over a set of parameters; equal fingerprints mean
/// no value was touched in between.
pub fn version_fingerprint(params: &[Param]) -> u64 {
    params
        .iter()
        .fold(0u64, |acc, p| acc.wrapping_mul(1099511628211).wrapping_add(p.version()))
}
