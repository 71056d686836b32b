//! Dense tensors with a minimal reverse-mode differentiation engine.
//!
//! Tensors are immutable during forward construction; gradients accumulate
//! into leaf tensors on [`Tensor::backward`]. Values are stored as `f64`
//! internally (file formats remain 32-bit), which keeps the finite-difference
//! verification utilities trustworthy.

mod adam;
mod conv;
mod gradcheck;
mod norm;
pub mod ops;
mod sample;
mod softmax;

pub use adam::{adam_step, AdamState};
pub use conv::conv2d;
pub use gradcheck::{grad_check, grad_check_multi};
pub use norm::{batch_norm, instance_norm, BatchNormState, BnMode};
pub use sample::{bilinear_sample, oriented_grid};
pub use softmax::{scale_softmax, windowed_softmax};

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward rule attached to a non-leaf tensor. Implementations capture the
/// parent tensors (and any saved forward buffers) they need.
pub(crate) trait Backward: Send + Sync {
    fn backward(&self, out_grad: &[f64]);
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Box<dyn Backward>>,
    parents: Vec<Tensor>,
}

/// Dense N-dimensional array participating in reverse-mode differentiation.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(None),
                op: None,
                parents: Vec::new(),
            }),
        }
    }

    /// Constant leaf (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data, false)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Non-leaf result of an op. Gradient tracking is dropped when no parent
    /// requires it.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        op: Box<dyn Backward>,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        if !requires_grad {
            return Tensor::new(shape, data, false);
        }
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad: true,
                grad: Mutex::new(None),
                op: Some(op),
                parents,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.inner.data.read().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of {} elements", d.len());
        d[0]
    }

    /// Overwrite the stored values. Only meaningful on leaves between
    /// forward passes (the optimizer and the finite-difference oracle use it).
    pub fn set_data(&self, data: Vec<f64>) {
        let mut d = self.inner.data.write().unwrap();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        *d = data;
    }

    pub(crate) fn map_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut d = self.inner.data.write().unwrap();
        f(&mut d);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.lock().unwrap();
        match g.as_mut() {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            None => *g = Some(contribution.to_vec()),
        }
    }

    /// Detached copy: same values, no gradient history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.inner.shape, self.to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar tensor, seeding with 1.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar tensor");
        self.backward_with(&[1.0]);
    }

    /// Reverse-mode sweep with an explicit output gradient.
    pub fn backward_with(&self, seed: &[f64]) {
        assert_eq!(seed.len(), self.numel(), "seed shape mismatch");
        if !self.inner.requires_grad {
            return;
        }
        let order = self.topo_order();
        self.accumulate_grad(seed);
        for node in order.iter().rev() {
            if let Some(op) = &node.inner.op {
                let g = node.inner.grad.lock().unwrap().clone();
                if let Some(g) = g {
                    op.backward(&g);
                }
            }
        }
    }

    /// Post-order over the graph rooted at `self` (parents before children).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative DFS; (node, child_index) frames.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, idx)) = stack.pop() {
            if idx < node.inner.parents.len() {
                let child = node.inner.parents[idx].clone();
                stack.push((node, idx + 1));
                if child.inner.requires_grad && visited.insert(child.inner.id) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
