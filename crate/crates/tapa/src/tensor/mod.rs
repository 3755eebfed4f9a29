//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The computation graph is define-by-run: every operation records its
//! parents and a closure that routes the upstream gradient to them. The
//! graph is rebuilt on every forward pass; only leaf parameters persist
//! between passes.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Result, TapaError};

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::*;

type GradFn = Rc<dyn Fn(&[f64], &[Tensor])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
}

thread_local! {
    static NEXT_ID: RefCell<u64> = const { RefCell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let mut c = c.borrow_mut();
        *c += 1;
        *c
    })
}

/// A dense row-major tensor participating in an autodiff graph.
///
/// Cloning is cheap (shared handle); a tensor graph is confined to one
/// thread of control during forward/backward.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: None,
                parents: Vec::new(),
                grad_fn: None,
            })),
        }
    }

    /// Constant (non-trainable) tensor.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TapaError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::build(shape, data, false))
    }

    /// Trainable leaf parameter.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::build(vec![], vec![v], false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(shape, vec![0.0; n], false)
    }

    /// Result of an operation; requires_grad iff any parent does.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let t = Tensor::build(shape, data, requires_grad);
        if requires_grad {
            let mut n = t.inner.borrow_mut();
            n.parents = parents;
            n.grad_fn = Some(grad_fn);
        }
        t
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place (optimizer updates, gradient
    /// check perturbations). Shape must be preserved.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut n = self.inner.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data = data;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut n = self.inner.borrow_mut();
        if !n.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), n.data.len());
        match &mut n.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => n.grad = Some(g.to_vec()),
        }
    }

    /// Reverse-mode accumulation from a scalar root. Gradients of shared
    /// parameters sum contributions from every path that reaches them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TapaError::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        // Reverse post-order: every consumer is processed before its producers.
        for t in order.iter().rev() {
            let step = {
                let n = t.inner.borrow();
                match (&n.grad, &n.grad_fn) {
                    (Some(g), Some(f)) => Some((g.clone(), Rc::clone(f), n.parents.clone())),
                    _ => None,
                }
            };
            if let Some((grad, fun, parents)) = step {
                fun(&grad, &parents);
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.inner.borrow().parents.iter() {
                if p.requires_grad() {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("data", &n.data)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}
