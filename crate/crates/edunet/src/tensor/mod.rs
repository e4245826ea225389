//! Reverse-mode automatic differentiation over dense N-d arrays.
//!
//! Tensors are immutable once created. Every op that sees a
//! `requires_grad` input records its inputs and a backward rule; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into every node.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod pool;
mod resize;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{concat_channels, ActKind};
pub use pool::PoolKind;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: maps the output cotangent to one gradient buffer per parent.
type BackFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>>>;

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackFn<T>>,
    consumed: Cell<bool>,
}

/// A dense N-d array participating in the autodiff graph.
///
/// Cloning is cheap (reference-counted handle). Not `Send`: one graph
/// belongs to one thread.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// A leaf tensor. `requires_grad` marks it as a differentiation target.
    pub fn leaf(data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("leaf"));
        }
        Ok(Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                consumed: Cell::new(false),
            }),
        })
    }

    pub fn constant(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![v], &[1], false).expect("scalar leaf")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![T::zero(); n], shape, false).expect("zeros leaf")
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![v; n], shape, false).expect("full leaf")
    }

    /// Internal constructor for op outputs. Drops the graph linkage when no
    /// parent requires gradients.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: &[usize],
        parents: Vec<Tensor<T>>,
        backward: BackFn<T>,
        op_name: &'static str,
    ) -> Result<Self> {
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
                consumed: Cell::new(false),
            }),
        })
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient, if `backward` has run through this node.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.node.data[0]
    }

    /// Detach from the graph: same data, fresh leaf, no gradient tracking.
    pub fn detach(&self) -> Self {
        Self::constant(self.node.data.clone(), &self.node.shape).expect("detach")
    }

    /// N,C,H,W accessors for 4-d tensors.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            s => Err(Error::Shape(format!("expected 4-d tensor, got {s:?}"))),
        }
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node in
    /// the recorded graph (leaves and intermediates alike), then marks the
    /// graph consumed; a second backward through the same graph is an error.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.node.consumed.get() {
            return Err(Error::Backward("graph already consumed by backward".into()));
        }

        // Iterative post-order DFS for a topological order.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id(), ());
        while let Some((t, child_idx)) = stack.pop() {
            if child_idx < t.node.parents.len() {
                let p = t.node.parents[child_idx].clone();
                stack.push((t, child_idx + 1));
                if p.requires_grad() && !seen.contains_key(&p.id()) {
                    seen.insert(p.id(), ());
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        *self.node.grad.borrow_mut() = Some(vec![T::one()]);
        for t in order.iter().rev() {
            let Some(back) = t.node.backward.as_ref() else {
                continue;
            };
            let gout = match t.node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                // Not reached from the loss; nothing to propagate.
                None => continue,
            };
            let contribs = back(&gout);
            debug_assert_eq!(contribs.len(), t.node.parents.len());
            for (p, c) in t.node.parents.iter().zip(contribs) {
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(c.len(), p.numel());
                let mut slot = p.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(g) => {
                        for (gi, ci) in g.iter_mut().zip(&c) {
                            *gi += *ci;
                        }
                    }
                    None => *slot = Some(c),
                }
            }
            t.node.consumed.set(true);
        }
        self.node.consumed.set(true);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_rejects_shape_mismatch() {
        assert!(Tensor::leaf(vec![1.0f32, 2.0], &[3], false).is_err());
    }

    #[test]
    fn leaf_rejects_non_finite() {
        assert!(Tensor::leaf(vec![f32::NAN], &[1], false).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let x = Tensor::leaf(vec![1.0f64, 2.0, 3.0, 4.0], &[4], true).unwrap();
        let s = x.sum_all().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_half_square_gives_x() {
        let x = Tensor::leaf(vec![1.0f64, -2.0, 3.0], &[3], true).unwrap();
        let loss = x.mul(&x).unwrap().sum_all().unwrap().affine(0.5, 0.0).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::leaf(vec![1.0f64, 2.0], &[2], true).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn double_backward_is_an_error() {
        let x = Tensor::leaf(vec![1.0f64], &[1], true).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = x*x + x => grad = 2x + 1
        let x = Tensor::leaf(vec![3.0f64], &[1], true).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }
}
