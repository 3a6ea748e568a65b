//! Dense tensors with tape-free reverse-mode differentiation.
//!
//! Every op produces a new immutable [`Tensor`]. When any input requires a
//! gradient (and recording is not disabled with [`no_grad`]), the result keeps
//! handles to its inputs plus a closure that maps the output gradient to
//! input gradients. [`Tensor::backward`] walks that graph in reverse
//! topological order and accumulates into the `grad` slot of every leaf that
//! requires one.

mod container;
mod conv;
mod gradcheck;
mod norm;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use container::{read_container, read_container_bytes, write_container, write_container_bytes, Precision};
pub use conv::Conv2dSpec;
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use norm::NormKind;
pub use ops::Activation;

pub(crate) use norm::moments;

/// Backward closure: receives the output gradient and the output data, returns
/// one optional gradient per parent, in parent order.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>>>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("holds {} values", data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        Ok(Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Constant tensor (never receives a gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), false)
    }

    /// Leaf tensor that accumulates a gradient on backward.
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape.to_vec(), true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], Vec::new(), false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false).expect("valid shape")
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::leaf(data, vec![n, n], false).expect("valid shape")
    }

    /// Builds the result of an op. The backward closure is dropped when no
    /// parent requires a gradient or recording is disabled.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(Box::new(backward) as BackwardFn))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn grad_tensor(&self) -> Option<Tensor> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::leaf(g.clone(), self.0.shape.clone(), false).unwrap())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values, detached from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.data.clone(), self.0.shape.clone(), false).unwrap()
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable leaf that requires one; repeated calls add up.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(self.ptr(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.ptr()) else {
                continue;
            };
            let Some(backward) = node.0.backward.as_ref() else {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                };
                continue;
            };
            let grads = backward(&g, &node.0.data);
            debug_assert_eq!(grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                match pending.get_mut(&parent.ptr()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(parent.ptr(), pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require a gradient.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((node, next)) = stack.pop() {
            if next < node.0.parents.len() {
                let parent = node.0.parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && visited.insert(parent.ptr()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
        let t = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn backward_on_sum_of_squares() {
        let x = Tensor::variable(vec![1.0, -2.0, 3.5], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = Tensor::variable(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::variable(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.scale(2.0).backward(), Err(Error::NonScalar(_))));
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let x = Tensor::variable(vec![0.3, -1.2, 2.0, 0.7], &[4]).unwrap();
        x.softmax(0).unwrap().sum().backward().unwrap();
        for g in x.grad().unwrap().iter() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        let x = Tensor::variable(vec![3.0], &[1]).unwrap();
        let y = x.scale(2.0).add(&x.mul(&x).unwrap()).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 2.0 + 6.0);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::variable(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.requires_grad());
        assert!(x.scale(3.0).requires_grad());
    }
}
