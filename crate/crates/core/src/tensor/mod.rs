//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to an immutable row-major buffer.
//! Operations on tensors that require gradients record their inputs; calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse creation order
//! and accumulates gradients into the leaves. Gradients keep accumulating
//! across calls until [`Tensor::zero_grad`].
//!
//! Recording is skipped inside [`no_grad`] and whenever no input requires a
//! gradient, so inference does not keep intermediates alive.

mod alloc;
mod element;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod rng;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use alloc::{alloc_stats, reset_alloc_peak, AllocStats};
pub(crate) use alloc::Buffer;
pub use element::{DType, Element};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use ops::{cross_entropy_mean, embedding_lookup, Activation};
pub use rng::Rng;

use crate::{Error, Result};
use ops::Op;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Runs `f` without recording any graph.
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

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Buffer<T>>,
    grad: RefCell<Option<Buffer<T>>>,
    requires_grad: Cell<bool>,
    op: Option<Op<T>>,
}

pub struct Tensor<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(Buffer::new(data)),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op: None,
        }))
    }

    /// Output of an operation; the op is kept only if a gradient can flow.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let track = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(Buffer::new(data)),
            grad: RefCell::new(None),
            requires_grad: Cell::new(track),
            op: track.then_some(op),
        }))
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: vec![data.len()],
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A trainable leaf.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        t.0.requires_grad.set(true);
        Ok(t)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::cast(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![value; n], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)` of a rank-2 tensor; a rank-1 tensor reads as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op: "dims2",
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.0.data.borrow(), |b| &**b)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.widen()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data()[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Only leaves may change this flag; operation outputs derive it.
    pub fn set_requires_grad(&self, on: bool) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Param("requires_grad can only be set on leaf tensors".into()));
        }
        self.0.requires_grad.set(on);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().as_ref().map(|g| g.to_vec())
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().take();
    }

    /// Mutates the buffer of a leaf in place (optimizer updates, finite
    /// differences). Graph outputs already computed from it are not refreshed.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        debug_assert!(self.is_leaf());
        f(&mut self.0.data.borrow_mut());
    }

    /// Mutates the gradient buffer, if one is populated.
    pub fn update_grad(&self, f: impl FnOnce(&mut [T])) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            f(g);
        }
    }

    /// A new leaf holding a copy of the data, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    /// Same data, different element type; always a fresh non-trainable leaf.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::leaf(
            self.data().iter().map(|v| U::cast(v.widen())).collect(),
            self.0.shape.clone(),
            false,
        )
    }

    /// Back-propagates from a one-element tensor, accumulating into the
    /// `grad` of every reachable leaf that requires it.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::Disconnected);
        }

        // Inputs are always created before their outputs, so descending id
        // order is a topological order of the graph.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(op) = &t.0.op {
                for input in op.inputs() {
                    if input.requires_grad() && seen.insert(input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in &order {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(Buffer::new(g)),
                    }
                }
                Some(op) => {
                    let out = t.data();
                    op.backward(&out, &g, &mut |input: &Tensor<T>, contrib: Vec<T>| {
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(input.id(), contrib);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 || shape.contains(&0) {
        return Err(Error::Param(format!(
            "shape {shape:?} must have rank 1-3 with positive dimensions"
        )));
    }
    Ok(())
}
