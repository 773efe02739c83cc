//! Tape-based reverse-mode automatic differentiation over flat n-d arrays.
//!
//! Every value in the engine is a [`Tensor`]: a shape plus a flat data
//! buffer, optionally carrying a gradient buffer of the same length.
//! Operations record their parents and a backward closure on the output
//! node, so the computation graph doubles as the tape; [`Tensor::backward`]
//! topologically sorts the graph from the loss and visits each recorded
//! node exactly once.
//!
//! Training and evaluation run in `f32`. Gradient checking instantiates the
//! same ops in `f64` (see [`gradcheck`]), which is the only supported use of
//! the 64-bit mode.
//!
//! Gradient accumulation is additive: callers must zero parameter gradients
//! between optimizer steps.

mod gradcheck;
mod kernels;
mod ops;

pub use gradcheck::grad_check;
pub use kernels::{mm_nn, mm_nt, mm_tn};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::rc::Rc;

/// Scalar element type of the engine: `f32` for training/eval, `f64` for
/// gradient checks.
pub trait Elem:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn cos(self) -> Self;
    fn sin(self) -> Self;
    fn is_finite(self) -> bool;

    fn maximum(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }

    /// Logistic function, computed without overflow for large |x|.
    fn sigmoid(self) -> Self {
        if self >= Self::ZERO {
            Self::ONE / (Self::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::ONE + e)
        }
    }
}

macro_rules! impl_elem {
    ($t:ty) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn cos(self) -> Self {
                self.cos()
            }
            fn sin(self) -> Self {
                self.sin()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_elem!(f32);
impl_elem!(f64);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with graph recording disabled on this thread.
///
/// Inference paths (generation, cached-tap extraction, evaluation) wrap
/// themselves in `no_grad` so forward ops skip node construction entirely.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

type BackwardFn<E> = Box<dyn Fn(&Inner<E>)>;

pub(crate) struct Recorded<E: Elem> {
    pub(crate) parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

pub(crate) struct Inner<E: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: Cell<bool>,
    pub(crate) node: Option<Recorded<E>>,
}

/// A shaped numeric value. Cloning is cheap (shared buffer).
pub struct Tensor<E: Elem = f32> {
    inner: Rc<Inner<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                node: None,
            }),
        }
    }

    /// A leaf tensor tracked for gradients (a trainable parameter).
    pub fn param(shape: Vec<usize>, data: Vec<E>) -> Self {
        let t = Self::new(shape, data);
        t.inner.requires_grad.set(true);
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![E::ZERO; n])
    }

    pub fn scalar(v: E) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| E::from_f64(x)).collect())
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let t = Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.clone(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(record),
                node: record.then_some(Recorded { parents, backward }),
            }),
        };
        debug_assert_eq!(
            t.inner.shape.iter().product::<usize>(),
            t.inner.data.borrow().len()
        );
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Number of rows when viewed as a 2-d array (all leading dims folded).
    pub fn rows(&self) -> usize {
        let s = &self.inner.shape;
        if s.is_empty() {
            1
        } else {
            s[..s.len() - 1].iter().product()
        }
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.inner.shape.last().unwrap_or(&1)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Marks a leaf as frozen; subsequent ops no longer track it.
    pub fn set_requires_grad(&self, on: bool) {
        assert!(
            self.inner.node.is_none(),
            "requires_grad can only be toggled on leaf tensors"
        );
        self.inner.requires_grad.set(on);
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Extracts the single element of a scalar tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// A gradient-free copy of this tensor's current value.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::new(self.inner.shape.clone(), self.to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` ancestor; accumulation across calls is additive.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar loss");
        assert!(
            self.item().is_finite(),
            "backward() called on a non-finite loss: {}",
            self.item()
        );
        // Topological order by iterative DFS; creation ids are unique.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((t, child_idx)) = stack.pop() {
            let n_parents = t.inner.node.as_ref().map_or(0, |n| n.parents.len());
            if child_idx < n_parents {
                stack.push((t.clone(), child_idx + 1));
                let parent = t.inner.node.as_ref().unwrap().parents[child_idx].clone();
                if parent.inner.node.is_some() && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        self.accumulate_grad(&[E::ONE]);
        for t in order.iter().rev() {
            if let Some(node) = t.inner.node.as_ref() {
                (node.backward)(&t.inner);
            }
        }
    }
}

impl<E: Elem> Inner<E> {
    pub(crate) fn out_grad(&self) -> Vec<E> {
        self.grad
            .borrow()
            .clone()
            .expect("backward visited a node before its gradient was set")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_construction_and_accessors() {
        let t: Tensor<f32> = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
        assert!(t.all_finite());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_data_mismatch_panics() {
        let _: Tensor<f32> = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn product_rule_gradient() {
        // d(x*y)/dx at x=3, y=5 is 5.
        let x: Tensor<f64> = Tensor::param(vec![1], vec![3.0]);
        let y: Tensor<f64> = Tensor::param(vec![1], vec![5.0]);
        let z = x.mul(&y);
        z.backward();
        assert_eq!(x.grad().unwrap()[0], 5.0);
        assert_eq!(y.grad().unwrap()[0], 3.0);
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // z = x*x: both uses of x contribute, dz/dx = 2x.
        let x: Tensor<f64> = Tensor::param(vec![1], vec![3.0]);
        let z = x.mul(&x);
        z.backward();
        assert_eq!(x.grad().unwrap()[0], 6.0);
    }

    #[test]
    fn gradient_accumulates_across_backward_calls() {
        let x: Tensor<f64> = Tensor::param(vec![1], vec![2.0]);
        let z1 = x.mul(&x);
        z1.backward();
        let z2 = x.mul(&x);
        z2.backward();
        assert_eq!(x.grad().unwrap()[0], 8.0);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x: Tensor<f32> = Tensor::param(vec![1], vec![2.0]);
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
        assert!(y.inner.node.is_none());
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let x: Tensor<f32> = Tensor::param(vec![2], vec![1.0, 2.0]);
        let y = x.mul(&x);
        y.backward();
    }
}
