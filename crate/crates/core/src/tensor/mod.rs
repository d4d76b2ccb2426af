//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional graph node. Operations
//! on tensors compute the forward value eagerly and, when any operand is
//! tracked, record a node holding the operand tensors and whatever the
//! backward pass needs. [`Tensor::backward`] walks the recorded graph in
//! reverse creation order and returns per-leaf gradients.
//!
//! Values are f32 for training and f64 for finite-difference verification;
//! every kernel is generic over [`Elem`]. Graph construction and backward are
//! single-threaded; kernels may parallelize internally only over disjoint
//! output ranges with fixed reduction order, so results are bitwise identical
//! to sequential execution.

mod adam;
mod gradcheck;
mod graph;
mod kernels;
mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradcheck, GradcheckReport, ParamCheck};
pub use graph::Gradients;

pub(crate) use graph::{next_node_id, GradFn, Node};

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::rc::Rc;
use std::sync::Arc;

/// Scalar element type: f32 (training) or f64 (verification).
pub trait Elem:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn floor(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn is_nan(self) -> bool;
    /// Name recorded in checkpoint headers.
    fn dtype_name() -> &'static str;
}

macro_rules! impl_elem {
    ($t:ty, $name:literal) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn floor(self) -> Self {
                self.floor()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn minimum(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn is_nan(self) -> bool {
                <$t>::is_nan(self)
            }
            fn dtype_name() -> &'static str {
                $name
            }
        }
    };
}

impl_elem!(f32, "f32");
impl_elem!(f64, "f64");

/// Dense row-major tensor. Cloning is cheap (shared storage); values are
/// immutable after creation.
#[derive(Clone)]
pub struct Tensor<T: Elem> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    pub(crate) node: Option<Rc<Node<T>>>,
}

impl<T: Elem> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Elem> Tensor<T> {
    /// Untracked tensor from raw data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, numel_of(shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    /// Tracked leaf: participates in backward and receives a gradient.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let mut t = Tensor::from_vec(shape, data)?;
        t.node = Some(Rc::new(Node {
            id: next_node_id(),
            grad_fn: GradFn::Leaf,
        }));
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::ZERO; numel_of(shape)]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel_of(shape)]),
            node: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Whether this tensor is connected to the autodiff graph.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Detached copy: same storage, no graph node.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, grad_fn: GradFn<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: Some(Rc::new(Node {
                id: next_node_id(),
                grad_fn,
            })),
        }
    }

    pub(crate) fn untracked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    /// Cast between element types (drops the graph).
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor::untracked(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn param_requires_grad_constant_does_not() {
        let p = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(p.requires_grad());
        assert!(!c.requires_grad());
        assert!(!p.detach().requires_grad());
    }

    #[test]
    fn scalar_shape_is_empty() {
        let s = Tensor::<f64>::scalar(3.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }
}
