//! Minimal reverse-mode autodiff engine.
//!
//! The engine covers exactly the layer set the codec needs: convolution,
//! transposed convolution, 2x2 max pooling, PReLU/ReLU, MSE loss, power
//! normalization, channel split/concat, and a couple of small ops used by the
//! gradient checker. There is no general computation-graph compiler; each op
//! eagerly computes its forward value and records its inputs so that
//! [`Tensor::backward`] can replay the chain rule in reverse.
//!
//! Tensors are immutable once created except for their gradient buffers
//! (and parameter data, which the optimizer updates through [`Parameter`]).
//! A graph is confined to one thread; parallelism happens across independent
//! evaluation trials that each build their own graphs.

mod backward;
mod gemm;
pub mod gradcheck;
pub mod ops;

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use thiserror::Error;

use crate::rng::Rng;
use ops::Op;

/// Errors produced by tensor construction and ops.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("backward: loss does not depend on any tensor with requires_grad")]
    NoGradPath,
    #[error("power_normalize: input is all zero, scale undefined")]
    AllZeroInput,
}

/// Element type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + 'static
{
    /// General matrix multiply `C = alpha * A * B + beta * C` with explicit
    /// row/column strides (delegated to `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// N-dimensional array participating in a reverse-mode differentiation graph.
///
/// Cloning a `Tensor` is cheap: it copies a reference-counted handle to the
/// same node, not the data.
pub struct Tensor<T: Scalar = f32> {
    node: Rc<RefCell<Node<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.node.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            n.shape, n.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn from_node(node: Node<T>) -> Self {
        Tensor {
            node: Rc::new(RefCell::new(node)),
        }
    }

    pub(crate) fn new_result(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor::from_node(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        })
    }

    /// Creates a leaf tensor from explicit data; `requires_grad` is off.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument {
                op: "from_vec",
                detail: format!("shape {shape:?} has an empty or zero dimension"),
            });
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor::from_node(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        }))
    }

    /// All-zero leaf tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); numel]).expect("zeros shape is valid")
    }

    /// Constant-filled leaf tensor.
    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("filled shape is valid")
    }

    /// Single-element leaf tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar shape is valid")
    }

    /// Leaf tensor with i.i.d. Gaussian entries of the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel).map(|_| T::cast(rng.normal() * std)).collect();
        Tensor::from_vec(shape, data).expect("randn shape is valid")
    }

    /// Marks a leaf tensor as differentiable (builder style).
    ///
    /// Only leaves can change this flag; results derive it from their inputs.
    pub fn with_requires_grad(self, flag: bool) -> Self {
        {
            let mut n = self.node.borrow_mut();
            debug_assert!(matches!(n.op, Op::Leaf), "requires_grad is set on leaves");
            n.requires_grad = flag;
        }
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    /// Copies the tensor's values out.
    pub fn to_vec(&self) -> Vec<T> {
        self.node.borrow().data.clone()
    }

    /// Borrows the underlying values without copying.
    pub(crate) fn data_ref(&self) -> Ref<'_, [T]> {
        Ref::map(self.node.borrow(), |n| n.data.as_slice())
    }

    /// The value of a single-element tensor.
    ///
    /// Panics if the tensor has more than one element.
    pub fn item(&self) -> T {
        let n = self.node.borrow();
        assert_eq!(n.data.len(), 1, "item() requires a single-element tensor");
        n.data[0]
    }

    /// Copies the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.borrow().grad.clone()
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// A new leaf with copied data, detached from the graph.
    pub fn detach(&self) -> Tensor<T> {
        let n = self.node.borrow();
        Tensor::from_vec(&n.shape, n.data.clone()).expect("detach preserves shape")
    }

    /// A detached copy with values clamped to `[lo, hi]`.
    pub fn clamped(&self, lo: T, hi: T) -> Tensor<T> {
        let n = self.node.borrow();
        let data: Vec<T> = n
            .data
            .iter()
            .map(|&v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        Tensor::from_vec(&n.shape, data).expect("clamped preserves shape")
    }

    /// Runs reverse-mode accumulation from a scalar loss.
    ///
    /// Gradients add up across calls until cleared, and only tensors with
    /// `requires_grad` receive them.
    pub fn backward(&self) -> Result<(), TensorError> {
        backward::run_backward(self)
    }

    pub(crate) fn borrow_node(&self) -> Ref<'_, Node<T>> {
        self.node.borrow()
    }

    pub(crate) fn borrow_node_mut(&self) -> RefMut<'_, Node<T>> {
        self.node.borrow_mut()
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    /// Replaces the data of a leaf tensor (same length), used by the optimizer.
    pub(crate) fn replace_data(&self, f: impl FnOnce(&mut [T])) {
        let mut n = self.node.borrow_mut();
        debug_assert!(matches!(n.op, Op::Leaf), "only leaf data may be replaced");
        f(&mut n.data);
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut n = self.node.borrow_mut();
        debug_assert!(n.requires_grad);
        debug_assert_eq!(n.data.len(), delta.len());
        let grad = n.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }
}

/// Named trainable tensor belonging to a parameter group.
///
/// The dotted name identifies the group, e.g. `sm_encoder.conv0.weight`.
/// When `trainable` is off the tensor never accumulates gradient and an
/// optimizer step leaves its data bit-identical.
pub struct Parameter {
    name: String,
    tensor: Tensor<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor<f32>, trainable: bool) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.with_requires_grad(trainable),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.tensor.borrow_node_mut().requires_grad = flag;
        if !flag {
            self.tensor.zero_grad();
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn data(&self) -> Vec<f32> {
        self.tensor.to_vec()
    }

    /// Overwrites the parameter values (copy semantics, length-checked).
    pub fn set_data(&mut self, data: &[f32]) {
        assert_eq!(data.len(), self.numel(), "parameter data length mismatch");
        self.tensor.replace_data(|dst| dst.copy_from_slice(data));
    }

    /// In-place update of the parameter values, used by the optimizer.
    pub(crate) fn update_data(&mut self, f: impl FnOnce(&mut [f32])) {
        self.tensor.replace_data(f);
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }

    /// Deep copy with fresh storage; the copy does not alias this parameter.
    pub fn deep_clone(&self) -> Parameter {
        let t = self.tensor.detach();
        Parameter::new(self.name.clone(), t, self.trainable())
    }

    /// Renames the parameter (used when cloning groups).
    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }
}

impl fmt::Debug for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Parameter({}, shape={:?}, trainable={})",
            self.name,
            self.shape(),
            self.trainable()
        )
    }
}
