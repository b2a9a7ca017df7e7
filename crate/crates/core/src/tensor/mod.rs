//! Dense row-major `f64` tensors with a dynamic reverse-mode tape.
//!
//! Every op that sees an input requiring gradients records a node holding its
//! inputs and a backward rule. Tensor ids are drawn from a monotonically
//! increasing per-thread counter, so the id order is the recording order and
//! [`Tensor::backward`] replays nodes in exactly the reverse of that order.

mod linalg;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use ops::Unary;

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

/// Runs `f` with tape recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule: `(grad_output, output_data, needs_grad) -> per-input grads`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Reference-counted handle to an immutable value (parameters excepted) plus
/// its accumulated gradient.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[cfg(debug_assertions)]
fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(not(debug_assertions))]
#[inline(always)]
fn check_finite(_op: &'static str, _data: &[f64]) -> Result<()> {
    Ok(())
}

fn validate_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(crate::error::invalid(
            op,
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    if numel(shape) != len {
        return Err(crate::error::invalid(
            op,
            format!("shape {shape:?} needs {} elements, got {len}", numel(shape)),
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        validate_shape("new", shape, data.len())?;
        check_finite("new", &data)?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        validate_shape("param", shape, data.len())?;
        check_finite("param", &data)?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Records the output of an op. The node is kept only when grad mode is on
    /// and some input requires gradients.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: bad output size");
        check_finite(op, &data)?;
        let requires_grad = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Ok(Self::build(shape, data, requires_grad, node))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the op that produced this tensor, `None` for leaves.
    pub fn op(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the value, detached from the tape.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Overwrites the value of a leaf tensor in place (optimizer updates,
    /// checkpoint loading, test fixtures).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if !self.is_leaf() {
            return Err(crate::error::invalid(
                "set_data",
                "only leaf tensors can be mutated",
            ));
        }
        if data.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: self.0.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    /// Applies `f` to the buffer of a leaf tensor in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.is_leaf(), "update_data on a non-leaf tensor");
        f(&mut self.0.data.borrow_mut());
    }

    /// Reverse-mode sweep from a scalar. Gradients of reachable leaves that
    /// require grad are accumulated into their `grad` buffer; intermediate
    /// gradients are released as soon as their node has been processed. The
    /// tape is not consumed, so repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.0.shape.clone()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.is_leaf() {
            accumulate(&self.0.grad, &[1.0]);
            return Ok(());
        }

        let mut visited = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || t.is_leaf() || !visited.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.0.node {
                stack.extend(node.inputs.iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in nodes {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            let node = t.0.node.as_ref().expect("non-leaf without node");
            let needs: Vec<bool> = node.inputs.iter().map(Tensor::requires_grad).collect();
            let grads = {
                let out = t.0.data.borrow();
                (node.backward)(&g, &out, &needs)
            };
            debug_assert_eq!(grads.len(), node.inputs.len(), "{}: grad arity", node.op);
            for (input, gi) in node.inputs.iter().zip(grads) {
                let Some(gi) = gi else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(gi.len(), input.numel(), "{}: grad size", node.op);
                if input.is_leaf() {
                    accumulate(&input.0.grad, &gi);
                } else {
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(input.id(), gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &RefCell<Option<Vec<f64>>>, g: &[f64]) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
