//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records one evaluation as a DAG of op nodes; [`Tape::backward`]
//! replays it in reverse and accumulates vector-Jacobian products. Tensors not
//! attached to a tape behave as constants: ops accept any mix of tracked and
//! untracked arguments, and gradients flow only into tracked ones.

mod attn;
mod check;
mod conv;
mod elem;
mod reduce;
mod structural;

pub use attn::attention;
pub use check::finite_diff_check;
pub use conv::{conv2d_strided, conv3d, conv4d, ConvKernel4d};
pub use elem::add_n;
pub use reduce::{batched_matmul, batched_matmul_tb, matmul, softmax_last};
pub use structural::{concat, window_merge, window_partition};

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

/// Dense tensor extents, outermost axis first. Every axis is at least 1.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Shape> {
        if dims.is_empty() {
            return Err(Error::shape("shape needs at least one axis"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-length axis in {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Shape {
        Shape(vec![1])
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, axis: usize) -> Result<usize> {
        self.0
            .get(axis)
            .copied()
            .ok_or_else(|| Error::shape(format!("axis {axis} out of range for rank {}", self.rank())))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

pub(crate) type NodeId = usize;

/// Gradient accumulation target handed to op backward implementations.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
}

impl<'a> GradSink<'a> {
    /// Runs `f` over the (zero-initialized on first touch) gradient buffer of
    /// `parent`; no-op for constants.
    pub fn accumulate(&mut self, parent: Option<NodeId>, f: impl FnOnce(&mut [f64])) {
        if let Some(id) = parent {
            let buf = self.grads[id].get_or_insert_with(|| vec![0.0; self.sizes[id]]);
            f(buf);
        }
    }
}

/// One recorded operation: parents plus enough saved state to run its VJP.
pub(crate) trait OpNode {
    fn backward(&self, grad_out: &[f64], sink: &mut GradSink);
    fn is_leaf(&self) -> bool {
        false
    }
}

pub(crate) struct Leaf;

impl OpNode for Leaf {
    fn backward(&self, _grad_out: &[f64], _sink: &mut GradSink) {}
    fn is_leaf(&self) -> bool {
        true
    }
}

struct NodeEntry {
    op: Box<dyn OpNode>,
    len: usize,
}

struct TapeInner {
    nodes: Vec<NodeEntry>,
}

/// Records one forward evaluation for reverse-mode differentiation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, op: Box<dyn OpNode>, len: usize) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(NodeEntry { op, len });
        inner.nodes.len() - 1
    }

    /// Registers `t`'s values as a tracked leaf on this tape.
    pub fn leaf(&self, t: &DiffTensor) -> DiffTensor {
        let id = self.push(Box::new(Leaf), t.vals.len());
        DiffTensor {
            vals: t.vals.clone(),
            shape: t.shape.clone(),
            node: Some((self.clone(), id)),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Reverse pass from a tracked scalar. Returns the gradients of every
    /// leaf the loss depends on. Repeated calls over the same tape produce
    /// bitwise-identical results.
    pub fn backward(&self, loss: &DiffTensor) -> Result<Gradients> {
        let (tape, root) = loss
            .node
            .as_ref()
            .ok_or_else(|| Error::contract("backward target is not tracked on any tape"))?;
        if !self.same_tape(tape) {
            return Err(Error::contract("backward target belongs to a different tape"));
        }
        if loss.shape.numel() != 1 {
            return Err(Error::shape(format!(
                "backward target must be scalar, got shape {}",
                loss.shape
            )));
        }
        if !loss.vals[0].is_finite() {
            return Err(Error::numeric("backward target is not finite"));
        }
        let inner = self.inner.borrow();
        let sizes: Vec<usize> = inner.nodes.iter().map(|n| n.len).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[*root] = Some(vec![1.0]);
        let mut retained: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        for id in (0..=*root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let entry = &inner.nodes[id];
            if entry.op.is_leaf() {
                retained.insert(id, g);
            } else {
                let (before, _) = grads.split_at_mut(id);
                let mut sink = GradSink {
                    grads: before,
                    sizes: &sizes[..id],
                };
                entry.op.backward(&g, &mut sink);
            }
        }
        Ok(Gradients { tape: self.clone(), by_node: retained })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Leaf gradients from one backward pass, keyed by tape node.
pub struct Gradients {
    tape: Tape,
    by_node: BTreeMap<NodeId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `leaf`, or None when no gradient
    /// flowed to it. Errors when `leaf` is untracked or from another tape.
    pub fn get(&self, leaf: &DiffTensor) -> Result<Option<&[f64]>> {
        let (tape, id) = leaf
            .node
            .as_ref()
            .ok_or_else(|| Error::contract("gradient lookup on an untracked tensor"))?;
        if !self.tape.same_tape(tape) {
            return Err(Error::contract("gradient lookup across tapes"));
        }
        Ok(self.by_node.get(id).map(|v| v.as_slice()))
    }
}

/// Dense f64 tensor, optionally attached to a tape node.
#[derive(Clone)]
pub struct DiffTensor {
    pub(crate) vals: Arc<Vec<f64>>,
    pub(crate) shape: Shape,
    pub(crate) node: Option<(Tape, NodeId)>,
}

impl fmt::Debug for DiffTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffTensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl DiffTensor {
    pub fn from_vec(vals: Vec<f64>, dims: &[usize]) -> Result<DiffTensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != vals.len() {
            return Err(Error::shape(format!(
                "value count {} does not match shape {shape}",
                vals.len()
            )));
        }
        Ok(DiffTensor { vals: Arc::new(vals), shape, node: None })
    }

    pub fn zeros(dims: &[usize]) -> Result<DiffTensor> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(DiffTensor { vals: Arc::new(vec![0.0; n]), shape, node: None })
    }

    pub fn scalar(v: f64) -> DiffTensor {
        DiffTensor {
            vals: Arc::new(vec![v]),
            shape: Shape::scalar(),
            node: None,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar payload of a 1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape.numel() != 1 {
            return Err(Error::shape(format!("item() on shape {}", self.shape)));
        }
        Ok(self.vals[0])
    }

    /// Same values, no tape attachment.
    pub fn detach(&self) -> DiffTensor {
        DiffTensor {
            vals: self.vals.clone(),
            shape: self.shape.clone(),
            node: None,
        }
    }

    pub(crate) fn tracked(vals: Vec<f64>, shape: Shape, node: Option<(Tape, NodeId)>) -> DiffTensor {
        DiffTensor { vals: Arc::new(vals), shape, node }
    }

    pub(crate) fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|(_, id)| *id)
    }
}

/// Resolves the single tape shared by the tracked tensors among `args`.
/// Mixing tapes is a contract error; all-constant arguments give None.
pub(crate) fn common_tape(args: &[&DiffTensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for a in args {
        if let Some((tape, _)) = &a.node {
            match &found {
                None => found = Some(tape.clone()),
                Some(t) if t.same_tape(tape) => {}
                Some(_) => return Err(Error::contract("operands belong to different tapes")),
            }
        }
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_empty_and_zero() {
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[3, 0]).is_err());
        assert_eq!(Shape::new(&[2, 3]).unwrap().numel(), 6);
    }

    #[test]
    fn leaf_roundtrip_and_backward_of_identity() {
        let tape = Tape::new();
        let x = tape.leaf(&DiffTensor::from_vec(vec![2.0], &[1]).unwrap());
        let grads = tape.backward(&x).unwrap();
        assert_eq!(grads.get(&x).unwrap().unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_nonscalar() {
        let tape = Tape::new();
        let x = tape.leaf(&DiffTensor::from_vec(vec![1.0, 2.0], &[2]).unwrap());
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn mixed_tapes_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(&DiffTensor::scalar(1.0));
        let b = t2.leaf(&DiffTensor::scalar(2.0));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn backward_twice_is_identical() {
        let tape = Tape::new();
        let x = tape.leaf(&DiffTensor::from_vec(vec![0.3, -1.2, 2.5], &[3]).unwrap());
        let y = x.mul(&x).unwrap();
        let s = y.sum().unwrap();
        let g1 = tape.backward(&s).unwrap();
        let g2 = tape.backward(&s).unwrap();
        let a: Vec<f64> = g1.get(&x).unwrap().unwrap().to_vec();
        let b: Vec<f64> = g2.get(&x).unwrap().unwrap().to_vec();
        assert_eq!(a, b);
    }
}
