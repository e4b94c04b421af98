use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Option<NodeId>>,
}

/// Record of differentiable operations, replayed in reverse by [`Tape::backward`].
///
/// A tape is single-threaded and single-use: `backward` consumes the recorded
/// graph. Build a fresh tape for every forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    branches: Option<Cell<u64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            branches: None,
        }
    }

    /// A tape that never records: every value behaves as a constant.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            branches: None,
        }
    }

    /// A no-grad tape that fingerprints which side of its kink every
    /// non-smooth op (relu, abs, clamp, select) lands on.
    pub fn traced() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            branches: Some(Cell::new(FNV_OFFSET)),
        }
    }

    /// Hash of all branch decisions so far; `None` unless built by [`Tape::traced`].
    /// Two forward passes with equal signatures ran on the same smooth piece.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(Cell::get)
    }

    pub(crate) fn note_branches<I: Iterator<Item = u8>>(&self, states: impl FnOnce() -> I) {
        if let Some(cell) = &self.branches {
            // FNV-1a, with a separator so op boundaries count
            let mut h = cell.get();
            for b in states().chain(std::iter::once(0xff)) {
                h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
            }
            cell.set(h);
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Trainable leaf. On a no-grad tape this is the same as [`Tape::constant`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.param_rc(Rc::new(value))
    }

    pub fn param_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        let id = self.recording.then(|| self.push(Op::Leaf, Vec::new()));
        Var {
            tape: self,
            id,
            value,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: Vec<Option<NodeId>>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs });
        nodes.len() - 1
    }

    /// Wrap a freshly computed value, recording `op` only when some input is tracked.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[&Var<'t>],
        op: impl FnOnce() -> Op,
    ) -> Var<'t> {
        self.record_rc(Rc::new(value), inputs, op)
    }

    pub(crate) fn record_rc<'t>(
        &'t self,
        value: Rc<Tensor>,
        inputs: &[&Var<'t>],
        op: impl FnOnce() -> Op,
    ) -> Var<'t> {
        debug_assert!(
            inputs.iter().all(|v| std::ptr::eq(v.tape, self)),
            "vars from different tapes"
        );
        let tracked = self.recording && inputs.iter().any(|v| v.id.is_some());
        let id = tracked.then(|| self.push(op(), inputs.iter().map(|v| v.id).collect()));
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Reverse sweep from a scalar `loss`. Consumes the recorded graph.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.value.shape()),
            ));
        }
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.value.shape().to_vec(), 1.0));

        let mut nodes = nodes;
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let need: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = node.op.backward(&grad_out, &need);
            for (slot, g) in node.inputs.iter().zip(input_grads) {
                let (Some(slot), Some(g)) = (slot, g) else {
                    continue;
                };
                match &mut grads[*slot] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                    empty => *empty = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the loss with respect to every tracked leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for constants and for leaves the loss does not depend on.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.id.and_then(|id| self.grads.get(id)?.as_ref())
    }

    /// Gradient for `var`, or zeros of its shape when it has none.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value.shape().to_vec()))
    }
}

/// A value on a [`Tape`]; tracked when it depends on a trainable leaf.
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: Option<NodeId>,
    pub(crate) value: Rc<Tensor>,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_rc(self.value_rc())
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}
