use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::ops::{self, Op};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

pub(crate) struct TapeState {
    pub(crate) nodes: Vec<Node>,
    consumed: bool,
    /// Rolling hash of the branch taken by every non-smooth primitive.
    nonsmooth: u64,
}

/// Record of one forward pass. Cheap to clone (shared handle); confined to
/// the thread that created it.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeState>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let st = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &st.nodes.len())
            .field("consumed", &st.consumed)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeState {
                nodes: Vec::new(),
                consumed: false,
                nonsmooth: 0xcbf2_9ce4_8422_2325,
            })),
        }
    }

    /// Pushes a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    /// Fingerprint of the branches chosen by non-smooth primitives (the sign
    /// pattern inside `l1_loss`). Two forward passes with equal signatures
    /// evaluate the same smooth piece of the function.
    pub fn nonsmooth_signature(&self) -> u64 {
        self.inner.borrow().nonsmooth
    }

    pub(crate) fn push(&self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.zero_grad();
        let mut st = self.inner.borrow_mut();
        st.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.clone(),
            id: st.nodes.len() - 1,
        }
    }

    pub(crate) fn mix_nonsmooth(&self, signs: impl Iterator<Item = i8>) {
        let mut st = self.inner.borrow_mut();
        let mut h = st.nonsmooth;
        for s in signs {
            h ^= (s as u8) as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        st.nonsmooth = h;
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.tape.inner.borrow(), |st| &st.nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut t = self.value().clone();
        t.zero_grad();
        t.set_requires_grad(false);
        t
    }

    pub fn item(&self) -> Option<f64> {
        self.value().item()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    /// Gradient stored on this node by the last backward pass (leaves only).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value().grad().map(<[f64]>::to_vec)
    }

    pub(crate) fn check_same_tape(&self, other: &Var) -> Result<()> {
        if !self.tape.same(&other.tape) {
            return Err(Error::ShapeMismatch(
                "operands live on different tapes".into(),
            ));
        }
        Ok(())
    }

    /// Reverse sweep from this scalar. Every leaf with `requires_grad`
    /// reachable from the loss receives its gradient; the tape is consumed.
    pub fn backward(&self) -> Result<()> {
        let mut st = self.tape.inner.borrow_mut();
        if st.consumed {
            return Err(Error::NoTape);
        }
        let shape = st.nodes[self.id].value.shape().to_vec();
        if st.nodes[self.id].value.numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        let n = self.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[self.id] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &st.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            ops::backward_node(&node.op, &node.value, &g, &st.nodes, &mut |parent, contrib| {
                if !st.nodes[parent].needs_grad {
                    return;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        for (i, g) in leaf_grads {
            st.nodes[i].value.accumulate_grad(&g)?;
        }
        for node in st.nodes.iter_mut() {
            node.op = Op::Leaf;
        }
        st.consumed = true;
        Ok(())
    }
}
