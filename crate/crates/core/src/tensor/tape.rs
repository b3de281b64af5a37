use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::Result;

/// Nodes reachable from a loss, in topological order.
///
/// Node ids are handed out monotonically at creation and an operation's
/// inputs always exist before its output, so ascending id order is a valid
/// topological order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Collects every gradient-tracking node reachable from `root`.
    pub fn record(root: &Tensor<T>) -> Self {
        let mut nodes = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.node().op {
                op.for_each_input(|i| stack.push(i.clone()));
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.id());
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids in topological (forward) order.
    pub fn ids(&self) -> Vec<u64> {
        self.nodes.iter().map(|t| t.id()).collect()
    }

    /// Replays the recorded rules from the last node back to the leaves,
    /// seeding the root with gradient one. Each node is visited once.
    pub fn backward(self) -> Result<()> {
        let Some(root) = self.nodes.last().cloned() else {
            return Ok(());
        };
        let mut sink = GradSink::new(&self.nodes);
        if let Some(buf) = sink.buf(&root) {
            buf.iter_mut().for_each(|v| *v = T::one());
        }
        for (slot, t) in self.nodes.iter().enumerate().rev() {
            let Some(g) = sink.take(slot) else { continue };
            match &t.node().op {
                Some(op) => op.backward(t, &g, &mut sink),
                None => {
                    if let Some(acc) = t.node().grad.borrow_mut().as_mut() {
                        acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-node gradient buffers during one backward pass.
pub(crate) struct GradSink<T: Scalar> {
    slots: HashMap<u64, usize>,
    sizes: Vec<usize>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradSink<T> {
    fn new(nodes: &[Tensor<T>]) -> Self {
        GradSink {
            slots: nodes.iter().enumerate().map(|(i, t)| (t.id(), i)).collect(),
            sizes: nodes.iter().map(|t| t.numel()).collect(),
            grads: nodes.iter().map(|_| None).collect(),
        }
    }

    /// Gradient accumulator for `t`, or `None` when `t` is not tracked.
    pub(crate) fn buf(&mut self, t: &Tensor<T>) -> Option<&mut [T]> {
        let &slot = self.slots.get(&t.id())?;
        let size = self.sizes[slot];
        Some(self.grads[slot].get_or_insert_with(|| vec![T::zero(); size]))
    }

    fn take(&mut self, slot: usize) -> Option<Vec<T>> {
        self.grads[slot].take()
    }
}

impl<T: Scalar> super::ops::Op<T> {
    pub(crate) fn for_each_input(&self, mut f: impl FnMut(&Tensor<T>)) {
        use super::ops::Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => {
                f(a);
                f(b);
            }
            BatchMatMul { a, b, .. } => {
                f(a);
                f(b);
            }
            Scale(a, _) | Reshape(a) | Softmax(a) | Gelu(a) | Sum(a) | Mean(a) => f(a),
            Permute { input, .. } | Slice { input, .. } | BroadcastTo { input, .. } => f(input),
            Concat { inputs, .. } => inputs.iter().for_each(f),
            GatedSoftmax { input, gate, .. } => {
                f(input);
                f(gate);
            }
            LayerNorm {
                input, gamma, beta, ..
            } => {
                f(input);
                f(gamma);
                f(beta);
            }
            CrossEntropy { logits, .. } => f(logits),
        }
    }
}
