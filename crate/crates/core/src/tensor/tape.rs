use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::Op;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// Index of a parameter inside a model's parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    /// Accumulated gradient; only populated for leaves.
    pub(crate) grad: Option<Tensor>,
}

/// Explicit record of one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted and a reverse sweep visits each entry once.
pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a model parameter. Repeated calls with the same id return the
    /// same leaf, so weight-shared towers accumulate into one gradient.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&index) = self.params.get(&id) {
            return Var { tape: self.id, index };
        }
        let var = self.leaf(value.clone());
        self.params.insert(id, var.index);
        var
    }

    pub fn value(&self, var: Var) -> &Tensor {
        debug_assert_eq!(var.tape, self.id, "var from another tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.index).and_then(|n| n.grad.as_ref())
    }

    /// Gradients of every parameter registered through [`Tape::param`].
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &idx)| self.nodes[idx].grad.as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {} does not belong to this tape",
                var.index
            )));
        }
        Ok(var.index)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Records a computed node; it requires grad iff any input does.
    pub(crate) fn record(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Back-propagates from a scalar `loss`, adding dLoss/dLeaf into every
    /// differentiable leaf. Calling it again without [`Tape::zero_grads`]
    /// accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(shape_err!(
                "backward() needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            ));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::Tape(
                "loss is detached: no differentiable leaf contributes to it".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            node.op.backward(&self.nodes, &node.value, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

/// Adds `g` into the gradient slot of node `i` if it is differentiable.
pub(crate) fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
    if !nodes[i].requires_grad {
        return;
    }
    match &mut grads[i] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Like [`accumulate`] but lets the caller add in place without allocating.
pub(crate) fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    i: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    let len = nodes[i].value.numel();
    Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
}
