//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. [`Tape::backward`] walks the records once in reverse and returns
//! a [`Gradients`] table; gradients for model parameters are folded into the
//! [`ParamStore`] with [`ParamStore::accumulate`], after which [`Sgd`]
//! applies the update.
//!
//! Parameters are borrowed by the tape rather than copied, so a tape must be
//! dropped before the store can be updated.

mod ops;
mod params;

use alloc::vec;
use alloc::vec::Vec;

pub use ops::OpKind;
pub(crate) use ops::Op;
pub use params::{ParamId, ParamStore, Parameter, Sgd};

use crate::error::{invalid, Result};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum NodeData<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

struct Node<T> {
    shape: Vec<usize>,
    data: NodeData<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded record of one forward pass.
pub struct Tape<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    strict: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { params: None, nodes: Vec::new(), strict: false, fault: None }
    }

    /// A tape that can read parameters from `store` without copying them.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Tape { params: Some(store), ..Self::new() }
    }

    /// In strict mode convolutions reject geometries whose output size is
    /// not an exact division.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    /// Test hook: perturbs the backward rule of one op kind so that the
    /// gradient checker can be shown to catch it.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in differentiation iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push_node(shape, NodeData::Owned(tensor.into_data()), Op::Leaf, rg)
    }

    /// Leaf that is differentiated.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad())
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("tape has no parameter store");
        let shape = store.get(id).tensor.shape().to_vec();
        self.push_node(shape, NodeData::Param(id), Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].data {
            NodeData::Owned(d) => d,
            NodeData::Param(id) => self.params.expect("param node without store").get(*id).tensor.data(),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> Option<OpKind> {
        self.nodes[v.0].op.kind()
    }

    /// Kinds of the recorded operations that take part in a reverse pass.
    pub fn differentiated_ops(&self) -> alloc::collections::BTreeSet<OpKind> {
        self.nodes.iter().filter(|n| n.requires_grad).filter_map(|n| n.op.kind()).collect()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(shape, NodeData::Owned(data), op, rg)
    }

    fn push_node(&mut self, shape: Vec<usize>, data: NodeData<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// May be called repeatedly; each call returns fresh gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(invalid!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        self.backward_seeded(loss, &[T::one()])
    }

    /// Vector-Jacobian product: reverse pass from `out` with upstream
    /// gradient `seed` (same number of elements as `out`).
    pub fn backward_seeded(&self, out: Var, seed: &[T]) -> Result<Gradients<T>> {
        let loss = out;
        let n: usize = self.nodes[loss.0].shape.iter().product();
        if seed.len() != n {
            return Err(invalid!("seed has {} values, output has {}", seed.len(), n));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(seed.to_vec());
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.data {
                NodeData::Param(id) => Some((i, id)),
                NodeData::Owned(_) => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Adds `f(grad)` into the gradient slot of `v` if it is differentiated.
    pub(crate) fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].shape.iter().product();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    pub(crate) fn faulty(&self, kind: OpKind) -> bool {
        self.fault == Some(kind)
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not influence
    /// the loss or is not differentiated.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Summed gradient of one parameter over all of its uses.
    pub fn param(&self, id: ParamId) -> Option<Vec<T>> {
        let mut acc: Option<Vec<T>> = None;
        for (pid, g) in self.param_grads() {
            if pid == id {
                match acc.as_mut() {
                    None => acc = Some(g.to_vec()),
                    Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += *y),
                }
            }
        }
        acc
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}
