//! Wengert tape: ops append nodes during the forward pass, `backward`
//! replays them newest-first.
//!
//! Every node's parents were recorded before it, so the append order is a
//! topological order and a single reverse sweep visits each node once.

use crate::autograd::params::ParamId;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub type NodeId = usize;

/// A value flowing through the forward pass.
///
/// `node` is `Some` when the value participates in gradient tracking.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Tensor<T>,
    node: Option<NodeId>,
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// Receives the gradient of the op's output and pushes gradients into the
/// parent slots it is asked for.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

enum NodeKind<T> {
    Input,
    Param(ParamId),
    Op {
        name: &'static str,
        backward: BackwardFn<T>,
    },
}

struct Node<T> {
    kind: NodeKind<T>,
    /// `(node, numel)` per positional parent; `None` for untracked parents.
    parents: Vec<Option<(NodeId, usize)>>,
}

/// Parent-gradient accumulators handed to a [`BackwardFn`].
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    parents: &'a [Option<(NodeId, usize)>],
}

impl<T: Element> GradSink<'_, T> {
    /// Whether positional parent `i` needs a gradient.
    pub fn wants(&self, i: usize) -> bool {
        matches!(self.parents.get(i), Some(Some(_)))
    }

    /// Zero-initialised accumulator for parent `i`, or `None` when that
    /// parent is not tracked. Kernels must add into it, never overwrite.
    pub fn slot(&mut self, i: usize) -> Option<&mut [T]> {
        let (id, n) = (*self.parents.get(i)?)?;
        let g = self.grads[id].get_or_insert_with(|| vec![T::zero(); n]);
        Some(g.as_mut_slice())
    }

    /// Add `g` into parent `i`'s accumulator.
    pub fn add(&mut self, i: usize, g: &[T]) {
        if let Some(slot) = self.slot(i) {
            for (s, v) in slot.iter_mut().zip(g) {
                *s += *v;
            }
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    inputs: Vec<(NodeId, Vec<T>)>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to a tracked input leaf, shaped like it.
    /// `None` when the loss does not depend on `v`.
    pub fn wrt(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.node?;
        let (_, g) = self.inputs.iter().find(|(n, _)| *n == id)?;
        Some(Tensor::from_parts(v.shape().to_vec(), g.clone()))
    }

    /// Parameter gradients, one entry per parameter leaf use.
    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    macs: u64,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            macs: 0,
        }
    }

    /// A tape that records nothing; ops still compute values.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by the ops recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    /// A leaf that gradients are reported for (when grad is enabled).
    pub fn input(&mut self, value: Tensor<T>) -> Var<T> {
        if !self.grad_enabled {
            return Var { value, node: None };
        }
        let id = self.push(NodeKind::Input, Vec::new());
        Var {
            value,
            node: Some(id),
        }
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value, node: None }
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, value: Tensor<T>) -> Var<T> {
        if !self.grad_enabled {
            return Var { value, node: None };
        }
        let node = self.push(NodeKind::Param(id), Vec::new());
        Var {
            value,
            node: Some(node),
        }
    }

    /// Whether an op over `parents` must record a backward closure.
    pub fn needs_grad(&self, parents: &[&Var<T>]) -> bool {
        self.grad_enabled && parents.iter().any(|p| p.node.is_some())
    }

    /// Append an op. The closure is dropped unrecorded when no parent is
    /// tracked. Parent order fixes the slot indices seen by `backward`.
    pub fn record(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&[T], &mut GradSink<'_, T>) + 'static,
    ) -> Var<T> {
        if !self.needs_grad(parents) {
            return Var { value, node: None };
        }
        let links = parents
            .iter()
            .map(|p| p.node.map(|id| (id, p.value.numel())))
            .collect();
        let id = self.push(
            NodeKind::Op {
                name,
                backward: Box::new(backward),
            },
            links,
        );
        Var {
            value,
            node: Some(id),
        }
    }

    fn push(&mut self, kind: NodeKind<T>, parents: Vec<Option<(NodeId, usize)>>) -> NodeId {
        self.nodes.push(Node { kind, parents });
        self.nodes.len() - 1
    }

    /// Names of the recorded ops in forward order (inputs and params
    /// excluded). Useful for inspecting what a forward pass did.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Op { name, .. } => Some(name),
                _ => None,
            })
            .collect()
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape is left intact, so calling this twice yields the same
    /// gradients twice.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::Autograd("loss is not connected to the tape".into()))?;

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::one()]);

        let mut out = Gradients {
            inputs: Vec::new(),
            params: Vec::new(),
        };
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.kind {
                NodeKind::Input => out.inputs.push((id, g)),
                NodeKind::Param(pid) => out.params.push((*pid, g)),
                NodeKind::Op { backward, .. } => {
                    let (head, _) = grads.split_at_mut(id);
                    let mut sink = GradSink {
                        grads: head,
                        parents: &node.parents,
                    };
                    backward(&g, &mut sink);
                }
            }
        }
        Ok(out)
    }
}
