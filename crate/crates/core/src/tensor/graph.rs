use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Stable identifier of a trainable parameter, assigned by its owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Real>: Send + Sync {
    /// Gradients with respect to each input given the output gradient.
    /// Entries whose `wanted` flag is false may be returned as `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;

    fn name(&self) -> &'static str;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Explicit recording context for one forward pass.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order. A graph is consumed by a single [`Graph::backward`].
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            param: None,
            needs_grad: false,
        })
    }

    /// A trainable leaf. Registering the same id twice sums both gradients.
    pub fn parameter(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            param: Some(id),
            needs_grad: true,
        })
    }

    /// Appends the result of an operation over `inputs`.
    pub fn record<B: Backward<T> + 'static>(&mut self, value: Tensor<T>, inputs: &[Var], op: B) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: needs_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
            param: None,
            needs_grad,
        })
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every parameter registered in this graph gets an entry; parameters the
    /// loss does not depend on get zeros. Constants get nothing.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::ONE));

        let mut params: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(grad) = grads[i].take() else { continue };
            if let Some(id) = node.param {
                match params.get_mut(&id) {
                    Some(acc) => acc.add_assign(&grad)?,
                    None => {
                        params.insert(id, grad);
                    }
                }
                continue;
            }
            let Some(op) = &node.op else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &wanted)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((v, g), want) in node.inputs.iter().zip(input_grads).zip(wanted) {
                let Some(g) = g else { continue };
                if !want {
                    continue;
                }
                if !g.same_shape(&self.nodes[v.0].value) {
                    return Err(Error::Dimension(format!(
                        "{} produced gradient {:?} for input {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[v.0].value.shape()
                    )));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for node in &self.nodes {
            if let Some(id) = node.param {
                params
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { params })
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds another set of gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => acc.add_assign(g)?,
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }
}
