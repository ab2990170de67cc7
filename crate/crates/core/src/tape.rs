//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the rule needed to push gradients back to its inputs. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and `backward` is a single reverse sweep over it.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar>: Send + Sync {
    /// Returns one gradient buffer per input, or `None` where `needs[i]` is
    /// false. Each returned buffer has the length of the matching input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        })
    }

    fn push_node(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Appends the result of an operation over `inputs`.
    pub fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: impl Backward<T> + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let inputs = inputs.iter().map(|v| self.check(*v)).collect();
        self.push_node(Node {
            value,
            inputs,
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
            requires_grad,
        })
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable used with a foreign graph");
        v.index
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v)].requires_grad
    }

    /// Propagates d(root)/d(node) to every node reachable from `root`.
    ///
    /// Contributions are accumulated in reverse tape order, so repeated runs
    /// over the same graph produce bit-identical gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if root.graph != self.id || root.index >= self.nodes.len() {
            return Err(Error::DetachedRoot);
        }
        let root_value = &self.nodes[root.index].value;
        if !root_value.is_scalar() {
            return Err(Error::NotScalarRoot(root_value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(vec![T::one()]);

        for index in (0..=root.index).rev() {
            let node = &self.nodes[index];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[index].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let contributions = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (&input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(contribution.len(), self.nodes[input].value.len());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += *c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[index] = Some(grad);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new_unchecked(node.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { graph: self.id, grads })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        assert_eq!(v.graph, self.graph, "variable from a foreign graph");
        self.grads[v.index].as_ref()
    }

    /// Gradient of `v`, materializing zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
