use super::{Real, Shape4, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of a recorded operation.
pub trait Operation<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input. Entries whose `needs` flag is false
    /// may be `None`; returned tensors must match the input shapes.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;

    /// Reports the discrete choices the forward pass made (activation
    /// regions, pooling winners, interpolation cells). Piecewise-smooth
    /// operations override this so gradient checks can tell when a probe
    /// crossed a kink.
    fn branches(&self, _inputs: &[&Tensor<T>], _emit: &mut dyn FnMut(u64)) {}
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Operation<T>>>,
    requires_grad: bool,
}

/// Dynamic tape. Operations are appended in execution order, so every
/// node's inputs precede it and backward is a single reverse sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Hash of every recorded operation's discrete choices. Two graphs with
    /// the same topology and signature lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{DefaultHasher, Hasher};
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                op.branches(&inputs, &mut |v| h.write_u64(v));
            }
        }
        h.finish()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Appends an operation output. It requires a gradient iff any input does.
    pub fn record(&mut self, op: impl Operation<T> + 'static, inputs: &[Var], value: Tensor<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: Some(Box::new(op)),
            requires_grad,
        })
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    /// Gradient of the last backward pass; zeros for tensors that did not
    /// reach the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(v)),
        }
    }

    pub fn take_grad(&mut self, v: Var) -> Tensor<T> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(self.shape(v)),
        }
    }

    /// Reverse sweep from a 1x1x1x1 loss. Fan-out gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != Shape4::scalar() {
            return Err(Error::NonScalarLoss(shape.to_string()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                if needs.iter().any(|&b| b) {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                    for ((v, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                        let (true, Some(g)) = (*need, g) else {
                            continue;
                        };
                        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "{}", op.name());
                        match &mut self.grads[v.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            self.grads[i] = Some(grad);
        }
        Ok(())
    }
}
