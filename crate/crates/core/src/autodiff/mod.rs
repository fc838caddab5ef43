//! Tape-based (define-by-run) reverse-mode automatic differentiation.
//!
//! Every forward operation appends a node holding its output value, its input
//! handles and, when any input requires a gradient, a backward closure with
//! whatever activations it saved. Inputs always precede outputs on the tape,
//! so reverse append order is a valid topological order and each node is
//! visited exactly once per [`Tape::backward`] call.
//!
//! Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grad`]; nodes built only from leaves with `requires_grad ==
//! false` carry no backward closure and never receive a gradient.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod sample;
mod shape;

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

pub use norm::BatchStats;
pub use sample::{bilinear_point, BilinearTaps};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients per input (`None` where the input does not need one).
pub(crate) type InputGrads = Vec<Option<Vec<f64>>>;

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> InputGrads;
}

impl<F> Backward for F
where
    F: Fn(&[&Tensor], &Tensor, &[f64], &[bool]) -> InputGrads,
{
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> InputGrads {
        self(inputs, output, grad, needs)
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<Box<dyn Backward>>,
    /// Accumulated gradient; only leaves keep one between passes.
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push<B: Backward + 'static>(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        backward: B,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: inputs.to_vec(),
            backward: requires_grad.then(|| Box::new(backward) as Box<dyn Backward>),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    ///
    /// Calling this twice without [`Tape::zero_grad`] adds the second pass
    /// onto the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                // Leaf: keep the gradient.
                let slot = &mut self.nodes[idx].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    None => *slot = Some(grad),
                }
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let in_grads = backward.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(in_grads.len(), node.inputs.len());
            for ((input, g), need) in node.inputs.iter().zip(in_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input.0].value.numel());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
