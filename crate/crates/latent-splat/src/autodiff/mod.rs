//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records one computation graph per training step. Every op
//! appends a node holding the forward value and, when any input is tracked,
//! a closure computing input adjoints from the output adjoint.
//! [`Tape::backward`] walks the nodes once in reverse construction order
//! (construction order is a topological order by definition) and returns
//! per-leaf gradients.

mod conv;
#[cfg(test)]
mod fd_tests;
mod ops;

pub mod check;

use std::fmt;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for buffer of length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("backward was already run on this tape")]
    BackwardAlreadyRun,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Value(pub(crate) usize);

/// Inputs available to a node's backward closure.
pub struct GradCtx<'a> {
    /// Forward values of the node's inputs, in op order.
    pub inputs: Vec<&'a Tensor>,
    /// Forward value of the node itself.
    pub output: &'a Tensor,
    /// Adjoint of the node (same shape as `output`).
    pub grad: &'a Tensor,
}

type GradFn = Box<dyn Fn(&GradCtx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    grad_fn: Option<GradFn>,
    /// Gradient must be produced for this node (leaf flag or inherited).
    tracked: bool,
    /// Leaf explicitly registered with `requires_grad`.
    is_leaf_param: bool,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("value", &self.value)
            .field("inputs", &self.inputs)
            .field("tracked", &self.tracked)
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by [`Value`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, if any flowed to it.
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Append-only reverse-mode tape. One per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Register a leaf. `requires_grad` marks it as an optimizable parameter:
    /// backward will materialize a (possibly zero) gradient for it.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            grad_fn: None,
            tracked: requires_grad,
            is_leaf_param: requires_grad,
        });
        Value(self.nodes.len() - 1)
    }

    /// Untracked constant input.
    pub fn constant(&mut self, value: Tensor) -> Value {
        self.leaf(value, false)
    }

    /// Forward value of a node.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn tracked(&self, v: Value) -> bool {
        self.nodes[v.0].tracked
    }

    fn any_tracked(&self, inputs: &[Value]) -> bool {
        inputs.iter().any(|&v| self.tracked(v))
    }

    /// Append a node. `backward` may be `None` for values that need no
    /// adjoint even when consumed (e.g. constants derived from constants);
    /// the node is recorded untracked in that case.
    pub(crate) fn push(
        &mut self,
        inputs: &[Value],
        value: Tensor,
        backward: Option<GradFn>,
    ) -> Value {
        let tracked = backward.is_some() && self.any_tracked(inputs);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            grad_fn: if tracked { backward } else { None },
            tracked,
            is_leaf_param: false,
        });
        Value(self.nodes.len() - 1)
    }

    /// Record an externally computed op with a custom backward closure.
    ///
    /// `backward` receives the input values, the forward output and the
    /// output adjoint, and returns one optional gradient per input (same
    /// shapes as the inputs).
    pub fn custom_op(
        &mut self,
        inputs: &[Value],
        output: Tensor,
        backward: impl Fn(&GradCtx) -> Vec<Option<Tensor>> + 'static,
    ) -> Value {
        self.push(inputs, output, Some(Box::new(backward)))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape's ability to run
    /// again; a second call is an explicit error. Leaves registered with
    /// `requires_grad` that receive no flow get zero gradients.
    pub fn backward(&mut self, loss: Value) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardAlreadyRun);
        }
        self.consumed = true;
        let loss_t = &self.nodes[loss.0].value;
        if !loss_t.is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: loss_t.shape().to_vec(),
            });
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let (grad_fn, grad) = match (&node.grad_fn, &grads[id]) {
                (Some(f), Some(g)) => (f, g),
                _ => continue,
            };
            let grad_t = Tensor::new(node.value.shape(), grad.clone())
                .expect("gradient buffer matches node shape");
            let ctx = GradCtx {
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                grad: &grad_t,
            };
            let input_grads = grad_fn(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[*slot].tracked {
                    continue;
                }
                debug_assert_eq!(
                    ig.shape(),
                    self.nodes[*slot].value.shape(),
                    "backward produced wrong grad shape"
                );
                match &mut grads[*slot] {
                    Some(buf) => {
                        for (a, b) in buf.iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot_buf @ None => *slot_buf = Some(ig.to_vec()),
                }
            }
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(n);
        for (id, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[id];
            out.push(match g {
                Some(buf) => Some(
                    Tensor::new(node.value.shape(), buf).expect("grad shape matches value"),
                ),
                None if node.is_leaf_param => Some(Tensor::zeros(node.value.shape())),
                None => None,
            });
        }
        Ok(Gradients { grads: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_elementwise_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::BackwardAlreadyRun)
        ));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let unused = tape.leaf(Tensor::new(&[2], vec![5.0, 6.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_are_untracked() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(c, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    }
}
