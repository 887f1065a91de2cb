use super::{conv, dense, elementwise, norm, pool, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation together with whatever the backward pass needs.
#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    Pad2d {
        input: Var,
        padding: usize,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    ToTokens {
        input: Var,
    },
    FromTokens {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Softmax {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input (train) or `(x - mean) * inv_std` (eval).
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    Select {
        input: Var,
        index: usize,
    },
    L1Loss {
        pred: Var,
        target: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d {
                input, weight, bias, ..
            }
            | Linear {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Bmm { a, b, .. } | Add { a, b } | Sub { a, b } => vec![*a, *b],
            L1Loss { pred, target } => vec![*pred, *target],
            Concat { inputs } => inputs.clone(),
            MaxPool2d { input, .. }
            | AvgPool2d { input, .. }
            | Pad2d { input, .. }
            | GlobalAvgPool { input }
            | ToTokens { input }
            | FromTokens { input }
            | Reshape { input }
            | Relu { input }
            | Scale { input, .. }
            | Softmax { input }
            | Sum { input }
            | Mean { input }
            | WeightedSum { input, .. }
            | Select { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in execution order, so every operation's inputs have
/// smaller indices than the operation itself and a reverse sweep is a valid
/// topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradient buffers indexed by node, lazily zero-initialized.
pub(crate) struct GradBuffers<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    needs: &'a [bool],
    sizes: &'a [usize],
}

impl<T: Scalar> GradBuffers<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn get(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.needs[v.0] {
            return None;
        }
        let size = self.sizes[v.0];
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); size]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// backward computes a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = true;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient computed by the last [`Tape::backward`] call, if `v`
    /// requires one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Populates `grad` on every leaf
    /// recorded with `requires_grad`; gradients of repeated uses of a leaf
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.dims().to_vec()));
        }
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.numel()).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if needs[loss.0] {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            let Some(out_grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let mut buffers = GradBuffers {
                grads: &mut grads,
                needs: &needs,
                sizes: &sizes,
            };
            self.backward_node(node, &out_grad, &mut buffers);
            grads[i] = Some(out_grad);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = match (&node.op, node.value.requires_grad) {
                (Op::Leaf, true) => Some(grad.unwrap_or_else(|| vec![T::zero(); node.value.numel()])),
                _ => None,
            };
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], bufs: &mut GradBuffers<'_, T>) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => conv::conv2d_backward(
                val(*input),
                val(*weight),
                (*input, *weight, *bias),
                *stride,
                *padding,
                node.value.dims(),
                g,
                bufs,
            ),
            Op::MaxPool2d { input, argmax } => pool::maxpool_backward(*input, argmax, g, bufs),
            Op::AvgPool2d {
                input,
                kernel,
                stride,
            } => pool::avgpool_backward(val(*input).dims(), *input, *kernel, *stride, node.value.dims(), g, bufs),
            Op::Pad2d { input, padding } => pool::pad_backward(val(*input).dims(), *input, *padding, g, bufs),
            Op::GlobalAvgPool { input } => pool::global_avg_backward(val(*input).dims(), *input, g, bufs),
            Op::Linear {
                input,
                weight,
                bias,
            } => dense::linear_backward(val(*input), val(*weight), (*input, *weight, *bias), g, bufs),
            Op::Bmm { a, b, transpose_b } => {
                dense::bmm_backward(val(*a), val(*b), *a, *b, *transpose_b, g, bufs)
            }
            Op::ToTokens { input } => dense::to_tokens_backward(val(*input).dims(), *input, g, bufs),
            Op::FromTokens { input } => dense::from_tokens_backward(val(*input).dims(), *input, g, bufs),
            Op::Reshape { input } => elementwise::passthrough_backward(*input, g, bufs),
            Op::Concat { inputs } => {
                let dims: Vec<&[usize]> = inputs.iter().map(|v| val(*v).dims()).collect();
                dense::concat_backward(inputs, &dims, g, bufs)
            }
            Op::Relu { input } => elementwise::relu_backward(val(*input), *input, g, bufs),
            Op::Add { a, b } => elementwise::add_backward(*a, *b, T::one(), g, bufs),
            Op::Sub { a, b } => elementwise::add_backward(*a, *b, -T::one(), g, bufs),
            Op::Scale { input, factor } => elementwise::scale_backward(*input, *factor, g, bufs),
            Op::Softmax { input } => elementwise::softmax_backward(&node.value, *input, g, bufs),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => norm::batchnorm_backward(
                val(*input).dims(),
                val(*gamma),
                (*input, *gamma, *beta),
                xhat,
                inv_std,
                *train,
                g,
                bufs,
            ),
            Op::Sum { input } => elementwise::fill_backward(*input, g[0], g, bufs),
            Op::Mean { input } => {
                let n = T::from_usize(val(*input).numel()).unwrap();
                elementwise::fill_backward(*input, g[0] / n, g, bufs)
            }
            Op::WeightedSum { input, weights } => elementwise::weighted_sum_backward(*input, weights, g[0], bufs),
            Op::Select { input, index } => {
                if let Some(dx) = bufs.get(*input) {
                    dx[*index] += g[0];
                }
            }
            Op::L1Loss { pred, target } => {
                elementwise::l1_backward(val(*pred), val(*target), *pred, *target, g[0], bufs)
            }
        }
    }
}
