//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever
//! the backward rule needs. Nodes only reference earlier nodes, so the tape
//! is topologically ordered by construction and `backward` is a single
//! reverse sweep.

mod conv;
mod elementwise;
pub mod gradcheck;
mod norm;

pub use conv::{ConvGeom, Padding, PoolGeom};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    AddBias(Var, Var),
    Square(Var),
    Abs(Var),
    LogAbsEps(Var, T),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    MatMul(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Transpose {
        input: Var,
        perm: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Some leaf (not constant) is upstream.
    needs_grad: bool,
}

/// Recorded computation graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records an input that never needs a gradient, such as a data batch.
    /// Backward skips work that only feeds constants.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn is_leaf(&self, var: Var) -> bool {
        matches!(self.nodes[var.0].op, Op::Leaf)
    }

    /// Hash of the sign of every input to `abs` and `log_abs_eps`; equal
    /// signatures mean no evaluation crossed one of their kinks.
    pub fn kink_signature(&self) -> u64 {
        let mut h = 0u64;
        for node in &self.nodes {
            if let Op::Abs(a) | Op::LogAbsEps(a, _) = node.op {
                for &x in self.nodes[a.0].value.data() {
                    let s = if x > T::zero() {
                        1
                    } else if x < T::zero() {
                        2
                    } else {
                        3
                    };
                    h = crate::rng::mix(h ^ s);
                }
            }
        }
        h
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            op => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `output` with respect to every leaf.
    ///
    /// The tape is not consumed; repeated calls give identical results.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Tensor::full(out.shape().to_vec(), T::one())?);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) || !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            for (input, contribution) in self.local_grads(node, &grad) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, grad)| match node.op {
                Op::Leaf => Some(grad.unwrap_or_else(|| node.value.zeros_like())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn local_grads(&self, node: &Node<T>, grad: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Sub(a, b) => vec![(*a, grad.clone()), (*b, grad.map(|g| -g))],
            Op::Mul(a, b) => vec![
                (*a, grad.zip_map(val(*b), |g, y| g * y)),
                (*b, grad.zip_map(val(*a), |g, x| g * x)),
            ],
            Op::ScalarMul(a, s) => vec![(*a, grad.map(|g| g * *s))],
            Op::AddBias(x, b) => {
                let features = val(*b).len();
                let mut gb = vec![T::zero(); features];
                for row in grad.data().chunks_exact(features) {
                    for (acc, &g) in gb.iter_mut().zip(row) {
                        *acc = *acc + g;
                    }
                }
                vec![
                    (*x, grad.clone()),
                    (*b, Tensor::from_parts(val(*b).shape().to_vec(), gb)),
                ]
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                vec![(*a, grad.zip_map(val(*a), |g, x| g * two * x))]
            }
            Op::Abs(a) => vec![(*a, grad.zip_map(val(*a), |g, x| g * sign(x)))],
            Op::LogAbsEps(a, eps) => {
                let eps = *eps;
                vec![(*a, grad.zip_map(val(*a), |g, x| g * sign(x) / (x.abs() + eps)))]
            }
            Op::Exp(a) => vec![(*a, grad.zip_map(&node.value, |g, y| g * y))],
            Op::Log(a) => vec![(*a, grad.zip_map(val(*a), |g, x| g / x))],
            Op::Sum(a) => {
                let g = grad.item();
                vec![(*a, val(*a).map(|_| g))]
            }
            Op::Mean(a) => {
                let x = val(*a);
                let g = grad.item() / T::of(x.len() as f64);
                vec![(*a, x.map(|_| g))]
            }
            Op::Variance(a) => {
                let x = val(*a);
                let n = T::of(x.len() as f64);
                let mean = x.data().iter().copied().sum::<T>() / n;
                let scale = grad.item() * T::of(2.0) / n;
                vec![(*a, x.map(|v| scale * (v - mean)))]
            }
            Op::MatMul(a, b) => elementwise::matmul_backward(val(*a), val(*b), grad)
                .into_iter()
                .zip([*a, *b])
                .map(|(g, v)| (v, g))
                .collect(),
            Op::Concat { inputs, axis } => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| val(*v).shape()).collect();
                elementwise::concat_backward(grad, &shapes, *axis)
                    .into_iter()
                    .zip(inputs.iter().copied())
                    .map(|(g, v)| (v, g))
                    .collect()
            }
            Op::Reshape(a) => vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), grad.data().to_vec()))],
            Op::Transpose { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*input, elementwise::permute(grad, &inverse))]
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let need_input = self.nodes[input.0].needs_grad;
                let (gx, gk) = conv::conv2d_backward(geom, cols, val(*kernel), grad, need_input);
                let mut out = vec![(*kernel, gk)];
                out.extend(gx.map(|gx| (*input, gx)));
                out
            }
            Op::Depthwise { input, kernel, geom } => {
                let (gx, gk) = conv::depthwise_backward(geom, val(*input), val(*kernel), grad);
                vec![(*input, gx), (*kernel, gk)]
            }
            Op::AvgPool { input, geom } => vec![(*input, conv::avg_pool_backward(geom, grad))],
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (gx, gg, gb) = norm::layer_norm_backward(val(*gamma), normalized, inv_std, grad);
                vec![(*input, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (gx, gg, gb) = norm::batch_norm_backward(val(*gamma), normalized, inv_std, *batch_stats, grad);
                vec![(*input, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Softmax(a) => vec![(*a, elementwise::softmax_backward(&node.value, grad))],
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let shape = val(*logits).shape().to_vec();
                let classes = shape[shape.len() - 1];
                let rows = labels.len();
                let scale = grad.item() / T::of(rows as f64);
                let mut g = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    g[row * classes + label] = g[row * classes + label] - T::one();
                }
                g.iter_mut().for_each(|v| *v = *v * scale);
                vec![(*logits, Tensor::from_parts(shape, g))]
            }
        }
    }
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::ScalarMul(a, _)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::LogAbsEps(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Variance(a)
            | Op::Reshape(a)
            | Op::Softmax(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Transpose { input, .. } | Op::AvgPool { input, .. } => vec![*input],
            Op::Conv2d { input, kernel, .. } | Op::Depthwise { input, kernel, .. } => {
                vec![*input, *kernel]
            }
            Op::LayerNorm { input, gamma, beta, .. } | Op::BatchNorm { input, gamma, beta, .. } => {
                vec![*input, *gamma, *beta]
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// sign with sign(0) = 0.
fn sign<T: Element>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf; `None` for constants and intermediate nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_get_no_gradient_and_change_nothing_else() {
        let x = Tensor::from_f64(
            vec![1, 3, 4, 1],
            &(0..12).map(|i| i as f64 * 0.3 - 1.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let k = Tensor::from_f64(vec![2, 2, 1, 2], &[0.5, -1.0, 0.25, 2.0, 1.5, -0.5, 0.75, 1.0]).unwrap();
        let run = |constant: bool| {
            let mut tape = Tape::<f64>::new();
            let xv = if constant {
                tape.constant(x.clone())
            } else {
                tape.leaf(x.clone())
            };
            let kv = tape.leaf(k.clone());
            let y = tape.conv2d(xv, kv, Padding::Same).unwrap();
            let y = tape.square(y);
            let s = tape.sum(y);
            let g = tape.backward(s).unwrap();
            (g.get(xv).cloned(), g.get(kv).unwrap().clone())
        };
        let (gx_leaf, gk_leaf) = run(false);
        let (gx_const, gk_const) = run(true);
        assert!(gx_leaf.is_some());
        assert!(gx_const.is_none());
        assert_eq!(gk_leaf, gk_const);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn abs_gradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.abs(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);

        // One-sided differences at ±1e-3 straddle the kink: slopes are -1 and +1,
        // and the chosen subgradient 0 is their midpoint.
        let h = 1e-3_f64;
        let right = ((0.0 + h).abs() - 0.0_f64.abs()) / h;
        let left = (0.0_f64.abs() - (0.0 - h).abs()) / h;
        assert_eq!((right, left), (1.0, -1.0));
        assert_eq!(grads.get(x).unwrap().item(), 0.5 * (right + left));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]).unwrap());
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let unused = tape.leaf(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let y = tape.sum(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = x*x + x  → f'(x) = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn backward_replay_is_identical() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![3], &[0.3, -1.2, 2.0]).unwrap());
        let a = tape.abs(x);
        let l = tape.log_abs_eps(a, 1e-7);
        let s = tape.square(l);
        let y = tape.mean(s);
        let g1 = tape.backward(y).unwrap();
        let g2 = tape.backward(y).unwrap();
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
    }
}
