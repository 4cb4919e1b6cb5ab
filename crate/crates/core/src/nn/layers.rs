//! Layer vocabulary of the network: stateless descriptions that point at
//! parameters in a [`ParamStore`] and record their forward rule on a tape.
//!
//! Shapes handled by [`Layer::output_shape`] are per sample (no batch axis);
//! forward passes operate on batched tensors `[N, ...]`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// New value for a non-trainable parameter, produced by a train-mode pass.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
    /// The statistic of this batch alone.
    pub batch: Tensor<T>,
}

/// State of one forward pass: the tape being recorded, parameter leaves
/// bound so far, and side effects to apply afterwards.
pub struct Forward<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<&'a mut Rng>,
    updates: Vec<StatUpdate<T>>,
}

/// Output of [`Forward::finish`].
pub struct Bound<T> {
    /// Trainable parameters that took part in the pass, with their leaves.
    pub params: Vec<(ParamId, Var)>,
    pub updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Element> Forward<'a, T> {
    pub fn train(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, rng: &'a mut Rng) -> Self {
        Self::new(tape, params, Mode::Train, Some(rng))
    }

    pub fn infer(tape: &'a mut Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self::new(tape, params, Mode::Infer, None)
    }

    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, mode: Mode, rng: Option<&'a mut Rng>) -> Self {
        Forward {
            tape,
            params,
            bound: vec![None; params.len()],
            mode,
            rng,
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses `var` as the leaf for parameter `id` instead of a fresh copy.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn finish(self) -> Bound<T> {
        let params = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let id = ParamId(i);
                match v {
                    Some(v) if self.params.get(id).trainable => Some((id, *v)),
                    _ => None,
                }
            })
            .collect();
        Bound {
            params,
            updates: self.updates,
        }
    }
}

/// Applies `x · W + b` along the last axis at every leading position.
pub fn dense<T: Element>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let fin = shape[shape.len() - 1];
    let ws = tape.shape(weight).to_vec();
    if ws.len() != 2 || ws[0] != fin {
        return Err(Error::shape("dense", format!("weight {ws:?} for input features {fin}")));
    }
    let rows = shape.iter().product::<usize>() / fin;
    let flat = tape.reshape(x, &[rows, fin])?;
    let y = tape.matmul(flat, weight)?;
    let y = tape.add_bias(y, bias)?;
    let mut out = shape;
    *out.last_mut().unwrap() = ws[1];
    tape.reshape(y, &out)
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 − rate)`.
pub fn dropout<T: Element>(tape: &mut Tape<T>, x: Var, rate: f64, mode: Mode, rng: Option<&mut Rng>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("dropout rate", format!("{rate} not in [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let rng = rng.ok_or_else(|| Error::config("dropout", "train mode needs a random stream"))?;
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = tape.shape(x).to_vec();
    let mask: Vec<T> = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Square,
    Abs,
    /// `ln(|x| + eps)`.
    LogAbs {
        eps: f64,
    },
}

impl Activation {
    pub fn apply<T: Element>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Square => tape.square(x),
            Activation::Abs => tape.abs(x),
            Activation::LogAbs { eps } => tape.log_abs_eps(x, T::of(eps)),
        }
    }

    /// Scalar evaluation, used for symmetry checks.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Square => x * x,
            Activation::Abs => x.abs(),
            Activation::LogAbs { eps } => (x.abs() + eps).ln(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub padding: Padding,
}

#[derive(Clone, Debug)]
pub struct SeparableConv2d {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub padding: Padding,
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub features: usize,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub moving_mean: ParamId,
    pub moving_var: ParamId,
    pub features: usize,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct AvgPool2d {
    pub pool: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fin: usize,
    pub fout: usize,
    pub activation: Option<Activation>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2d),
    SeparableConv2d(SeparableConv2d),
    LayerNorm(LayerNorm),
    BatchNorm(BatchNorm),
    Activation(Activation),
    AvgPool2d(AvgPool2d),
    Dropout { rate: f64 },
    Dense(Dense),
    Flatten,
}

fn last(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

impl Layer {
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Layer::Conv2d(c) => vec![c.kernel],
            Layer::SeparableConv2d(s) => vec![s.depthwise, s.pointwise],
            Layer::LayerNorm(l) => vec![l.gamma, l.beta],
            Layer::BatchNorm(b) => vec![b.gamma, b.beta, b.moving_mean, b.moving_var],
            Layer::Dense(d) => vec![d.weight, d.bias],
            _ => Vec::new(),
        }
    }

    /// Per-sample output shape, validated without any numeric work.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |op: &'static str, kh: usize, kw: usize, cin: usize, cout: usize, p: Padding| {
            let &[h, w, c] = input else {
                return Err(Error::shape(op, format!("expected (ch, t, C), got {input:?}")));
            };
            if c != cin {
                return Err(Error::shape(op, format!("expects {cin} features, got {c}")));
            }
            match (p.output_len(h, kh), p.output_len(w, kw)) {
                (Some(oh), Some(ow)) => Ok(vec![oh, ow, cout]),
                _ => Err(Error::shape(
                    op,
                    format!("kernel ({kh},{kw}) does not fit input ({h},{w})"),
                )),
            }
        };
        match self {
            Layer::Conv2d(c) => spatial("conv2d", c.kh, c.kw, c.cin, c.cout, c.padding),
            Layer::SeparableConv2d(s) => spatial("separable_conv2d", s.kh, s.kw, s.cin, s.cout, s.padding),
            Layer::LayerNorm(l) if last(input) != l.features => Err(Error::shape(
                "layer_norm",
                format!("{} features, input {input:?}", l.features),
            )),
            Layer::BatchNorm(b) if last(input) != b.features => Err(Error::shape(
                "batch_norm",
                format!("{} features, input {input:?}", b.features),
            )),
            Layer::AvgPool2d(p) => {
                let &[h, w, c] = input else {
                    return Err(Error::shape("avg_pool2d", format!("input {input:?}")));
                };
                let (ph, pw) = p.pool;
                let (sh, sw) = p.stride;
                if ph > h || pw > w || ph == 0 || pw == 0 || sh == 0 || sw == 0 {
                    return Err(Error::shape(
                        "avg_pool2d",
                        format!("pool {:?} stride {:?} on ({h},{w})", p.pool, p.stride),
                    ));
                }
                Ok(vec![(h - ph) / sh + 1, (w - pw) / sw + 1, c])
            }
            Layer::Dense(d) => {
                if last(input) != d.fin {
                    return Err(Error::shape(
                        "dense",
                        format!("expects {} features, input {input:?}", d.fin),
                    ));
                }
                let mut out = input.to_vec();
                *out.last_mut().unwrap() = d.fout;
                Ok(out)
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            _ => Ok(input.to_vec()),
        }
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            Layer::Conv2d(c) => {
                let k = f.param(c.kernel);
                f.tape.conv2d(x, k, c.padding)
            }
            Layer::SeparableConv2d(s) => {
                let d = f.param(s.depthwise);
                let p = f.param(s.pointwise);
                f.tape.separable_conv2d(x, d, p, s.padding)
            }
            Layer::LayerNorm(l) => {
                let (g, b) = (f.param(l.gamma), f.param(l.beta));
                f.tape.layer_norm(x, g, b, T::of(l.eps))
            }
            Layer::BatchNorm(bn) => bn.forward(f, x),
            Layer::Activation(a) => Ok(a.apply(f.tape, x)),
            Layer::AvgPool2d(p) => f.tape.avg_pool2d(x, p.pool, p.stride),
            Layer::Dropout { rate } => {
                let mode = f.mode;
                dropout(f.tape, x, *rate, mode, f.rng.as_deref_mut())
            }
            Layer::Dense(d) => {
                let (w, b) = (f.param(d.weight), f.param(d.bias));
                let y = dense(f.tape, x, w, b)?;
                Ok(match d.activation {
                    Some(a) => a.apply(f.tape, y),
                    None => y,
                })
            }
            Layer::Flatten => {
                let shape = f.tape.shape(x).to_vec();
                let n = shape[0];
                let rest = shape[1..].iter().product();
                f.tape.reshape(x, &[n, rest])
            }
        }
    }
}

impl BatchNorm {
    fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        let eps = T::of(self.eps);
        match f.mode {
            Mode::Train => {
                let n = f.tape.shape(x)[0];
                if n < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("train mode needs a batch of at least 2, got {n}"),
                    ));
                }
                let (y, mean, var) = f.tape.batch_norm_train(x, g, b, eps)?;
                let m = T::of(self.momentum);
                let blend = |id: ParamId, batch: &[T]| {
                    let old = f.params.value(id);
                    let data = old
                        .data()
                        .iter()
                        .zip(batch)
                        .map(|(&o, &s)| m * o + (T::one() - m) * s)
                        .collect();
                    StatUpdate {
                        id,
                        value: Tensor::from_parts(old.shape().to_vec(), data),
                        batch: Tensor::from_parts(old.shape().to_vec(), batch.to_vec()),
                    }
                };
                let updates = [blend(self.moving_mean, &mean), blend(self.moving_var, &var)];
                f.updates.extend(updates);
                Ok(y)
            }
            Mode::Infer => {
                let mean = f.params.value(self.moving_mean).data().to_vec();
                let var = f.params.value(self.moving_var).data().to_vec();
                f.tape.batch_norm_infer(x, g, b, &mean, &var, eps)
            }
        }
    }
}
