//! Catalog of finite-difference gradient checks covering every tape
//! primitive, every layer kind and the assembled network, all at f64.

use rand::Rng as _;

use crate::autodiff::gradcheck::{check, CheckOptions, CheckReport};
use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{AbsoluteNet, ModelConfig};
use crate::nn::{
    Activation, AvgPool2d, BatchNorm, Conv2d, Dense, Forward, Layer, LayerNorm, Mode, ParamStore, SeparableConv2d,
};
use crate::rng::{derived, seeded, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Primitive,
    Layer,
    Model,
}

impl CaseKind {
    pub fn name(self) -> &'static str {
        match self {
            CaseKind::Primitive => "primitive",
            CaseKind::Layer => "layer",
            CaseKind::Model => "model",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Case {
    pub name: &'static str,
    pub kind: CaseKind,
}

const fn case(name: &'static str, kind: CaseKind) -> Case {
    Case { name, kind }
}

pub const CASES: &[Case] = &[
    case("add", CaseKind::Primitive),
    case("sub", CaseKind::Primitive),
    case("mul", CaseKind::Primitive),
    case("scalar_mul", CaseKind::Primitive),
    case("add_bias", CaseKind::Primitive),
    case("square", CaseKind::Primitive),
    case("abs", CaseKind::Primitive),
    case("log_abs", CaseKind::Primitive),
    case("exp", CaseKind::Primitive),
    case("log", CaseKind::Primitive),
    case("sum", CaseKind::Primitive),
    case("mean", CaseKind::Primitive),
    case("variance", CaseKind::Primitive),
    case("matmul", CaseKind::Primitive),
    case("concat", CaseKind::Primitive),
    case("reshape", CaseKind::Primitive),
    case("transpose", CaseKind::Primitive),
    case("softmax", CaseKind::Primitive),
    case("softmax_cross_entropy", CaseKind::Primitive),
    case("conv2d_valid", CaseKind::Primitive),
    case("conv2d_same", CaseKind::Primitive),
    case("depthwise_conv2d", CaseKind::Primitive),
    case("separable_conv2d", CaseKind::Primitive),
    case("avg_pool2d", CaseKind::Primitive),
    case("layer_norm", CaseKind::Primitive),
    case("batch_norm_train", CaseKind::Primitive),
    case("batch_norm_infer", CaseKind::Primitive),
    case("conv2d_layer", CaseKind::Layer),
    case("separable_conv2d_layer", CaseKind::Layer),
    case("layer_norm_layer", CaseKind::Layer),
    case("batch_norm_layer", CaseKind::Layer),
    case("avg_pool2d_layer", CaseKind::Layer),
    case("dropout_layer", CaseKind::Layer),
    case("dense_abs_layer", CaseKind::Layer),
    case("flatten_dense_layer", CaseKind::Layer),
    case("absolutenet", CaseKind::Model),
];

/// Uniform magnitudes in [0.05, 1] with random sign, so no coordinate sits
/// near the |x| kink.
fn signed(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    signed(shape, rng).map(|v| v.abs() + 0.5)
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Parameters of a single layer, checked together with its input.
struct LayerFixture {
    store: ParamStore<f64>,
    layer: Layer,
    mode: Mode,
}

impl LayerFixture {
    fn inputs(&self, x: Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut v = vec![x];
        for id in self.layer.params() {
            if self.store.get(id).trainable {
                v.push(self.store.value(id).clone());
            }
        }
        v
    }

    fn into_build(self) -> Build {
        Box::new(move |tape, vars| {
            let mut rng = seeded(11);
            let mut f = Forward::new(tape, &self.store, self.mode, Some(&mut rng));
            let trainable = self
                .layer
                .params()
                .into_iter()
                .filter(|&id| self.store.get(id).trainable);
            for (id, &v) in trainable.zip(&vars[1..]) {
                f.bind(id, v);
            }
            self.layer.forward(&mut f, vars[0])
        })
    }
}

fn fixture(mode: Mode, make: impl FnOnce(&mut ParamStore<f64>, &mut Rng) -> Layer, rng: &mut Rng) -> LayerFixture {
    let mut store = ParamStore::new();
    let layer = make(&mut store, rng);
    LayerFixture { store, layer, mode }
}

fn setup(name: &str, rng: &mut Rng) -> Result<(Vec<Tensor<f64>>, Build, Option<usize>)> {
    let r = rng;
    let vec4 = |r: &mut Rng| signed(&[2, 3, 4], r);
    let default_cap = Some(64);
    let (inputs, build): (Vec<Tensor<f64>>, Build) = match name {
        "add" => (vec![vec4(r), vec4(r)], Box::new(|t, v| t.add(v[0], v[1]))),
        "sub" => (vec![vec4(r), vec4(r)], Box::new(|t, v| t.sub(v[0], v[1]))),
        "mul" => (vec![vec4(r), vec4(r)], Box::new(|t, v| t.mul(v[0], v[1]))),
        "scalar_mul" => (vec![vec4(r)], Box::new(|t, v| Ok(t.scalar_mul(v[0], -1.7)))),
        "add_bias" => (vec![vec4(r), signed(&[4], r)], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        "square" => (vec![vec4(r)], Box::new(|t, v| Ok(t.square(v[0])))),
        "abs" => (vec![vec4(r)], Box::new(|t, v| Ok(t.abs(v[0])))),
        "log_abs" => (vec![vec4(r)], Box::new(|t, v| Ok(t.log_abs_eps(v[0], 1e-7)))),
        "exp" => (vec![vec4(r)], Box::new(|t, v| Ok(t.exp(v[0])))),
        "log" => (vec![positive(&[2, 3, 4], r)], Box::new(|t, v| Ok(t.log(v[0])))),
        "sum" => (vec![vec4(r)], Box::new(|t, v| Ok(t.sum(v[0])))),
        "mean" => (vec![vec4(r)], Box::new(|t, v| Ok(t.mean(v[0])))),
        "variance" => (vec![vec4(r)], Box::new(|t, v| Ok(t.variance(v[0])))),
        "matmul" => (
            vec![signed(&[3, 5], r), signed(&[5, 4], r)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        "concat" => (
            vec![signed(&[2, 3, 2], r), signed(&[2, 3, 5], r)],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 2)),
        ),
        "reshape" => (
            vec![vec4(r)],
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[6, 4])?;
                // A reshape alone has an identity Jacobian; square to mix in values.
                Ok(t.square(y))
            }),
        ),
        "transpose" => (vec![vec4(r)], Box::new(|t, v| t.transpose(v[0], &[2, 0, 1]))),
        "softmax" => (vec![signed(&[3, 4], r)], Box::new(|t, v| Ok(t.softmax(v[0])))),
        "softmax_cross_entropy" => (
            vec![signed(&[4, 2], r).map(|v| 3.0 * v)],
            Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 1, 1, 0])),
        ),
        "conv2d_valid" => (
            vec![signed(&[2, 5, 7, 3], r), signed(&[3, 2, 3, 4], r)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Padding::Valid)),
        ),
        "conv2d_same" => (
            vec![signed(&[2, 4, 6, 2], r), signed(&[2, 4, 2, 3], r)],
            Box::new(|t, v| t.conv2d(v[0], v[1], Padding::Same)),
        ),
        "depthwise_conv2d" => (
            vec![signed(&[2, 3, 8, 3], r), signed(&[1, 3, 3], r)],
            Box::new(|t, v| t.depthwise_conv2d(v[0], v[1], Padding::Same)),
        ),
        "separable_conv2d" => (
            vec![signed(&[2, 1, 9, 4], r), signed(&[1, 3, 4], r), signed(&[4, 3], r)],
            Box::new(|t, v| t.separable_conv2d(v[0], v[1], v[2], Padding::Same)),
        ),
        "avg_pool2d" => (
            vec![signed(&[2, 1, 20, 3], r)],
            Box::new(|t, v| t.avg_pool2d(v[0], (1, 5), (1, 3))),
        ),
        "layer_norm" => (
            vec![signed(&[3, 5], r), signed(&[5], r), signed(&[5], r)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        "batch_norm_train" => (
            vec![signed(&[6, 4], r), signed(&[4], r), signed(&[4], r)],
            Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
        ),
        "batch_norm_infer" => {
            let mean: Vec<f64> = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..4).map(|_| r.random_range(0.2..2.0)).collect();
            (
                vec![signed(&[6, 4], r), signed(&[4], r), signed(&[4], r)],
                Box::new(move |t, v| t.batch_norm_infer(v[0], v[1], v[2], &mean, &var, 1e-5)),
            )
        }
        _ => return layer_setup(name, r),
    };
    Ok((inputs, build, default_cap))
}

fn layer_setup(name: &str, r: &mut Rng) -> Result<(Vec<Tensor<f64>>, Build, Option<usize>)> {
    let g = |s: &mut ParamStore<f64>, n: &str, shape: &[usize], r: &mut Rng| s.add(n, signed(shape, r), true);
    let (fx, x) = match name {
        "conv2d_layer" => (
            fixture(
                Mode::Train,
                |s, r| {
                    Layer::Conv2d(Conv2d {
                        kernel: g(s, "k", &[4, 1, 1, 3], r),
                        kh: 4,
                        kw: 1,
                        cin: 1,
                        cout: 3,
                        padding: Padding::Valid,
                    })
                },
                r,
            ),
            signed(&[2, 4, 6, 1], r),
        ),
        "separable_conv2d_layer" => (
            fixture(
                Mode::Train,
                |s, r| {
                    Layer::SeparableConv2d(SeparableConv2d {
                        depthwise: g(s, "d", &[1, 3, 5], r),
                        pointwise: g(s, "p", &[5, 2], r),
                        kh: 1,
                        kw: 3,
                        cin: 5,
                        cout: 2,
                        padding: Padding::Same,
                    })
                },
                r,
            ),
            signed(&[2, 1, 8, 5], r),
        ),
        "layer_norm_layer" => (
            fixture(
                Mode::Train,
                |s, r| {
                    Layer::LayerNorm(LayerNorm {
                        gamma: g(s, "g", &[6], r),
                        beta: g(s, "b", &[6], r),
                        features: 6,
                        eps: 1e-5,
                    })
                },
                r,
            ),
            signed(&[2, 1, 4, 6], r),
        ),
        "batch_norm_layer" => (
            fixture(
                Mode::Train,
                |s, r| {
                    let gamma = g(s, "g", &[3], r);
                    let beta = g(s, "b", &[3], r);
                    Layer::BatchNorm(BatchNorm {
                        gamma,
                        beta,
                        moving_mean: s.add("m", Tensor::from_parts(vec![3], vec![0.0; 3]), false),
                        moving_var: s.add("v", Tensor::from_parts(vec![3], vec![1.0; 3]), false),
                        features: 3,
                        momentum: 0.99,
                        eps: 1e-5,
                    })
                },
                r,
            ),
            signed(&[3, 1, 4, 3], r),
        ),
        "avg_pool2d_layer" => (
            fixture(
                Mode::Train,
                |_, _| {
                    Layer::AvgPool2d(AvgPool2d {
                        pool: (1, 4),
                        stride: (1, 2),
                    })
                },
                r,
            ),
            signed(&[2, 1, 12, 2], r),
        ),
        "dropout_layer" => (
            fixture(Mode::Train, |_, _| Layer::Dropout { rate: 0.3 }, r),
            signed(&[2, 1, 6, 3], r),
        ),
        "dense_abs_layer" => (
            fixture(
                Mode::Train,
                |s, r| {
                    Layer::Dense(Dense {
                        weight: g(s, "w", &[4, 2], r),
                        bias: g(s, "b", &[2], r),
                        fin: 4,
                        fout: 2,
                        activation: Some(Activation::Abs),
                    })
                },
                r,
            ),
            signed(&[2, 1, 5, 4], r),
        ),
        "flatten_dense_layer" => {
            let fx = fixture(
                Mode::Train,
                |s, r| {
                    Layer::Dense(Dense {
                        weight: g(s, "w", &[10, 2], r),
                        bias: g(s, "b", &[2], r),
                        fin: 10,
                        fout: 2,
                        activation: None,
                    })
                },
                r,
            );
            let x = signed(&[3, 1, 5, 2], r);
            let inputs = fx.inputs(x);
            let inner = fx.into_build();
            let build: Build = Box::new(move |t, v| {
                let flat = t.reshape(v[0], &[3, 10])?;
                let mut vars = v.to_vec();
                vars[0] = flat;
                inner(t, &vars)
            });
            return Ok((inputs, build, Some(64)));
        }
        "absolutenet" => return model_setup(r),
        other => return Err(Error::config("op", format!("unknown gradient case {other:?}"))),
    };
    let inputs = fx.inputs(x);
    Ok((inputs, fx.into_build(), Some(64)))
}

/// Full network in train mode (batch statistics, fixed dropout mask),
/// reduced to the cross-entropy loss of a two-sample batch.
fn model_setup(r: &mut Rng) -> Result<(Vec<Tensor<f64>>, Build, Option<usize>)> {
    let net: AbsoluteNet<f64> = AbsoluteNet::build(&ModelConfig::default(), r)?;
    let x = signed(&[2, 28, 150, 1], r);
    let mut inputs = vec![x];
    let mut ids = Vec::new();
    for (id, p) in net.params().iter() {
        if p.trainable {
            // Move gains and offsets off their 1/0 initial values so every
            // path carries a generic gradient.
            let data = p.value.data().iter().map(|v| v + 0.1 * r.random_range(-1.0..1.0));
            inputs.push(Tensor::from_parts(p.value.shape().to_vec(), data.collect()));
            ids.push(id);
        }
    }
    let build: Build = Box::new(move |tape, vars| {
        let mut rng = seeded(12);
        let mut f = Forward::new(tape, net.params(), Mode::Train, Some(&mut rng));
        for (&id, &v) in ids.iter().zip(&vars[1..]) {
            f.bind(id, v);
        }
        let logits = net.logits(&mut f, vars[0])?;
        drop(f);
        tape.softmax_cross_entropy(logits, &[0, 1])
    });
    Ok((inputs, build, Some(6)))
}

/// Runs one named case from [`CASES`].
pub fn run_case(name: &str, seed: u64) -> Result<CheckReport> {
    let index = CASES.iter().position(|c| c.name == name).unwrap_or(CASES.len()) as u64;
    let mut rng = derived(seed, index);
    let (inputs, build, cap) = setup(name, &mut rng)?;
    let options = CheckOptions {
        max_coords: cap,
        seed: seed ^ index,
        ..Default::default()
    };
    check(name, &inputs, build, &options)
}

pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    CASES.iter().map(|c| run_case(c.name, seed)).collect()
}

/// Analytic derivative of a scalar activation at `x`, as computed by the
/// tape.
pub fn gradient_at(op: &str, x: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(Tensor::scalar(x));
    let y = match op {
        "square" => tape.square(v),
        "abs" => tape.abs(v),
        "log_abs" => tape.log_abs_eps(v, 1e-7),
        "exp" => tape.exp(v),
        "log" => tape.log(v),
        other => {
            return Err(Error::config(
                "op",
                format!("{other:?} has no scalar form (try square, abs, log_abs, exp, log)"),
            ))
        }
    };
    let grads = tape.backward(y)?;
    Ok(grads.get(v).expect("leaf gradient").item())
}
