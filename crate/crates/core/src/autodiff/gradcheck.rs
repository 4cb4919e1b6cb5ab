//! Central finite-difference verification of tape gradients.
//!
//! Vector-valued expressions are reduced to a scalar by a fixed random
//! projection `Σ w ⊙ f(x)`, so every output element contributes.

use rand::seq::index::sample;
use rand::Rng as _;

use super::{Tape, Var};
use crate::error::Result;
use crate::rng::derived;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is zero are judged by absolute error at this scale.
    pub floor: f64,
    /// Cap on perturbed coordinates per input; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            floor: 1e-6,
            max_coords: Some(64),
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates compared.
    pub coords: usize,
    /// Coordinates left out because the ±step evaluations moved an input of
    /// `abs` or `log_abs_eps` across zero.
    pub straddled: usize,
}

impl CheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], weights: &Tensor<f64>, build: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let value = tape
        .value(y)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum();
    Ok((value, tape.kink_signature()))
}

/// Compares analytic and numeric gradients of `build` with respect to every
/// input tensor.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], build: F, options: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let signature = tape.kink_signature();
    let out_shape = tape.shape(y).to_vec();
    let mut rng = derived(options.seed, 0);
    let n: usize = out_shape.iter().product();
    let weights = Tensor::new(out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let w = tape.leaf(weights.clone());
    let projected = tape.mul(y, w)?;
    let loss = tape.sum(projected);
    let grads = tape.backward(loss)?;

    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords: 0,
        straddled: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient");
        let len = inputs[i].len();
        let coords: Vec<usize> = match options.max_coords {
            Some(cap) if cap < len => {
                let mut r = derived(options.seed, 1 + i as u64);
                let mut picked = sample(&mut r, len, cap).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        for j in coords {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + options.step;
            let (plus, sig_plus) = evaluate(&perturbed, &weights, &build)?;
            perturbed[i].data_mut()[j] = orig - options.step;
            let (minus, sig_minus) = evaluate(&perturbed, &weights, &build)?;
            perturbed[i].data_mut()[j] = orig;
            if sig_plus != signature || sig_minus != signature {
                report.straddled += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(options.floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = if rel.is_nan() {
                f64::INFINITY
            } else {
                report.max_rel_error.max(rel)
            };
            report.coords += 1;
        }
    }
    Ok(report)
}
