//! Fused normalization ops. Both normalize per feature (last axis); layer
//! norm takes statistics across features at each position, batch norm takes
//! them across all positions for each feature.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

impl<T: Element> Tape<T> {
    fn affine_params(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let f = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [f] {
                return Err(Error::shape(
                    op,
                    format!("parameter {:?} vs feature extent {f}", self.shape(p)),
                ));
            }
        }
        Ok(f)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let f = self.affine_params("layer_norm", x, gamma, beta)?;
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let positions = xv.len() / f;
        let nf = T::of(f as f64);
        let mut normalized = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); positions];
        let mut out = vec![T::zero(); xv.len()];
        for (p, row) in xv.data().chunks_exact(f).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[p] = inv;
            for i in 0..f {
                let xh = (row[i] - mean) * inv;
                normalized[p * f + i] = xh;
                out[p * f + i] = g[i] * xh + b[i];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Batch normalization with statistics of this batch. Returns the output
    /// and the per-feature batch mean and (population) variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let f = self.affine_params("batch_norm", x, gamma, beta)?;
        let xv = self.value(x);
        let rows = xv.len() / f;
        if rows < 2 {
            return Err(Error::shape(
                "batch_norm",
                "batch statistics need at least two positions per feature",
            ));
        }
        let nr = T::of(rows as f64);
        let mut mean = vec![T::zero(); f];
        for row in xv.data().chunks_exact(f) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nr);
        let mut var = vec![T::zero(); f];
        for row in xv.data().chunks_exact(f) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / nr);
        let y = self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true);
        Ok((y, mean, var))
    }

    /// Batch normalization with fixed (moving) statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let f = self.affine_params("batch_norm", x, gamma, beta)?;
        if mean.len() != f || var.len() != f {
            return Err(Error::shape(
                "batch_norm",
                format!("moving statistics of length {} vs {f} features", mean.len()),
            ));
        }
        Ok(self.batch_norm_with(x, gamma, beta, mean, var, eps, false))
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
        batch_stats: bool,
    ) -> Var {
        let xv = self.value(x);
        let f = mean.len();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut normalized = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (r, row) in xv.data().chunks_exact(f).enumerate() {
            for i in 0..f {
                let xh = (row[i] - mean[i]) * inv_std[i];
                normalized[r * f + i] = xh;
                out[r * f + i] = g[i] * xh + b[i];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            },
        )
    }
}

pub(super) fn layer_norm_backward<T: Element>(
    gamma: &Tensor<T>,
    normalized: &[T],
    inv_std: &[T],
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let f = gamma.len();
    let g = gamma.data();
    let nf = T::of(f as f64);
    let mut gx = vec![T::zero(); grad.len()];
    let mut gg = vec![T::zero(); f];
    let mut gb = vec![T::zero(); f];
    let mut ghat = vec![T::zero(); f];
    for (p, go) in grad.data().chunks_exact(f).enumerate() {
        let xh = &normalized[p * f..(p + 1) * f];
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for i in 0..f {
            gg[i] = gg[i] + go[i] * xh[i];
            gb[i] = gb[i] + go[i];
            ghat[i] = go[i] * g[i];
            mean_g = mean_g + ghat[i];
            mean_gx = mean_gx + ghat[i] * xh[i];
        }
        mean_g = mean_g / nf;
        mean_gx = mean_gx / nf;
        for i in 0..f {
            gx[p * f + i] = inv_std[p] * (ghat[i] - mean_g - xh[i] * mean_gx);
        }
    }
    (
        Tensor::from_parts(grad.shape().to_vec(), gx),
        Tensor::from_parts(vec![f], gg),
        Tensor::from_parts(vec![f], gb),
    )
}

pub(super) fn batch_norm_backward<T: Element>(
    gamma: &Tensor<T>,
    normalized: &[T],
    inv_std: &[T],
    batch_stats: bool,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let f = gamma.len();
    let g = gamma.data();
    let rows = grad.len() / f;
    let mut gg = vec![T::zero(); f];
    let mut gb = vec![T::zero(); f];
    for (go, xh) in grad.data().chunks_exact(f).zip(normalized.chunks_exact(f)) {
        for i in 0..f {
            gg[i] = gg[i] + go[i] * xh[i];
            gb[i] = gb[i] + go[i];
        }
    }
    let mut gx = vec![T::zero(); grad.len()];
    if batch_stats {
        // Per feature: gx = γ·inv·(g − mean(g) − x̂·mean(g·x̂)).
        let nr = T::of(rows as f64);
        for (r, (go, xh)) in grad.data().chunks_exact(f).zip(normalized.chunks_exact(f)).enumerate() {
            for i in 0..f {
                gx[r * f + i] = g[i] * inv_std[i] * (go[i] - gb[i] / nr - xh[i] * gg[i] / nr);
            }
        }
    } else {
        for (r, go) in grad.data().chunks_exact(f).enumerate() {
            for i in 0..f {
                gx[r * f + i] = go[i] * g[i] * inv_std[i];
            }
        }
    }
    (
        Tensor::from_parts(grad.shape().to_vec(), gx),
        Tensor::from_parts(vec![f], gg),
        Tensor::from_parts(vec![f], gb),
    )
}
