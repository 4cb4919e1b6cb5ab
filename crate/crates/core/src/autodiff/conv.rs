//! 2-D convolution and pooling over channels-last `[N, H, W, C]` tensors.
//!
//! `H` is the fNIRS channel axis and `W` the time axis. Rank-3 `[H, W, C]`
//! inputs are accepted and treated as a batch of one.

use serde::{Deserialize, Serialize};

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    /// Zero padding that preserves extents; an odd total pad puts the extra
    /// element on the trailing side.
    Same,
}

impl Padding {
    /// (leading, trailing) pad for a kernel extent.
    pub fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let total = kernel - 1;
                (total / 2, total - total / 2)
            }
        }
    }

    pub fn output_len(self, input: usize, kernel: usize) -> Option<usize> {
        let (lead, trail) = self.amounts(kernel);
        (input + lead + trail).checked_sub(kernel).map(|d| d + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn new(op: &'static str, input: &[usize], kh: usize, kw: usize, cout: usize, padding: Padding) -> Result<Self> {
        let &[n, h, w, cin] = input else {
            return Err(Error::shape(op, format!("expected [N,H,W,C], got {input:?}")));
        };
        let out_h = padding.output_len(h, kh);
        let out_w = padding.output_len(w, kw);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::shape(
                op,
                format!("kernel ({kh},{kw}) larger than input ({h},{w}) with {padding:?} padding"),
            ));
        };
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            pad_top: padding.amounts(kh).0,
            pad_left: padding.amounts(kw).0,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.out_h * self.out_w
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the
    /// unpadded input.
    fn source(o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (o + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoolGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub ph: usize,
    pub pw: usize,
    pub sh: usize,
    pub sw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl<T: Element> Tape<T> {
    fn batched(&mut self, op: &'static str, x: Var) -> Result<(Var, bool)> {
        match self.shape(x).len() {
            4 => Ok((x, false)),
            3 => {
                let mut s = vec![1];
                s.extend_from_slice(self.shape(x));
                Ok((self.reshape(x, &s)?, true))
            }
            _ => Err(Error::shape(
                op,
                format!("expected [H,W,C] or [N,H,W,C], got {:?}", self.shape(x)),
            )),
        }
    }

    fn unbatched(&mut self, y: Var, squeeze: bool) -> Result<Var> {
        if squeeze {
            let s = self.shape(y)[1..].to_vec();
            self.reshape(y, &s)
        } else {
            Ok(y)
        }
    }

    /// Cross-correlation with kernel `[kh, kw, C_in, C_out]`, no bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (x, squeeze) = self.batched("conv2d", input)?;
        let ks = self.shape(kernel).to_vec();
        let &[kh, kw, kcin, cout] = ks.as_slice() else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [kh,kw,C_in,C_out], got {ks:?}"),
            ));
        };
        let geom = ConvGeom::new("conv2d", self.shape(x), kh, kw, cout, padding)?;
        if kcin != geom.cin {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects C_in={kcin}, input has {}", geom.cin),
            ));
        }
        let cols = im2col(&geom, self.value(x).data());
        let mut out = vec![T::zero(); geom.rows() * cout];
        T::gemm(
            geom.rows(),
            geom.patch(),
            cout,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            T::zero(),
            &mut out,
        );
        let value = Tensor::from_parts(vec![geom.n, geom.out_h, geom.out_w, cout], out);
        let y = self.push(
            value,
            Op::Conv2d {
                input: x,
                kernel,
                geom,
                cols,
            },
        );
        self.unbatched(y, squeeze)
    }

    /// One `[kh, kw]` filter per input feature: kernel `[kh, kw, C]`.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (x, squeeze) = self.batched("depthwise_conv2d", input)?;
        let ks = self.shape(kernel).to_vec();
        let &[kh, kw, kc] = ks.as_slice() else {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel must be [kh,kw,C], got {ks:?}"),
            ));
        };
        let geom = ConvGeom::new("depthwise_conv2d", self.shape(x), kh, kw, kc, padding)?;
        if kc != geom.cin {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel has {kc} features, input has {}", geom.cin),
            ));
        }
        let out = depthwise_forward(&geom, self.value(x).data(), self.value(kernel).data());
        let value = Tensor::from_parts(vec![geom.n, geom.out_h, geom.out_w, kc], out);
        let y = self.push(value, Op::Depthwise { input: x, kernel, geom });
        self.unbatched(y, squeeze)
    }

    /// Depthwise `[kh, kw, C_in]` followed by pointwise `[C_in, C_out]`.
    pub fn separable_conv2d(&mut self, input: Var, depthwise: Var, pointwise: Var, padding: Padding) -> Result<Var> {
        let ps = self.shape(pointwise).to_vec();
        let &[pcin, pcout] = ps.as_slice() else {
            return Err(Error::shape(
                "separable_conv2d",
                format!("pointwise must be [C_in,C_out], got {ps:?}"),
            ));
        };
        let d = self.depthwise_conv2d(input, depthwise, padding)?;
        let k = self.reshape(pointwise, &[1, 1, pcin, pcout])?;
        self.conv2d(d, k, Padding::Valid)
    }

    /// Mean over `pool` windows moved by `stride`, no padding.
    pub fn avg_pool2d(&mut self, input: Var, pool: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (x, squeeze) = self.batched("avg_pool2d", input)?;
        let &[n, h, w, c] = self.shape(x) else { unreachable!() };
        let (ph, pw) = pool;
        let (sh, sw) = stride;
        if ph == 0 || pw == 0 || sh == 0 || sw == 0 {
            return Err(Error::shape("avg_pool2d", "pool and stride must be positive"));
        }
        if ph > h || pw > w {
            return Err(Error::shape(
                "avg_pool2d",
                format!("pool ({ph},{pw}) larger than input ({h},{w})"),
            ));
        }
        let geom = PoolGeom {
            n,
            h,
            w,
            c,
            ph,
            pw,
            sh,
            sw,
            out_h: (h - ph) / sh + 1,
            out_w: (w - pw) / sw + 1,
        };
        let out = avg_pool_forward(&geom, self.value(x).data());
        let value = Tensor::from_parts(vec![n, geom.out_h, geom.out_w, c], out);
        let y = self.push(value, Op::AvgPool { input: x, geom });
        self.unbatched(y, squeeze)
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for n in 0..g.n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for kh in 0..g.kh {
                    let Some(ih) = ConvGeom::source(oh, kh, g.pad_top, g.h) else {
                        continue;
                    };
                    for kw in 0..g.kw {
                        let Some(iw) = ConvGeom::source(ow, kw, g.pad_left, g.w) else {
                            continue;
                        };
                        let src = ((n * g.h + ih) * g.w + iw) * g.cin;
                        let off = (kh * g.kw + kw) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.cin];
    let mut row = 0;
    for n in 0..g.n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let src_row = &cols[row * patch..(row + 1) * patch];
                for kh in 0..g.kh {
                    let Some(ih) = ConvGeom::source(oh, kh, g.pad_top, g.h) else {
                        continue;
                    };
                    for kw in 0..g.kw {
                        let Some(iw) = ConvGeom::source(ow, kw, g.pad_left, g.w) else {
                            continue;
                        };
                        let dst = ((n * g.h + ih) * g.w + iw) * g.cin;
                        let off = (kh * g.kw + kw) * g.cin;
                        for (d, &s) in x[dst..dst + g.cin].iter_mut().zip(&src_row[off..off + g.cin]) {
                            *d = *d + s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

pub(super) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    cols: &[T],
    kernel: &Tensor<T>,
    grad: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let (rows, patch) = (g.rows(), g.patch());
    let mut gk = vec![T::zero(); patch * g.cout];
    T::gemm(patch, rows, g.cout, cols, true, grad.data(), false, T::zero(), &mut gk);
    let gk = Tensor::from_parts(kernel.shape().to_vec(), gk);
    if !need_input {
        return (None, gk);
    }
    let mut gcols = vec![T::zero(); rows * patch];
    T::gemm(
        rows,
        g.cout,
        patch,
        grad.data(),
        false,
        kernel.data(),
        true,
        T::zero(),
        &mut gcols,
    );
    let gx = col2im(g, &gcols);
    (Some(Tensor::from_parts(vec![g.n, g.h, g.w, g.cin], gx)), gk)
}

fn depthwise_forward<T: Element>(g: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let c = g.cin;
    let mut out = vec![T::zero(); g.n * g.out_h * g.out_w * c];
    for n in 0..g.n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let o = ((n * g.out_h + oh) * g.out_w + ow) * c;
                let dst = &mut out[o..o + c];
                for kh in 0..g.kh {
                    let Some(ih) = ConvGeom::source(oh, kh, g.pad_top, g.h) else {
                        continue;
                    };
                    for kw in 0..g.kw {
                        let Some(iw) = ConvGeom::source(ow, kw, g.pad_left, g.w) else {
                            continue;
                        };
                        let src = &x[((n * g.h + ih) * g.w + iw) * c..][..c];
                        let tap = &k[(kh * g.kw + kw) * c..][..c];
                        for ((d, &s), &t) in dst.iter_mut().zip(src).zip(tap) {
                            *d = *d + s * t;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn depthwise_backward<T: Element>(
    g: &ConvGeom,
    x: &Tensor<T>,
    k: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = g.cin;
    let (xd, kd, gd) = (x.data(), k.data(), grad.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut gk = vec![T::zero(); kd.len()];
    for n in 0..g.n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let go = &gd[((n * g.out_h + oh) * g.out_w + ow) * c..][..c];
                for kh in 0..g.kh {
                    let Some(ih) = ConvGeom::source(oh, kh, g.pad_top, g.h) else {
                        continue;
                    };
                    for kw in 0..g.kw {
                        let Some(iw) = ConvGeom::source(ow, kw, g.pad_left, g.w) else {
                            continue;
                        };
                        let xi = ((n * g.h + ih) * g.w + iw) * c;
                        let ki = (kh * g.kw + kw) * c;
                        for ch in 0..c {
                            gx[xi + ch] = gx[xi + ch] + go[ch] * kd[ki + ch];
                            gk[ki + ch] = gk[ki + ch] + go[ch] * xd[xi + ch];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(k.shape().to_vec(), gk),
    )
}

fn avg_pool_forward<T: Element>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let scale = T::one() / T::of((g.ph * g.pw) as f64);
    let mut out = vec![T::zero(); g.n * g.out_h * g.out_w * g.c];
    for n in 0..g.n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let dst = &mut out[((n * g.out_h + oh) * g.out_w + ow) * g.c..][..g.c];
                for i in 0..g.ph {
                    for j in 0..g.pw {
                        let (ih, iw) = (oh * g.sh + i, ow * g.sw + j);
                        let src = &x[((n * g.h + ih) * g.w + iw) * g.c..][..g.c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                dst.iter_mut().for_each(|d| *d = *d * scale);
            }
        }
    }
    out
}

pub(super) fn avg_pool_backward<T: Element>(g: &PoolGeom, grad: &Tensor<T>) -> Tensor<T> {
    let scale = T::one() / T::of((g.ph * g.pw) as f64);
    let mut gx = vec![T::zero(); g.n * g.h * g.w * g.c];
    for n in 0..g.n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let go = &grad.data()[((n * g.out_h + oh) * g.out_w + ow) * g.c..][..g.c];
                for i in 0..g.ph {
                    for j in 0..g.pw {
                        let (ih, iw) = (oh * g.sh + i, ow * g.sw + j);
                        let dst = &mut gx[((n * g.h + ih) * g.w + iw) * g.c..][..g.c];
                        for (d, &s) in dst.iter_mut().zip(go) {
                            *d = *d + s * scale;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.h, g.w, g.c], gx)
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::rng::seeded;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct evaluation of the convolution sum, independent of im2col/GEMM.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, padding: Padding) -> Tensor<f64> {
        let &[h, w, cin] = x.shape() else { panic!() };
        let &[kh, kw, _, cout] = k.shape() else { panic!() };
        let (pt, _) = padding.amounts(kh);
        let (pl, _) = padding.amounts(kw);
        let oh = padding.output_len(h, kh).unwrap();
        let ow = padding.output_len(w, kw).unwrap();
        let mut out = vec![0.0; oh * ow * cout];
        for i in 0..oh {
            for j in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for m in 0..kh {
                        for nn in 0..kw {
                            let (a, b) = (i + m, j + nn);
                            if a < pt || b < pl || a - pt >= h || b - pl >= w {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.data()[((a - pt) * w + (b - pl)) * cin + ci]
                                    * k.data()[((m * kw + nn) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(i * ow + j) * cout + co] = acc;
                }
            }
        }
        Tensor::new(vec![oh, ow, cout], out).unwrap()
    }

    #[test]
    fn network_layer_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![28, 150, 1]).unwrap());
        let spatial = tape.leaf(Tensor::zeros(vec![28, 1, 1, 40]).unwrap());
        let temporal = tape.leaf(Tensor::zeros(vec![1, 5, 1, 20]).unwrap());
        let a = tape.conv2d(x, spatial, Padding::Valid).unwrap();
        let b = tape.conv2d(x, temporal, Padding::Valid).unwrap();
        assert_eq!(tape.shape(a), &[1, 150, 40]);
        assert_eq!(tape.shape(b), &[28, 146, 20]);
    }

    #[test]
    fn ones_sum_to_four() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(vec![2, 2, 1]).unwrap());
        let k = tape.leaf(Tensor::ones(vec![2, 2, 1, 1]).unwrap());
        let y = tape.conv2d(x, k, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).item(), 4.0);
    }

    #[test]
    fn matches_direct_sum() {
        for (padding, seed) in [(Padding::Valid, 1), (Padding::Same, 2)] {
            let x = random(&[5, 9, 3], seed);
            let k = random(&[2, 4, 3, 2], seed + 10);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let kv = tape.leaf(k.clone());
            let y = tape.conv2d(xv, kv, padding).unwrap();
            let want = conv_oracle(&x, &k, padding);
            assert_eq!(tape.shape(y), want.shape());
            assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn same_padding_puts_extra_on_trailing_side() {
        assert_eq!(Padding::Same.amounts(3), (1, 1));
        assert_eq!(Padding::Same.amounts(4), (1, 2));
        assert_eq!(Padding::Same.output_len(146, 3), Some(146));
        assert_eq!(Padding::Valid.output_len(146, 3), Some(144));
        assert_eq!(Padding::Valid.output_len(2, 3), None);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![4, 4, 2]).unwrap());
        let too_big = tape.leaf(Tensor::zeros(vec![5, 1, 2, 1]).unwrap());
        let wrong_cin = tape.leaf(Tensor::zeros(vec![1, 1, 3, 1]).unwrap());
        assert!(tape.conv2d(x, too_big, Padding::Valid).is_err());
        assert!(tape.conv2d(x, too_big, Padding::Same).is_ok());
        assert!(tape.conv2d(x, wrong_cin, Padding::Valid).is_err());
        let pool_err = tape.avg_pool2d(x, (1, 5), (1, 1));
        assert!(pool_err.is_err());
    }

    #[test]
    fn separable_parameter_count_and_identity() {
        assert_eq!(3 * 120 + 120 * 10, 1560);

        let x = random(&[2, 6, 4], 3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let dw = tape.leaf(Tensor::ones(vec![1, 1, 4]).unwrap());
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
        let pw = tape.leaf(Tensor::new(vec![4, 4], eye).unwrap());
        let y = tape.separable_conv2d(xv, dw, pw, Padding::Valid).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn separable_equals_expanded_kernel() {
        let (kh, kw, cin, cout) = (1, 3, 3, 2);
        let x = random(&[1, 8, cin], 4);
        let dw = random(&[kh, kw, cin], 5);
        let pw = random(&[cin, cout], 6);
        // Rank-1 expansion: K[m,n,ci,co] = dw[m,n,ci] · pw[ci,co].
        let mut full = vec![0.0; kh * kw * cin * cout];
        for tap in 0..kh * kw {
            for ci in 0..cin {
                for co in 0..cout {
                    full[(tap * cin + ci) * cout + co] = dw.data()[tap * cin + ci] * pw.data()[ci * cout + co];
                }
            }
        }
        let full = Tensor::new(vec![kh, kw, cin, cout], full).unwrap();
        for padding in [Padding::Valid, Padding::Same] {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let dv = tape.leaf(dw.clone());
            let pv = tape.leaf(pw.clone());
            let y = tape.separable_conv2d(xv, dv, pv, padding).unwrap();
            let want = conv_oracle(&x, &full, padding);
            assert!(tape.value(y).max_abs_diff(&want) < 1e-6);
        }
    }

    #[test]
    fn avg_pool_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(vec![1, 4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.avg_pool2d(x, (1, 2), (1, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 3.5]);

        let c = tape.leaf(Tensor::full(vec![1, 146, 10], 2.5).unwrap());
        let p = tape.avg_pool2d(c, (1, 25), (1, 8)).unwrap();
        assert_eq!(tape.shape(p), &[1, 16, 10]);
        assert!(tape.value(p).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
