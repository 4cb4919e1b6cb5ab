use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

impl<T: Element> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::ScalarMul(a, s))
    }

    /// `x[..., F] + b[F]`, broadcasting over every leading position.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let features = self.value(x).last_dim();
        if self.value(b).len() != features || self.value(b).rank() != 1 {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs input {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(features) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o = *o + bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a))
    }

    /// `ln(|x| + eps)`, finite everywhere including zero.
    pub fn log_abs_eps(&mut self, a: Var, eps: T) -> Var {
        let v = self.value(a).map(|x| (x.abs() + eps).ln());
        self.push(v, Op::LogAbsEps(a, eps))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.data().iter().copied().sum::<T>() / T::of(x.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::of(x.len() as f64);
        let m = x.data().iter().copied().sum::<T>() / n;
        let v = x.data().iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
        self.push(Tensor::scalar(v), Op::Variance(a))
    }

    /// 2-D matrix product `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = self.shape(*first).len();
        if axis >= rank {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let base = self.shape(*first).to_vec();
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == rank && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = inputs.iter().map(|v| self.shape(*v)[axis]).sum();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || std::mem::replace(&mut seen[p], true) {
                return Err(Error::shape(
                    "transpose",
                    format!("{perm:?} is not a permutation of rank {rank}"),
                ));
            }
        }
        if perm.len() != rank {
            return Err(Error::shape(
                "transpose",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let v = permute(self.value(a), perm);
        Ok(self.push(
            v,
            Op::Transpose {
                input: a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let k = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(v, Op::Softmax(a))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`),
    /// evaluated with log-sum-exp so large logits do not overflow.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let k = x.last_dim();
        let rows = x.len() / k;
        if labels.len() != rows {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let mut probs = x.data().to_vec();
        let mut loss = T::zero();
        for (row, (chunk, &label)) in x.data().chunks_exact(k).zip(labels).enumerate() {
            let max = chunk.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + chunk.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss = loss + lse - chunk[label];
            softmax_in_place(&mut probs[row * k..(row + 1) * k]);
        }
        loss = loss / T::of(rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(super) fn softmax_backward<T: Element>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let k = y.last_dim();
    let mut out = vec![T::zero(); y.len()];
    for ((o, yr), gr) in out
        .chunks_exact_mut(k)
        .zip(y.data().chunks_exact(k))
        .zip(grad.data().chunks_exact(k))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub(super) fn matmul_backward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, grad: &Tensor<T>) -> [Tensor<T>; 2] {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut ga = vec![T::zero(); m * k];
    let mut gb = vec![T::zero(); k * n];
    T::gemm(m, n, k, grad.data(), false, b.data(), true, T::zero(), &mut ga);
    T::gemm(k, m, n, a.data(), true, grad.data(), false, T::zero(), &mut gb);
    [Tensor::from_parts(vec![m, k], ga), Tensor::from_parts(vec![k, n], gb)]
}

pub(super) fn concat_backward<T: Element>(grad: &Tensor<T>, shapes: &[&[usize]], axis: usize) -> Vec<Tensor<T>> {
    let base = grad.shape();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let mut offset = 0;
    for _ in 0..outer {
        for (part, shape) in parts.iter_mut().zip(shapes) {
            let chunk = shape[axis] * inner;
            part.extend_from_slice(&grad.data()[offset..offset + chunk]);
            offset += chunk;
        }
    }
    parts
        .into_iter()
        .zip(shapes)
        .map(|(data, shape)| Tensor::from_parts(shape.to_vec(), data))
        .collect()
}

pub(super) fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut index = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[src]);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < out_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}
