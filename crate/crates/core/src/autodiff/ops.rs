//! Element-wise, reduction, shape, and matrix-product ops.

use std::rc::Rc;

use super::kernels::{broadcast_map, broadcast_shape, expand, gemm_acc, gemm_nt_acc, gemm_tn_acc, reduce_to};
use super::tape::Var;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{strides, Tensor};

type BinFn<T> = fn(T, T) -> T;
/// Partial derivative given `(a, b, out)`.
type BinGrad<T> = fn(T, T, T) -> T;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `tanh` through a single `exp`; absolute error near machine epsilon.
#[inline]
fn fast_tanh<T: Real>(z: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

/// Tanh-approximated GELU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + fast_tanh(inner))
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let t = fast_tanh(c * (x + k * x * x * x));
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(
        self,
        rhs: Var<'t, T>,
        op: &'static str,
        f: BinFn<T>,
        da: BinGrad<T>,
        db: BinGrad<T>,
    ) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?} not broadcastable", a.shape(), b.shape())))?;
        // index maps only for operands that are actually broadcast
        let map_for = |shape: &[usize]| (shape != out_shape.as_slice()).then(|| Rc::new(broadcast_map(shape, &out_shape)));
        let (ma, mb) = (map_for(a.shape()), map_for(b.shape()));
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<T> = match (&ma, &mb) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(mb)) => ad.iter().zip(mb.iter()).map(|(&x, &j)| f(x, bd[j])).collect(),
            (Some(ma), None) => ma.iter().zip(bd).map(|(&i, &y)| f(ad[i], y)).collect(),
            (Some(ma), Some(mb)) => (0..n).map(|k| f(ad[ma[k]], bd[mb[k]])).collect(),
        };
        let out = Tensor::from_parts(out_shape, out);
        self.tape.push(op, out, &[self, rhs], move |g, out_val| {
            let n = g.numel();
            let mut ga = Vec::with_capacity(n);
            let mut gb = Vec::with_capacity(n);
            let (ad, bd, od, gd) = (a.data(), b.data(), out_val.data(), g.data());
            for i in 0..n {
                let x = ad[ma.as_ref().map_or(i, |m| m[i])];
                let y = bd[mb.as_ref().map_or(i, |m| m[i])];
                ga.push(gd[i] * da(x, y, od[i]));
                gb.push(gd[i] * db(x, y, od[i]));
            }
            let ga = Tensor::from_parts(g.shape().to_vec(), ga);
            let gb = Tensor::from_parts(g.shape().to_vec(), gb);
            vec![Some(reduce_to(&ga, a.shape())), Some(reduce_to(&gb, b.shape()))]
        })
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |x, y| x + y, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", |x, y| x - y, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        if rhs.value().data().iter().any(|v| v.is_zero()) {
            return Err(Error::invalid("div: divisor contains zero"));
        }
        self.binary(rhs, "div", |x, y| x / y, |_, y, _| T::one() / y, |_, y, o| -o / y)
    }

    fn unary(self, op: &'static str, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.map(f);
        self.tape.push(op, out, &[self], move |g, out_val| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out_val.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary("square", |x| x * x, |x, _| T::lit(2.0) * x)
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary("relu", |x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary("gelu", gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        self.unary("abs", |x| x.abs(), |x, _| if x < T::zero() { -T::one() } else { T::one() })
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.map(|v| v * c);
        self.tape.push("scale", out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v + c);
        self.tape.push("add_scalar", out, &[self], |g, _| vec![Some(g.clone())])
    }

    /// Sum over `axes`, keeping them as unit extents.
    pub fn sum_axes_keep(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut out_shape = in_shape.clone();
        for &ax in axes {
            if ax >= in_shape.len() {
                return Err(Error::shape("sum", format!("axis {ax} out of range for {in_shape:?}")));
            }
            out_shape[ax] = 1;
        }
        let map = broadcast_map(&out_shape, &in_shape);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&v, &oi) in x.data().iter().zip(&map) {
            out[oi] += v;
        }
        let out = Tensor::from_parts(out_shape, out);
        self.tape.push("sum", out, &[self], move |g, _| vec![Some(expand(g, &in_shape))])
    }

    /// Sum over `axes`, dropping them from the shape (a full reduction yields shape `[1]`).
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let kept = self.sum_axes_keep(axes)?;
        let shape: Vec<usize> =
            self.shape().iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &e)| e).collect();
        kept.reshape(if shape.is_empty() { vec![1] } else { shape })
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        self.sum_axes(axes)?.scale(T::one() / T::from_usize_lossy(count))
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes)
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let n = self.numel();
        self.sum_all()?.scale(T::one() / T::from_usize_lossy(n))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshaped(shape)?;
        self.tape.push("reshape", out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        })
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out = permute_tensor(&x, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.tape.push("permute", out, &[self], move |g, _| vec![Some(permute_tensor(g, &inverse))])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, base)));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.push("concat", Tensor::from_parts(out_shape, data), parts, move |g, _| {
            let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
            let gd = g.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (gv, &w) in grads.iter_mut().zip(&widths) {
                    gv.extend_from_slice(&gd[pos..pos + w]);
                    pos += w;
                }
            }
            grads.into_iter().zip(&shapes).map(|(d, s)| Some(Tensor::from_parts(s.clone(), d))).collect()
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let out = slice_tensor(&x, axis, start, len);
        let extent = shape[axis];
        self.tape.push("slice", out, &[self], move |g, _| {
            vec![Some(pad_tensor(g, axis, start, extent - start - len))]
        })
    }

    /// Zero padding on `axis`.
    pub fn pad(self, axis: usize, before: usize, after: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("pad", format!("axis {axis} out of range")));
        }
        let len = x.shape()[axis];
        let out = pad_tensor(&x, axis, before, after);
        self.tape.push("pad", out, &[self], move |g, _| vec![Some(slice_tensor(g, axis, before, len))])
    }

    /// Batched matrix product `[..., m, k] · [..., k, n]` with broadcast batch axes.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("operands need rank >= 2: {sa:?}, {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {sa:?} · {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb)
            .ok_or_else(|| Error::shape("matmul", format!("batch axes {ba:?} vs {bb:?}")))?;
        let nbatch: usize = batch.iter().product();
        let ma = Rc::new(broadcast_map(ba, &batch));
        let mb = Rc::new(broadcast_map(bb, &batch));
        let mut out = vec![T::zero(); nbatch * m * n];
        for i in 0..nbatch {
            gemm_acc(
                m,
                k,
                n,
                &a.data()[ma[i] * m * k..(ma[i] + 1) * m * k],
                &b.data()[mb[i] * k * n..(mb[i] + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.tape.count_flops(2 * (nbatch * m * k * n) as u64);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        self.tape.push("matmul", Tensor::from_parts(out_shape, out), &[self, rhs], move |g, _| {
            let mut ga = vec![T::zero(); a.numel()];
            let mut gb = vec![T::zero(); b.numel()];
            let gd = g.data();
            for i in 0..nbatch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                gemm_nt_acc(m, n, k, gi, &b.data()[mb[i] * k * n..(mb[i] + 1) * k * n], &mut ga[ma[i] * m * k..(ma[i] + 1) * m * k]);
                gemm_tn_acc(m, k, n, &a.data()[ma[i] * m * k..(ma[i] + 1) * m * k], gi, &mut gb[mb[i] * k * n..(mb[i] + 1) * k * n]);
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), ga)), Some(Tensor::from_parts(b.shape().to_vec(), gb))]
        })
    }

    /// Affine map on the last axis: `x · w + bias` with `w: [k, n]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let k = x.last_dim();
        if w.rank() != 2 || w.shape()[0] != k {
            return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", x.shape(), w.shape())));
        }
        let n = w.shape()[1];
        let bias_val = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [n] {
                    return Err(Error::shape("linear", format!("bias {:?} vs width {n}", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        let rows = x.numel() / k;
        let mut out = vec![T::zero(); rows * n];
        if let Some(bv) = &bias_val {
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_acc(rows, k, n, x.data(), w.data(), &mut out);
        self.tape.count_flops(2 * (rows * k * n) as u64);
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = n;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.push("linear", Tensor::from_parts(out_shape, out), &parents, move |g, _| {
            let gd = g.data();
            let mut gx = vec![T::zero(); rows * k];
            gemm_nt_acc(rows, n, k, gd, w.data(), &mut gx);
            let mut gw = vec![T::zero(); k * n];
            gemm_tn_acc(rows, k, n, x.data(), gd, &mut gw);
            let mut grads = vec![
                Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                Some(Tensor::from_parts(vec![k, n], gw)),
            ];
            if has_bias {
                let mut gb = vec![T::zero(); n];
                for row in gd.chunks_exact(n) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads.push(Some(Tensor::from_parts(vec![n], gb)));
            }
            grads
        })
    }
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = perm.len();
    let total = x.numel();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        data.push(x.data()[cur]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn slice_tensor<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn pad_tensor<T: Real>(x: &Tensor<T>, axis: usize, before: usize, after: usize) -> Tensor<T> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    let new_extent = extent + before + after;
    let mut data = vec![T::zero(); outer * new_extent * inner];
    for o in 0..outer {
        let dst = (o * new_extent + before) * inner;
        data[dst..dst + extent * inner].copy_from_slice(&x.data()[o * extent * inner..(o + 1) * extent * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = new_extent;
    Tensor::from_parts(out_shape, data)
}
