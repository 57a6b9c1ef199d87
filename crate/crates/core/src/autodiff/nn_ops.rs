//! Fused normalisation, softmax, and row-gather ops.

use std::rc::Rc;

use super::tape::Var;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Row index meaning "emit a zero row" in [`Var::gather_rows`].
pub const ZERO_ROW: u32 = u32::MAX;

impl<'t, T: Real> Var<'t, T> {
    /// Layer normalisation over the last axis followed by `gamma * x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = x.last_dim();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("layer_norm", format!("affine {:?}/{:?} vs width {c}", gv.shape(), bv.shape())));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm: eps must be positive"));
        }
        let rows = x.numel() / c;
        let inv_c = T::one() / T::from_usize_lossy(c);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        self.tape.push("layer_norm", Tensor::from_parts(shape.clone(), out), &[self, gamma, beta], move |g, _| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            let mut gh = vec![T::zero(); c];
            for r in 0..rows {
                let (mut mean_gh, mut mean_ghh) = (T::zero(), T::zero());
                for j in 0..c {
                    let i = r * c + j;
                    ggamma[j] += gd[i] * xhat[i];
                    gbeta[j] += gd[i];
                    gh[j] = gd[i] * gv.data()[j];
                    mean_gh += gh[j];
                    mean_ghh += gh[j] * xhat[i];
                }
                mean_gh *= inv_c;
                mean_ghh *= inv_c;
                for j in 0..c {
                    let i = r * c + j;
                    gx[i] = inv_std[r] * (gh[j] - mean_gh - xhat[i] * mean_ghh);
                }
            }
            vec![
                Some(Tensor::from_parts(shape.clone(), gx)),
                Some(Tensor::from_parts(vec![c], ggamma)),
                Some(Tensor::from_parts(vec![c], gbeta)),
            ]
        })
    }

    /// Softmax over the last axis (max-shifted).
    pub fn softmax_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = x.last_dim();
        let mut out = vec![T::zero(); x.numel()];
        for (orow, row) in out.chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        self.tape.push("softmax", Tensor::from_parts(x.shape().to_vec(), out), &[self], move |g, y| {
            let mut gx = vec![T::zero(); g.numel()];
            for ((gxr, gr), yr) in gx.chunks_exact_mut(c).zip(g.data().chunks_exact(c)).zip(y.data().chunks_exact(c)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        })
    }

    /// Euclidean norm over the last axis (the axis is dropped). The reverse
    /// rule uses the zero subgradient where the norm vanishes.
    pub fn norm_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = x.last_dim();
        let out: Vec<T> = x.data().chunks_exact(c).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let mut shape = x.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        self.tape.push("norm", Tensor::from_parts(shape, out), &[self], move |g, n| {
            let mut gx = vec![T::zero(); x.numel()];
            for (i, (gr, row)) in gx.chunks_exact_mut(c).zip(x.data().chunks_exact(c)).enumerate() {
                let nv = n.data()[i];
                if nv > T::zero() {
                    let s = g.data()[i] / nv;
                    for (o, &v) in gr.iter_mut().zip(row) {
                        *o = s * v;
                    }
                }
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
        })
    }

    /// Gathers rows of the `[rows, last_dim]` view into a tensor of `out_shape`.
    /// [`ZERO_ROW`] entries produce zeros; the reverse rule scatter-adds.
    pub fn gather_rows(self, index: Rc<Vec<u32>>, out_shape: Vec<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = x.last_dim();
        let rows = x.numel() / c;
        if out_shape.last() != Some(&c) || out_shape.iter().product::<usize>() != index.len() * c {
            return Err(Error::shape("gather_rows", format!("{} rows of width {c} into {out_shape:?}", index.len())));
        }
        if index.iter().any(|&i| i != ZERO_ROW && i as usize >= rows) {
            return Err(Error::shape("gather_rows", format!("row index out of range (rows = {rows})")));
        }
        let mut out = vec![T::zero(); index.len() * c];
        for (orow, &i) in out.chunks_exact_mut(c).zip(index.iter()) {
            if i != ZERO_ROW {
                let i = i as usize;
                orow.copy_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
        }
        let in_shape = x.shape().to_vec();
        self.tape.push("gather_rows", Tensor::from_parts(out_shape, out), &[self], move |g, _| {
            let mut gx = vec![T::zero(); rows * c];
            for (grow, &i) in g.data().chunks_exact(c).zip(index.iter()) {
                if i != ZERO_ROW {
                    let i = i as usize;
                    for (a, &b) in gx[i * c..(i + 1) * c].iter_mut().zip(grow) {
                        *a += b;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        })
    }
}
