//! Raw slice kernels shared by the differentiable ops.

use crate::scalar::Real;
use crate::tensor::{strides, Tensor};

/// `out += a · b` for row-major `a: m×k`, `b: k×n`, `out: m×n`.
pub(crate) fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    T::gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out, (n as isize, 1));
}

/// `out += aᵀ · b` for `a: m×k`, `b: m×n`, `out: k×n`.
pub(crate) fn gemm_tn_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    T::gemm_strided(k, m, n, a, (1, k as isize), b, (n as isize, 1), out, (n as isize, 1));
}

/// `out += a · bᵀ` for `a: m×n`, `b: k×n`, `out: m×k`.
pub(crate) fn gemm_nt_acc<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    T::gemm_strided(m, n, k, a, (n as isize, 1), b, (1, n as isize), out, (k as isize, 1));
}

#[cfg(test)]
pub(crate) fn transpose2<T: Real>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Shape produced by trailing-axis broadcasting, or `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every linear index of `out`, the linear index of the broadcast source.
pub(crate) fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..rank {
        if i + src.len() >= rank {
            let si = i + src.len() - rank;
            eff[i] = if src[si] == 1 { 0 } else { src_strides[si] };
        }
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sums `g` (shaped like the broadcast output) back onto `src_shape`.
pub(crate) fn reduce_to<T: Real>(g: &Tensor<T>, src_shape: &[usize]) -> Tensor<T> {
    if g.shape() == src_shape {
        return g.clone();
    }
    let map = broadcast_map(src_shape, g.shape());
    let mut out = vec![T::zero(); src_shape.iter().product()];
    for (&v, &si) in g.data().iter().zip(&map) {
        out[si] += v;
    }
    Tensor::from_parts(src_shape.to_vec(), out)
}

/// Expands `src` onto `out_shape` by broadcasting.
pub(crate) fn expand<T: Real>(src: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
    if src.shape() == out_shape {
        return src.clone();
    }
    let map = broadcast_map(src.shape(), out_shape);
    let data = map.iter().map(|&i| src.data()[i]).collect();
    Tensor::from_parts(out_shape.to_vec(), data)
}
