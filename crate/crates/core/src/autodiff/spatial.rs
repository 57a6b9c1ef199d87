//! Differentiable ops that need the voxel-grid structure of their operands.

use std::rc::Rc;

use super::tape::Var;
use crate::error::{Error, Result};
use crate::grid::{displacements, Grid};
use crate::scalar::Real;
use crate::tensor::Tensor;

const NO_NEIGHBOR: u32 = u32::MAX;

fn check_on_grid<T: Real>(op: &'static str, t: &Tensor<T>, grid: &Grid) -> Result<usize> {
    let s = t.shape();
    if s.len() != grid.rank() + 1 || &s[..grid.rank()] != grid.extents() {
        return Err(Error::shape(op, format!("tensor {s:?} is not [{:?}, channels]", grid.extents())));
    }
    Ok(s[grid.rank()])
}

/// Neighbour table: entry `p * K + k` is the voxel at `p + δ_k`, or [`NO_NEIGHBOR`].
fn neighbour_table(grid: &Grid, radius: usize) -> Vec<u32> {
    let deltas = displacements(grid.rank(), radius);
    let mut table = Vec::with_capacity(grid.numel() * deltas.len());
    let mut coords = vec![0; grid.rank()];
    for p in 0..grid.numel() {
        grid.coords_into(p, &mut coords);
        for d in &deltas {
            table.push(grid.shifted(&coords, d).map_or(NO_NEIGHBOR, |q| q as u32));
        }
    }
    table
}

impl<'t, T: Real> Var<'t, T> {
    /// Dot products `⟨a(p), b(p + δ)⟩` for every displacement `δ` in the
    /// radius-`radius` cube; out-of-grid partners contribute zero.
    /// Output shape `[spatial..., (2r+1)^D]`.
    pub fn shift_products(self, b: Var<'t, T>, grid: &Grid, radius: usize) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), b.value());
        let c = check_on_grid("shift_products", &av, grid)?;
        if av.shape() != bv.shape() {
            return Err(Error::shape("shift_products", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let k = (2 * radius + 1).pow(grid.rank() as u32);
        let n = grid.numel();
        let table = Rc::new(neighbour_table(grid, radius));
        let mut out = vec![T::zero(); n * k];
        let (ad, bd) = (av.data(), bv.data());
        for p in 0..n {
            let arow = &ad[p * c..(p + 1) * c];
            for j in 0..k {
                let q = table[p * k + j];
                if q != NO_NEIGHBOR {
                    let q = q as usize;
                    let brow = &bd[q * c..(q + 1) * c];
                    out[p * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        let shape = av.shape().to_vec();
        self.tape.push("shift_products", Tensor::from_parts(grid.with_channels(k), out), &[self, b], move |g, _| {
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            let mut ga = vec![T::zero(); n * c];
            let mut gb = vec![T::zero(); n * c];
            for p in 0..n {
                for j in 0..k {
                    let q = table[p * k + j];
                    if q == NO_NEIGHBOR {
                        continue;
                    }
                    let q = q as usize;
                    let gv = gd[p * k + j];
                    for ch in 0..c {
                        ga[p * c + ch] += gv * bd[q * c + ch];
                        gb[q * c + ch] += gv * ad[p * c + ch];
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(shape.clone(), ga)),
                Some(Tensor::from_parts(shape.clone(), gb)),
            ]
        })
    }

    /// Multilinear interpolation of `self` (`[src_grid..., C]`) at continuous
    /// voxel coordinates `coords` (`[out..., D]`), clamped to the grid.
    /// Differentiable with respect to both the source and the coordinates.
    pub fn sample_linear(self, src_grid: &Grid, coords: Var<'t, T>) -> Result<Var<'t, T>> {
        let src = self.value();
        let c = check_on_grid("sample_linear", &src, src_grid)?;
        let cv = coords.value();
        let d = src_grid.rank();
        if cv.last_dim() != d {
            return Err(Error::shape("sample_linear", format!("coords {:?} need last axis {d}", cv.shape())));
        }
        let m = cv.numel() / d;
        let corners = 1usize << d;
        let ext = src_grid.extents().to_vec();
        let strides = src_grid.strides().to_vec();
        // per point, per axis: base index, fraction, derivative mask
        let mut base = vec![0usize; m * d];
        let mut frac = vec![T::zero(); m * d];
        let mut live = vec![false; m * d];
        for i in 0..m {
            for ax in 0..d {
                let x = cv.data()[i * d + ax];
                let hi = T::from_usize_lossy(ext[ax] - 1);
                let xc = x.max(T::zero()).min(hi);
                let (b, f) = if ext[ax] == 1 {
                    (0, T::zero())
                } else {
                    let fl = xc.floor().to_usize().unwrap_or(0).min(ext[ax] - 2);
                    (fl, xc - T::from_usize_lossy(fl))
                };
                base[i * d + ax] = b;
                frac[i * d + ax] = f;
                live[i * d + ax] = ext[ax] > 1 && x >= T::zero() && x <= hi;
            }
        }
        let corner_of = move |i: usize, corner: usize, base: &[usize], frac: &[T]| -> (usize, T) {
            let mut off = 0;
            let mut w = T::one();
            for ax in 0..d {
                let bit = (corner >> (d - 1 - ax)) & 1;
                let f = frac[i * d + ax];
                let idx = (base[i * d + ax] + bit).min(ext[ax] - 1);
                off += idx * strides[ax];
                w *= if bit == 1 { f } else { T::one() - f };
            }
            (off, w)
        };
        let mut out = vec![T::zero(); m * c];
        for i in 0..m {
            let orow = &mut out[i * c..(i + 1) * c];
            for corner in 0..corners {
                let (off, w) = corner_of(i, corner, &base, &frac);
                let srow = &src.data()[off * c..(off + 1) * c];
                for (o, &s) in orow.iter_mut().zip(srow) {
                    *o += w * s;
                }
            }
        }
        let mut out_shape = cv.shape()[..cv.rank() - 1].to_vec();
        out_shape.push(c);
        let src_shape = src.shape().to_vec();
        let coord_shape = cv.shape().to_vec();
        self.tape.push("sample_linear", Tensor::from_parts(out_shape, out), &[self, coords], move |g, _| {
            let gd = g.data();
            let mut gsrc = vec![T::zero(); src.numel()];
            let mut gcoord = vec![T::zero(); m * d];
            let mut dot = vec![T::zero(); corners];
            for i in 0..m {
                let grow = &gd[i * c..(i + 1) * c];
                for (corner, dc) in dot.iter_mut().enumerate() {
                    let (off, w) = corner_of(i, corner, &base, &frac);
                    let srow = &src.data()[off * c..(off + 1) * c];
                    let mut acc = T::zero();
                    for ((gs, &s), &gv) in gsrc[off * c..(off + 1) * c].iter_mut().zip(srow).zip(grow) {
                        *gs += w * gv;
                        acc += gv * s;
                    }
                    *dc = acc;
                }
                for ax in 0..d {
                    if !live[i * d + ax] {
                        continue;
                    }
                    let mut acc = T::zero();
                    for (corner, &dc) in dot.iter().enumerate() {
                        let mut w = T::one();
                        for bx in 0..d {
                            let bit = (corner >> (d - 1 - bx)) & 1;
                            let f = frac[i * d + bx];
                            w *= if bx == ax {
                                if bit == 1 { T::one() } else { -T::one() }
                            } else if bit == 1 {
                                f
                            } else {
                                T::one() - f
                            };
                        }
                        acc += w * dc;
                    }
                    gcoord[i * d + ax] = acc;
                }
            }
            vec![
                Some(Tensor::from_parts(src_shape.clone(), gsrc)),
                Some(Tensor::from_parts(coord_shape.clone(), gcoord)),
            ]
        })
    }

    /// Sum over the clipped cube `[p - r, p + r]` around every voxel, per channel.
    pub fn box_sum(self, grid: &Grid, radius: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        check_on_grid("box_sum", &x, grid)?;
        let out = box_sum_tensor(&x, grid, radius);
        let grid = grid.clone();
        // the clipped box operator is symmetric, so it is its own adjoint
        self.tape.push("box_sum", out, &[self], move |g, _| vec![Some(box_sum_tensor(g, &grid, radius))])
    }
}

pub fn box_sum_tensor<T: Real>(x: &Tensor<T>, grid: &Grid, radius: usize) -> Tensor<T> {
    let c = x.last_dim();
    let mut cur = x.data().to_vec();
    let mut prefix = Vec::new();
    for ax in 0..grid.rank() {
        let n = grid.extents()[ax];
        let stride = grid.strides()[ax] * c;
        let outer = grid.numel() * c / (n * stride);
        let mut next = vec![T::zero(); cur.len()];
        for o in 0..outer {
            for s in 0..stride {
                let start = o * n * stride + s;
                prefix.clear();
                prefix.push(T::zero());
                let mut acc = T::zero();
                for i in 0..n {
                    acc += cur[start + i * stride];
                    prefix.push(acc);
                }
                for i in 0..n {
                    let lo = i.saturating_sub(radius);
                    let hi = (i + radius).min(n - 1) + 1;
                    next[start + i * stride] = prefix[hi] - prefix[lo];
                }
            }
        }
        cur = next;
    }
    Tensor::from_parts(x.shape().to_vec(), cur)
}
