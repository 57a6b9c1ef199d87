//! Registration objectives.

use crate::autodiff::{box_sum_tensor, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::volume::{DisplacementField, Volume};

/// Variance guard for local NCC, on the windowed-sum scale.
pub const NCC_EPS: f64 = 1e-5;

/// Default NCC window extent for a rank-`rank` image.
pub fn default_ncc_window(rank: usize) -> usize {
    if rank == 2 {
        9
    } else {
        7
    }
}

fn same_shape<T: Real>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `1 - mean local NCC` over clipped `window^D` neighbourhoods:
/// `ncc = cov / sqrt(var_a · var_b + eps)` with windowed sums, so flat
/// regions score 0.
pub fn ncc_loss<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>, grid: &Grid, window: usize, eps: f64) -> Result<Var<'t, T>> {
    same_shape("ncc_loss", a, b)?;
    if window % 2 == 0 {
        return Err(Error::invalid(format!("ncc window {window} must be odd")));
    }
    let r = window / 2;
    let tape = a.tape();
    let ones = Tensor::ones(a.shape());
    let inv_count = tape.constant(box_sum_tensor(&ones, grid, r).map(|n| T::one() / n));
    let sa = a.box_sum(grid, r)?;
    let sb = b.box_sum(grid, r)?;
    let saa = a.square()?.box_sum(grid, r)?;
    let sbb = b.square()?.box_sum(grid, r)?;
    let sab = a.mul(b)?.box_sum(grid, r)?;
    let cross = sab.sub(sa.mul(sb)?.mul(inv_count)?)?;
    let var_a = saa.sub(sa.square()?.mul(inv_count)?)?.relu()?;
    let var_b = sbb.sub(sb.square()?.mul(inv_count)?)?.relu()?;
    let ncc = cross.div(var_a.mul(var_b)?.add_scalar(T::lit(eps))?.sqrt()?)?;
    ncc.mean_all()?.neg()?.add_scalar(T::one())
}

/// Sum over axes of the mean squared forward difference (over voxel pairs
/// and components).
pub fn smoothness_loss<'t, T: Real>(field: Var<'t, T>, grid: &Grid) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for ax in 0..grid.rank() {
        let n = grid.extents()[ax];
        if n < 2 {
            return Err(Error::shape("smoothness_loss", format!("extent {n} on axis {ax}")));
        }
        let diff = field.slice(ax, 1, n - 1)?.sub(field.slice(ax, 0, n - 1)?)?;
        let term = diff.square()?.mean_all()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("rank >= 1"))
}

/// Mean Euclidean norm of the per-voxel vector difference.
pub fn supervised_epe_loss<'t, T: Real>(predicted: Var<'t, T>, truth: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("supervised_epe_loss", predicted, truth)?;
    predicted.sub(truth)?.norm_last()?.mean_all()
}

/// Untracked NCC loss of two volumes.
pub fn ncc_value<T: Real>(a: &Volume<T>, b: &Volume<T>, window: usize) -> Result<f64> {
    if a.grid() != b.grid() {
        return Err(Error::shape("ncc_loss", "volumes on different grids"));
    }
    let tape = Tape::new();
    let l = ncc_loss(tape.constant(a.to_tensor()), tape.constant(b.to_tensor()), a.grid(), window, NCC_EPS)?;
    Ok(l.value().item().to_f64_lossy())
}

pub fn smoothness_value<T: Real>(field: &DisplacementField<T>) -> Result<f64> {
    let tape = Tape::new();
    let l = smoothness_loss(tape.constant(field.to_tensor()), field.grid())?;
    Ok(l.value().item().to_f64_lossy())
}

/// Mean endpoint error between two fields.
pub fn endpoint_error<T: Real>(predicted: &DisplacementField<T>, truth: &DisplacementField<T>) -> Result<f64> {
    if predicted.grid() != truth.grid() {
        return Err(Error::shape("endpoint_error", "fields on different grids"));
    }
    let d = predicted.rank();
    let total: f64 = predicted
        .data()
        .chunks_exact(d)
        .zip(truth.data().chunks_exact(d))
        .map(|(p, t)| p.iter().zip(t).map(|(&x, &y)| (x - y).to_f64_lossy().powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / predicted.grid().numel() as f64)
}
