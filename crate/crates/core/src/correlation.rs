//! Local correlation volumes between feature maps.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Ctx, Linear};
use crate::scalar::Real;
use crate::warp::upsample_var;

pub const DEFAULT_RADIUS: usize = 2;
pub const CORR_EPS: f64 = 1e-8;

/// Channel count of a radius-`radius` volume on a rank-`rank` grid.
pub fn correlation_channels(rank: usize, radius: usize) -> usize {
    (2 * radius + 1).pow(rank as u32)
}

/// `⟨a(p), b(p+δ)⟩` for every `δ` in the radius cube, optionally divided by
/// `‖a(p)‖·‖b(p+δ)‖ + eps`. Out-of-grid partners read zeros.
pub fn local_correlation<'t, T: Real>(
    a: Var<'t, T>,
    b: Var<'t, T>,
    grid: &Grid,
    radius: usize,
    normalize: bool,
) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("local_correlation", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let raw = a.shift_products(b, grid, radius)?;
    if !normalize {
        return Ok(raw);
    }
    let rank = grid.rank();
    let na = norms(a, grid)?;
    let nb = norms(b, grid)?;
    let denom = na.shift_products(nb, grid, radius)?.add_scalar(T::lit(CORR_EPS))?;
    raw.div(denom)?.reshape(grid.with_channels(correlation_channels(rank, radius)))
}

fn norms<'t, T: Real>(x: Var<'t, T>, grid: &Grid) -> Result<Var<'t, T>> {
    x.square()?
        .sum_axes_keep(&[grid.rank()])?
        .add_scalar(T::lit(CORR_EPS * CORR_EPS))?
        .sqrt()
}

/// Upsamples `context` (on `coarse`) to `fine`, lifts it to the width of
/// `current` when `lift` is given, and correlates the two.
/// Returns `(correlation, upsampled_context)`.
pub fn step_context_correlation<'t, T: Real>(
    ctx: &Ctx<'t, '_, T>,
    current: Var<'t, T>,
    context: Var<'t, T>,
    coarse: &Grid,
    fine: &Grid,
    lift: Option<&Linear>,
    radius: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let up = upsample_var(context, coarse, fine)?;
    let up = match lift {
        Some(l) => l.forward(ctx, up)?,
        None => up,
    };
    if up.shape() != current.shape() {
        return Err(Error::shape(
            "step_context_correlation",
            format!("context {:?} vs current {:?}", up.shape(), current.shape()),
        ));
    }
    let corr = local_correlation(current, up, fine, radius, true)?;
    Ok((corr, up))
}
