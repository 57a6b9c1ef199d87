use std::rc::Rc;

use super::BlockParams;
use crate::autodiff::{Var, ZERO_ROW};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Builder, ChannelMlp, Ctx, Linear};
use crate::scalar::Real;

/// For every voxel and kernel offset (lexicographic, first axis slowest),
/// the source row or [`ZERO_ROW`] ("same" zero padding).
pub fn im2col_index(grid: &Grid, kernel: &[usize]) -> Result<Vec<u32>> {
    if kernel.len() != grid.rank() || kernel.iter().any(|&k| k % 2 == 0) {
        return Err(Error::shape("conv", format!("kernel {kernel:?} must be odd per axis on rank {}", grid.rank())));
    }
    let kgrid = Grid::new(kernel.to_vec())?;
    let offsets: Vec<Vec<isize>> = (0..kgrid.numel())
        .map(|i| kgrid.coords(i).iter().zip(kernel).map(|(&c, &k)| c as isize - (k / 2) as isize).collect())
        .collect();
    let mut c = vec![0; grid.rank()];
    let mut index = Vec::with_capacity(grid.numel() * offsets.len());
    for p in 0..grid.numel() {
        grid.coords_into(p, &mut c);
        for o in &offsets {
            index.push(grid.shifted(&c, o).map_or(ZERO_ROW, |q| q as u32));
        }
    }
    Ok(index)
}

/// Cross-correlation of `[grid..., C]` with `weight: [K·C, C_out]`
/// (rows ordered kernel offset major, channel minor) plus `bias`.
pub fn conv_nd<'t, T: Real>(
    x: Var<'t, T>,
    grid: &Grid,
    kernel: &[usize],
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let c = *x.shape().last().expect("rank >= 1");
    let kvol: usize = kernel.iter().product();
    let index = im2col_index(grid, kernel)?;
    let cols = x.gather_rows(Rc::new(index), vec![grid.numel(), kvol, c])?;
    cols.reshape(grid.with_channels(kvol * c))?.linear(weight, bias)
}

/// `x + gelu(conv(x))` with a zero-initialised kernel, then a channel MLP.
pub struct ConvBlock {
    pub conv: Linear,
    pub kernel: usize,
    pub mlp: ChannelMlp,
    pub width: usize,
    rank: usize,
}

impl ConvBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, p: &BlockParams<'_>) -> Result<Self> {
        if p.kernel % 2 == 0 {
            return Err(Error::invalid(format!("conv kernel {} must be odd", p.kernel)));
        }
        let kvol = p.kernel.pow(p.rank as u32);
        Ok(Self {
            conv: Linear::zeroed(b, "conv", kvol * p.width, p.width)?,
            kernel: p.kernel,
            mlp: ChannelMlp::new(b, "mlp", p.width, p.width * p.mlp_ratio)?,
            width: p.width,
            rank: p.rank,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>, grid: &Grid) -> Result<Var<'t, T>> {
        if x.shape().last() != Some(&self.width) || grid.rank() != self.rank {
            return Err(Error::shape("conv_block", format!("input {:?} but block width {}", x.shape(), self.width)));
        }
        let k = vec![self.kernel; grid.rank()];
        let h = conv_nd(x, grid, &k, ctx.p(self.conv.weight), self.conv.bias.map(|b| ctx.p(b)))?.gelu()?;
        let y = x.add(h)?;
        self.mlp.forward(ctx, y)
    }
}
