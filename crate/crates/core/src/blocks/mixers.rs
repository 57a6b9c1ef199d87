use std::rc::Rc;

use super::window::{WindowLayout, WindowMeta};
use super::BlockParams;
use crate::autodiff::{Var, ZERO_ROW};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Builder, ChannelMlp, Ctx, LayerNorm, Linear, ParamId};
use crate::scalar::Real;

/// Two-layer perceptron across the `T` positions of a window, shared by
/// all windows and channels: `W₂ gelu(W₁ x + b₁) + b₂`.
#[derive(Clone, Debug)]
pub struct TokenMix {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub tokens: usize,
}

impl TokenMix {
    /// `zero_out` zero-initialises the second layer.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, tokens: usize, zero_out: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let w1 = s.uniform("w1", vec![tokens, tokens], tokens)?;
        let b1 = s.zeros("b1", vec![tokens, 1])?;
        let w2 = if zero_out { s.zeros("w2", vec![tokens, tokens])? } else { s.uniform("w2", vec![tokens, tokens], tokens)? };
        let b2 = s.zeros("b2", vec![tokens, 1])?;
        Ok(Self { w1, b1, w2, b2, tokens })
    }

    /// Mixes `[W, T, C]` (window-major) or `[T, W, C]` (position-major) tiles.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, windows: Var<'t, T>, layout: WindowLayout) -> Result<Var<'t, T>> {
        let shape = windows.shape();
        let t_axis = match layout {
            WindowLayout::WindowMajor => 1,
            WindowLayout::PositionMajor => 0,
        };
        if shape.len() != 3 || shape[t_axis] != self.tokens {
            return Err(Error::shape("token_mix", format!("{shape:?} with {} positions per window", self.tokens)));
        }
        let x = match layout {
            WindowLayout::WindowMajor => windows,
            WindowLayout::PositionMajor => windows.reshape(vec![self.tokens, shape[1] * shape[2]])?,
        };
        let h = ctx.p(self.w1).matmul(x)?.add(ctx.p(self.b1))?.gelu()?;
        let y = ctx.p(self.w2).matmul(h)?.add(ctx.p(self.b2))?;
        y.reshape(shape)
    }
}

fn check_width<T: Real>(op: &'static str, x: Var<'_, T>, width: usize) -> Result<()> {
    if x.shape().last() != Some(&width) {
        return Err(Error::shape(op, format!("input {:?} but block width {width}", x.shape())));
    }
    Ok(())
}

/// Correlation-aware multi-window MLP block.
///
/// 1. `x = LN(W_in [f, side])`
/// 2. per window size: partition, token mix, merge (parallel branches)
/// 3. `y = f + W_fuse [branches...]`, `W_fuse` zero-initialised
/// 4. `y + MLP(LN(y))`
pub struct CmwMlpBlock {
    pub in_proj: Linear,
    pub in_norm: LayerNorm,
    /// `(window size, shift, mixer)` in fixed branch order.
    pub branches: Vec<(usize, usize, TokenMix)>,
    pub fuse: Linear,
    pub mlp: ChannelMlp,
    pub width: usize,
    pub side_channels: usize,
}

impl CmwMlpBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, p: &BlockParams<'_>) -> Result<Self> {
        let c = p.width;
        let in_proj = Linear::new(b, "in_proj", c + p.side_channels, c)?;
        let in_norm = LayerNorm::new(b, "in_norm", c)?;
        let mut branches = Vec::new();
        for &s in p.spec.sizes() {
            let mix = TokenMix::new(b, &format!("mix{s}"), s.pow(p.rank as u32), false)?;
            branches.push((s, p.spec.shift_for(p.index, s), mix));
        }
        let fuse = Linear::zeroed(b, "fuse", c * branches.len(), c)?;
        let mlp = ChannelMlp::new(b, "mlp", c, c * p.mlp_ratio)?;
        Ok(Self { in_proj, in_norm, branches, fuse, mlp, width: c, side_channels: p.side_channels })
    }

    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        f: Var<'t, T>,
        grid: &Grid,
        side: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        check_width("cmw_mlp_block", f, self.width)?;
        let got = side.map_or(0, |s| *s.shape().last().expect("rank >= 1"));
        if got != self.side_channels {
            return Err(Error::shape("cmw_mlp_block", format!("{got} side channels, block built for {}", self.side_channels)));
        }
        let inp = match side {
            Some(s) => Var::concat(&[f, s], grid.rank())?,
            None => f,
        };
        let x = self.in_norm.forward(ctx, self.in_proj.forward(ctx, inp)?)?;
        let d = grid.rank();
        let mut outs = Vec::with_capacity(self.branches.len());
        for (size, shift, mix) in &self.branches {
            let meta = WindowMeta::new(grid, &vec![*size; d], &vec![*shift; d], WindowLayout::PositionMajor)?;
            let mixed = mix.forward(ctx, meta.partition(x)?, WindowLayout::PositionMajor)?;
            outs.push(meta.merge(mixed)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, d)? };
        let y = f.add(self.fuse.forward(ctx, cat)?)?;
        self.mlp.forward(ctx, y)
    }
}

/// Single-window token-mixing MLP: `x + merge(mix(partition(LN x)))`.
pub struct WindowMixerBlock {
    pub norm: LayerNorm,
    pub mix: TokenMix,
    pub size: usize,
    pub shift: usize,
    pub mlp: ChannelMlp,
    pub width: usize,
}

impl WindowMixerBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, p: &BlockParams<'_>) -> Result<Self> {
        let size = p.spec.largest();
        Ok(Self {
            norm: LayerNorm::new(b, "norm", p.width)?,
            mix: TokenMix::new(b, "mix", size.pow(p.rank as u32), true)?,
            size,
            shift: p.spec.shift_for(p.index, size),
            mlp: ChannelMlp::new(b, "mlp", p.width, p.width * p.mlp_ratio)?,
            width: p.width,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>, grid: &Grid) -> Result<Var<'t, T>> {
        check_width("window_mixer_block", x, self.width)?;
        let d = grid.rank();
        let meta = WindowMeta::new(grid, &vec![self.size; d], &vec![self.shift; d], WindowLayout::PositionMajor)?;
        let h = self.norm.forward(ctx, x)?;
        let mixed = self.mix.forward(ctx, meta.partition(h)?, WindowLayout::PositionMajor)?;
        let y = x.add(meta.merge(mixed)?)?;
        self.mlp.forward(ctx, y)
    }
}

/// Row index table moving every voxel by `shift` along `axis`
/// (`out(p) = in(p - shift·e_axis)`, zeros where that leaves the grid).
fn shift_index(grid: &Grid, axis: usize, shift: isize) -> Vec<u32> {
    let mut c = vec![0; grid.rank()];
    let mut delta = vec![0isize; grid.rank()];
    delta[axis] = -shift;
    (0..grid.numel())
        .map(|p| {
            grid.coords_into(p, &mut c);
            grid.shifted(&c, &delta).map_or(ZERO_ROW, |q| q as u32)
        })
        .collect()
}

/// Axis-shifted channel-group MLP: channels split in three groups moved by
/// −1, 0, +1 voxels along each axis, one linear map per axis, summed,
/// GELU, then a zero-initialised output projection.
pub struct ShiftMlpBlock {
    pub norm: LayerNorm,
    pub axis_proj: Vec<Linear>,
    pub out: Linear,
    pub mlp: ChannelMlp,
    pub width: usize,
}

impl ShiftMlpBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, p: &BlockParams<'_>) -> Result<Self> {
        let c = p.width;
        let axis_proj = (0..p.rank).map(|a| Linear::new(b, &format!("axis{a}"), c, c)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            norm: LayerNorm::new(b, "norm", c)?,
            axis_proj,
            out: Linear::zeroed(b, "out", c, c)?,
            mlp: ChannelMlp::new(b, "mlp", c, c * p.mlp_ratio)?,
            width: c,
        })
    }

    /// Channel group boundaries for the shifts −1, 0, +1.
    fn groups(&self) -> [(isize, usize, usize); 3] {
        let g = self.width / 3;
        [(-1, 0, g), (0, g, g), (1, 2 * g, self.width - 2 * g)]
    }

    fn shifted<'t, T: Real>(&self, h: Var<'t, T>, grid: &Grid, axis: usize) -> Result<Var<'t, T>> {
        let d = grid.rank();
        let mut parts = Vec::new();
        for (shift, start, len) in self.groups() {
            if len == 0 {
                continue;
            }
            let part = h.slice(d, start, len)?;
            let part = if shift == 0 {
                part
            } else {
                part.gather_rows(Rc::new(shift_index(grid, axis, shift)), grid.with_channels(len))?
            };
            parts.push(part);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Var::concat(&parts, d)
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>, grid: &Grid) -> Result<Var<'t, T>> {
        check_width("shift_mlp_block", x, self.width)?;
        let h = self.norm.forward(ctx, x)?;
        let mut z: Option<Var<'t, T>> = None;
        for (axis, proj) in self.axis_proj.iter().enumerate() {
            let term = proj.forward(ctx, self.shifted(h, grid, axis)?)?;
            z = Some(match z {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
        let z = z.expect("rank >= 2").gelu()?;
        let y = x.add(self.out.forward(ctx, z)?)?;
        self.mlp.forward(ctx, y)
    }
}
