use super::window::{WindowLayout, WindowMeta};
use super::BlockParams;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Builder, ChannelMlp, Ctx, LayerNorm, Linear};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Large negative score added to padded key positions.
const MASKED: f64 = -1e9;

/// Multi-head self-attention within windows (or over the whole map),
/// `x + W_o attn(LN x)` with `W_o` zero-initialised, then a channel MLP.
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub mlp: ChannelMlp,
    /// `None` means global attention.
    pub window: Option<usize>,
    pub shift: usize,
    pub heads: usize,
    pub width: usize,
}

impl AttentionBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, p: &BlockParams<'_>, window: Option<usize>) -> Result<Self> {
        let c = p.width;
        if p.heads == 0 || c % p.heads != 0 {
            return Err(Error::invalid(format!("width {c} is not divisible by {} heads", p.heads)));
        }
        Ok(Self {
            norm: LayerNorm::new(b, "norm", c)?,
            qkv: Linear::new(b, "qkv", c, 3 * c)?,
            out: Linear::zeroed(b, "out", c, c)?,
            mlp: ChannelMlp::new(b, "mlp", c, c * p.mlp_ratio)?,
            window,
            shift: window.map_or(0, |w| p.spec.shift_for(p.index, w)),
            heads: p.heads,
            width: c,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>, grid: &Grid) -> Result<Var<'t, T>> {
        if x.shape().last() != Some(&self.width) {
            return Err(Error::shape("attention_block", format!("input {:?} but block width {}", x.shape(), self.width)));
        }
        let qkv = self.qkv.forward(ctx, self.norm.forward(ctx, x)?)?;
        let attended = match self.window {
            Some(w) => {
                let d = grid.rank();
                let meta = WindowMeta::new(grid, &vec![w; d], &vec![self.shift; d], WindowLayout::WindowMajor)?;
                let mask = padding_mask::<T>(&meta);
                let tiles = meta.partition(qkv)?;
                let mixed = multi_head(ctx, tiles, self.heads, mask)?;
                meta.merge(mixed)?
            }
            None => {
                let n = grid.numel();
                let tiles = qkv.reshape(vec![1, n, 3 * self.width])?;
                multi_head(ctx, tiles, self.heads, None)?.reshape(grid.with_channels(self.width))?
            }
        };
        let y = x.add(self.out.forward(ctx, attended)?)?;
        self.mlp.forward(ctx, y)
    }
}

/// `[W, 1, 1, T]` additive mask hiding padded positions, or `None` when
/// the tiling needs no padding.
fn padding_mask<T: Real>(meta: &WindowMeta) -> Option<Tensor<T>> {
    if meta.pad_low.iter().chain(&meta.pad_high).all(|&p| p == 0) {
        return None;
    }
    let (nw, t) = (meta.num_windows(), meta.window_volume());
    // partition a map of ones: padded rows come out as zeros
    let tape = crate::autodiff::Tape::<T>::new();
    let ones = tape.constant(Tensor::ones(meta.grid.with_channels(1)));
    let tiles = meta.partition(ones).expect("shape built from meta").value();
    let data = tiles.data().iter().map(|&v| if v == T::zero() { T::lit(MASKED) } else { T::zero() }).collect();
    Some(Tensor::new(vec![nw, 1, 1, t], data).expect("window count matches"))
}

/// Scaled dot-product attention on `[W, T, 3C]` tiles, returns `[W, T, C]`.
pub(crate) fn multi_head<'t, T: Real>(
    ctx: &Ctx<'t, '_, T>,
    tiles: Var<'t, T>,
    heads: usize,
    mask: Option<Tensor<T>>,
) -> Result<Var<'t, T>> {
    let s = tiles.shape();
    let (w, t, c3) = (s[0], s[1], s[2]);
    let c = c3 / 3;
    let dh = c / heads;
    // [W, T, 3, h, dh] -> [3, W, h, T, dh]
    let split = tiles.reshape(vec![w, t, 3, heads, dh])?.permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Var<'t, T>> { split.slice(0, i, 1)?.reshape(vec![w, heads, t, dh]) };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut scores = q.matmul(k.permute(&[0, 1, 3, 2])?)?.scale(scale)?;
    if let Some(m) = mask {
        scores = scores.add(ctx.constant(m))?;
    }
    let attn = scores.softmax_last()?;
    attn.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(vec![w, t, c])
}
