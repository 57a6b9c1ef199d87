//! Dependency-modelling blocks and the hierarchical pyramid encoder.
//!
//! Every block is residual with zero-initialised output projections, so a
//! freshly built block is an exact identity map.

pub(crate) mod attention;
mod conv;
mod encoder;
mod mixers;
mod window;

use std::fmt;
use std::str::FromStr;

pub use attention::AttentionBlock;
pub use conv::{conv_nd, im2col_index, ConvBlock};
pub use encoder::{patch_index, EncoderConfig, FeaturePyramid, PyramidEncoder};
pub use mixers::{CmwMlpBlock, ShiftMlpBlock, TokenMix, WindowMixerBlock};
pub use window::{window_merge, window_partition, WindowLayout, WindowMeta};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Builder, Ctx};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    CmwMlp,
    WindowMixerMlp,
    ShiftMlp,
    WindowAttention,
    GlobalAttention,
    Conv,
}

impl BlockKind {
    pub const ALL: [BlockKind; 6] = [
        BlockKind::CmwMlp,
        BlockKind::WindowMixerMlp,
        BlockKind::ShiftMlp,
        BlockKind::WindowAttention,
        BlockKind::GlobalAttention,
        BlockKind::Conv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::CmwMlp => "cmw_mlp",
            BlockKind::WindowMixerMlp => "window_mixer_mlp",
            BlockKind::ShiftMlp => "shift_mlp",
            BlockKind::WindowAttention => "window_attention",
            BlockKind::GlobalAttention => "global_attention",
            BlockKind::Conv => "conv",
        }
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, BlockKind::CmwMlp | BlockKind::WindowMixerMlp | BlockKind::ShiftMlp)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown block kind {s:?} (expected one of {})", BlockKind::ALL.map(|k| k.name()).join(", ")))
    }
}

/// Window sizes for the multi-window branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    sizes: Vec<usize>,
    pub shift_alternation: bool,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { sizes: vec![3, 5, 7], shift_alternation: true }
    }
}

impl WindowSpec {
    pub fn new(sizes: Vec<usize>, shift_alternation: bool) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid("window sizes must be non-empty"));
        }
        if sizes.iter().any(|&s| s == 0 || s % 2 == 0) {
            return Err(Error::invalid(format!("window sizes {sizes:?} must be odd and positive")));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("window sizes {sizes:?} must be strictly increasing")));
        }
        Ok(Self { sizes, shift_alternation })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn largest(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    /// Per-axis origin shift of block `index` for window size `size`.
    pub fn shift_for(&self, index: usize, size: usize) -> usize {
        if self.shift_alternation && index % 2 == 1 {
            size / 2
        } else {
            0
        }
    }
}

/// Construction parameters shared by all block kinds.
#[derive(Clone, Debug)]
pub struct BlockParams<'a> {
    pub kind: BlockKind,
    pub rank: usize,
    pub width: usize,
    pub spec: &'a WindowSpec,
    /// Position within its stage; odd blocks use shifted windows.
    pub index: usize,
    /// Extra channels (correlations, context) fed to the CMW input projection.
    pub side_channels: usize,
    pub heads: usize,
    pub kernel: usize,
    /// Hidden width of the channel-MLP sub-layer as a multiple of `width`.
    pub mlp_ratio: usize,
}

impl<'a> BlockParams<'a> {
    pub fn new(kind: BlockKind, rank: usize, width: usize, spec: &'a WindowSpec) -> Self {
        Self { kind, rank, width, spec, index: 0, side_channels: 0, heads: 2, kernel: 3, mlp_ratio: 2 }
    }
}

/// One residual block of any kind.
pub enum Block {
    Cmw(CmwMlpBlock),
    Mixer(WindowMixerBlock),
    Shift(ShiftMlpBlock),
    Attention(AttentionBlock),
    Conv(ConvBlock),
}

impl Block {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, p: &BlockParams<'_>) -> Result<Self> {
        if !(2..=3).contains(&p.rank) || p.width == 0 {
            return Err(Error::invalid(format!("block needs rank 2 or 3 and positive width (rank {}, width {})", p.rank, p.width)));
        }
        let mut s = b.scope(name);
        Ok(match p.kind {
            BlockKind::CmwMlp => Block::Cmw(CmwMlpBlock::new(&mut s, p)?),
            BlockKind::WindowMixerMlp => Block::Mixer(WindowMixerBlock::new(&mut s, p)?),
            BlockKind::ShiftMlp => Block::Shift(ShiftMlpBlock::new(&mut s, p)?),
            BlockKind::WindowAttention => Block::Attention(AttentionBlock::new(&mut s, p, Some(p.spec.largest()))?),
            BlockKind::GlobalAttention => Block::Attention(AttentionBlock::new(&mut s, p, None)?),
            BlockKind::Conv => Block::Conv(ConvBlock::new(&mut s, p)?),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Cmw(_) => BlockKind::CmwMlp,
            Block::Mixer(_) => BlockKind::WindowMixerMlp,
            Block::Shift(_) => BlockKind::ShiftMlp,
            Block::Attention(a) if a.window.is_some() => BlockKind::WindowAttention,
            Block::Attention(_) => BlockKind::GlobalAttention,
            Block::Conv(_) => BlockKind::Conv,
        }
    }

    /// `x` is `[grid..., width]`; `side` carries the extra CMW inputs and
    /// must be `None` for every other kind.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        grid: &Grid,
        side: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != grid.rank() + 1 || &shape[..grid.rank()] != grid.extents() {
            return Err(Error::shape("block", format!("input {shape:?} on grid {:?}", grid.extents())));
        }
        if side.is_some() && !matches!(self, Block::Cmw(_)) {
            return Err(Error::invalid(format!("{} blocks take no side inputs", self.kind())));
        }
        match self {
            Block::Cmw(b) => b.forward(ctx, x, grid, side),
            Block::Mixer(b) => b.forward(ctx, x, grid),
            Block::Shift(b) => b.forward(ctx, x, grid),
            Block::Attention(b) => b.forward(ctx, x, grid),
            Block::Conv(b) => b.forward(ctx, x, grid),
        }
    }
}

#[cfg(test)]
mod tests;
