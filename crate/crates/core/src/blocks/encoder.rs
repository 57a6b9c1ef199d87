use std::rc::Rc;

use super::{Block, BlockKind, BlockParams, WindowSpec};
use crate::autodiff::{Var, ZERO_ROW};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Builder, Ctx, Linear};
use crate::scalar::Real;

/// Row table gathering the `factor^D` fine children of every coarse voxel
/// (child offsets lexicographic); children beyond the fine grid read zeros.
/// Returns the table and the coarse grid (extents rounded up).
pub fn patch_index(fine: &Grid, factor: usize) -> (Vec<u32>, Grid) {
    let d = fine.rank();
    let coarse = Grid::new(fine.extents().iter().map(|e| e.div_ceil(factor)).collect::<Vec<_>>()).expect("non-empty");
    let child = Grid::new(vec![factor; d]).expect("factor >= 1");
    let mut index = Vec::with_capacity(coarse.numel() * child.numel());
    let (mut cc, mut oc) = (vec![0; d], vec![0; d]);
    for q in 0..coarse.numel() {
        coarse.coords_into(q, &mut cc);
        for o in 0..child.numel() {
            child.coords_into(o, &mut oc);
            let mut off = Some(0);
            for ax in 0..d {
                let x = cc[ax] * factor + oc[ax];
                if x >= fine.extents()[ax] {
                    off = None;
                    break;
                }
                off = off.map(|v| v + x * fine.strides()[ax]);
            }
            index.push(off.map_or(ZERO_ROW, |v| v as u32));
        }
    }
    (index, coarse)
}

/// Concatenate `factor^D` patches and project: `[fine..., C] -> [coarse..., C_out]`.
fn patch_merge<'t, T: Real>(ctx: &Ctx<'t, '_, T>, x: Var<'t, T>, fine: &Grid, factor: usize, proj: &Linear) -> Result<(Var<'t, T>, Grid)> {
    let c = *x.shape().last().expect("rank >= 1");
    let (index, coarse) = patch_index(fine, factor);
    let k = factor.pow(fine.rank() as u32);
    let cols = x.gather_rows(Rc::new(index), vec![coarse.numel(), k, c])?;
    let y = proj.forward(ctx, cols.reshape(coarse.with_channels(k * c))?)?;
    Ok((y, coarse))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub rank: usize,
    pub in_channels: usize,
    pub depth: usize,
    pub widths: Vec<usize>,
    /// Blocks at full resolution (level 0).
    pub first_stage: BlockKind,
    /// Blocks at levels 1 and deeper.
    pub stage_kind: BlockKind,
    pub blocks_per_level: usize,
    pub spec: WindowSpec,
    /// Replace levels 0 and 1 by a 4×4 patch embedding.
    pub stride4: bool,
    pub heads: usize,
    pub kernel: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::invalid(format!("depth {} violates depth >= 2", self.depth)));
        }
        if self.stride4 && self.depth < 3 {
            return Err(Error::invalid("the stride-4 start needs depth >= 3"));
        }
        if self.widths.len() != self.depth {
            return Err(Error::invalid(format!("{} widths for depth {}", self.widths.len(), self.depth)));
        }
        if self.widths.iter().any(|&w| w == 0) || self.widths.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid(format!("widths {:?} must be positive and non-decreasing", self.widths)));
        }
        Ok(())
    }

    /// Index of the finest level the encoder produces.
    pub fn first_level(&self) -> usize {
        if self.stride4 {
            2
        } else {
            0
        }
    }

    /// Level grids for an input grid, finest first, starting at level 0.
    pub fn level_grids(&self, grid: &Grid) -> Result<Vec<Grid>> {
        let min = 1usize << (self.depth - 1);
        if grid.extents().iter().any(|&e| e < min) {
            return Err(Error::shape(
                "encode_pyramid",
                format!("image {:?} too small for depth {} (extents must be >= {min})", grid.extents(), self.depth),
            ));
        }
        let mut grids = vec![grid.clone()];
        for _ in 1..self.depth {
            let next = grids.last().expect("non-empty").halved();
            grids.push(next);
        }
        Ok(grids)
    }
}

struct Stage {
    /// Lift (level 0), patch merge (levels ≥ 1), or 4× embedding.
    entry: Linear,
    factor: usize,
    blocks: Vec<Block>,
}

/// Shared-weight hierarchical encoder.
pub struct PyramidEncoder {
    pub config: EncoderConfig,
    stages: Vec<Stage>,
}

/// Per-level feature maps, finest first; `levels[i]` is level `first_level + i`.
pub struct FeaturePyramid<'t, T: Real> {
    pub first_level: usize,
    pub grids: Vec<Grid>,
    pub levels: Vec<Var<'t, T>>,
}

impl<'t, T: Real> FeaturePyramid<'t, T> {
    pub fn level(&self, l: usize) -> (&Grid, Var<'t, T>) {
        let i = l - self.first_level;
        (&self.grids[i], self.levels[i])
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl PyramidEncoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut s = b.scope(name);
        let d = config.rank;
        let mut stages = Vec::new();
        for level in config.first_level()..config.depth {
            let w = config.widths[level];
            let (entry, factor) = if config.stride4 && level == 2 {
                (Linear::new(&mut s, "embed4", config.in_channels * 4usize.pow(d as u32), w)?, 4)
            } else if level == 0 {
                (Linear::new(&mut s, "lift", config.in_channels, w)?, 1)
            } else {
                (Linear::new(&mut s, &format!("merge{level}"), config.widths[level - 1] * (1 << d), w)?, 2)
            };
            let kind = if level == 0 { config.first_stage } else { config.stage_kind };
            let mut blocks = Vec::new();
            for i in 0..config.blocks_per_level {
                let mut p = BlockParams::new(kind, d, w, &config.spec);
                p.index = i;
                p.heads = config.heads;
                p.kernel = config.kernel;
                p.mlp_ratio = config.mlp_ratio;
                blocks.push(Block::new(&mut s, &format!("level{level}/block{i}"), &p)?);
            }
            stages.push(Stage { entry, factor, blocks });
        }
        Ok(Self { config, stages })
    }

    /// `image` is `[grid..., in_channels]`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, image: Var<'t, T>, grid: &Grid) -> Result<FeaturePyramid<'t, T>> {
        if grid.rank() != self.config.rank || image.shape() != grid.with_channels(self.config.in_channels) {
            return Err(Error::shape("encode_pyramid", format!("image {:?} on grid {:?}", image.shape(), grid.extents())));
        }
        let all = self.config.level_grids(grid)?;
        let mut levels = Vec::new();
        let mut x = image;
        let mut g = grid.clone();
        for stage in &self.stages {
            if stage.factor == 1 {
                x = stage.entry.forward(ctx, x)?;
            } else {
                let (y, coarse) = patch_merge(ctx, x, &g, stage.factor, &stage.entry)?;
                x = y;
                g = coarse;
            }
            for block in &stage.blocks {
                x = block.forward(ctx, x, &g, None)?;
            }
            levels.push(x);
        }
        let first_level = self.config.first_level();
        Ok(FeaturePyramid { first_level, grids: all[first_level..].to_vec(), levels })
    }
}
