//! Coarse-to-fine registration network: shared pyramid encoder, optional
//! affine stage, correlation-aware decoder, composed residual fields.

mod loss;

pub use loss::{
    default_ncc_window, endpoint_error, ncc_loss, ncc_value, smoothness_loss, smoothness_value, supervised_epe_loss,
    NCC_EPS,
};

use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::blocks::{Block, BlockKind, BlockParams, EncoderConfig, FeaturePyramid, PyramidEncoder, WindowSpec};
use crate::correlation::{correlation_channels, local_correlation, step_context_correlation, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{load_checkpoint, save_checkpoint, Builder, Ctx, Init, Linear, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::volume::{AffineTransform, DisplacementField, Volume};
use crate::warp::{affine_field_var, compose_var, upsample_field_var, warp_var};

#[derive(Clone, Debug, PartialEq)]
pub struct RegModelConfig {
    pub rank: usize,
    pub depth: usize,
    /// Feature width per level, finest first.
    pub widths: Vec<usize>,
    pub encoder_block: BlockKind,
    /// Block kind of the full-resolution encoder stage.
    pub first_stage: BlockKind,
    pub encoder_blocks_per_level: usize,
    pub decoder_block: BlockKind,
    pub blocks_per_level: usize,
    pub window_spec: WindowSpec,
    pub corr_radius: usize,
    /// Correlate fixed features with warped moving features.
    pub image_correlation: bool,
    /// Correlate fixed features with the upsampled decoder context.
    pub step_correlation: bool,
    pub use_affine_stage: bool,
    /// Start the pyramid with a 4× patch embedding and predict at 1/4.
    pub stride4_start: bool,
    pub heads: usize,
    pub kernel: usize,
    pub mlp_ratio: usize,
}

impl Default for RegModelConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            depth: 4,
            widths: vec![8, 16, 32, 32],
            encoder_block: BlockKind::WindowMixerMlp,
            first_stage: BlockKind::WindowMixerMlp,
            encoder_blocks_per_level: 1,
            decoder_block: BlockKind::CmwMlp,
            blocks_per_level: 2,
            window_spec: WindowSpec::default(),
            corr_radius: DEFAULT_RADIUS,
            image_correlation: true,
            step_correlation: true,
            use_affine_stage: true,
            stride4_start: false,
            heads: 2,
            kernel: 3,
            mlp_ratio: 2,
        }
    }
}

impl RegModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            rank: self.rank,
            in_channels: 1,
            depth: self.depth,
            widths: self.widths.clone(),
            first_stage: self.first_stage,
            stage_kind: self.encoder_block,
            blocks_per_level: self.encoder_blocks_per_level,
            spec: self.window_spec.clone(),
            stride4: self.stride4_start,
            heads: self.heads,
            kernel: self.kernel,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.rank) {
            return Err(Error::invalid(format!("rank {} must be 2 or 3", self.rank)));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::invalid("blocks_per_level must be at least 1"));
        }
        self.encoder_config().validate()
    }

    /// Finest level the decoder predicts at.
    pub fn finest_level(&self) -> usize {
        if self.stride4_start {
            2
        } else {
            0
        }
    }

    /// Side channels entering the decoder blocks at `level`.
    pub fn side_channels(&self, level: usize) -> usize {
        let k = correlation_channels(self.rank, self.corr_radius);
        let mut n = if self.image_correlation { k } else { 0 };
        if level + 1 < self.depth {
            n += self.widths[level];
            if self.step_correlation {
                n += k;
            }
        }
        n
    }
}

struct DecoderLevel {
    level: usize,
    /// `[fixed, warped moving] -> width`.
    input: Linear,
    /// Context from the coarser level lifted to this width.
    lift: Option<Linear>,
    /// `[f, side] -> width` for block kinds without side inputs.
    entry: Option<Linear>,
    blocks: Vec<Block>,
    /// Residual displacement, zero-initialised.
    head: Linear,
}

struct AffineHead {
    hidden: Linear,
    out: Linear,
}

/// Network structure; parameters live in a [`ParamStore`].
pub struct RegNet {
    pub config: RegModelConfig,
    encoder: PyramidEncoder,
    /// Coarsest first.
    decoder: Vec<DecoderLevel>,
    affine: Option<AffineHead>,
}

/// Differentiable outputs of one forward pass.
pub struct RegOutput<'t, T: Real> {
    /// Full-resolution field `[grid..., D]`.
    pub field: Var<'t, T>,
    /// Field after each decoder level, coarsest first, with its grid.
    pub level_fields: Vec<(Grid, Var<'t, T>)>,
    /// Affine matrix `[D, D]` and translation `[D]` in full-resolution voxels.
    pub affine: Option<(Var<'t, T>, Var<'t, T>)>,
}

impl RegNet {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, config: RegModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.rank;
        let encoder = PyramidEncoder::new(b, "encoder", config.encoder_config())?;
        let mut s = b.scope("decoder");
        let mut decoder = Vec::new();
        for level in (config.finest_level()..config.depth).rev() {
            let w = config.widths[level];
            let mut lb = s.scope(&format!("level{level}"));
            let input = Linear::new(&mut lb, "input", 2 * w, w)?;
            let lift = if level + 1 < config.depth {
                Some(Linear::new(&mut lb, "lift", config.widths[level + 1], w)?)
            } else {
                None
            };
            let side = config.side_channels(level);
            let cmw = config.decoder_block == BlockKind::CmwMlp;
            let entry = if !cmw && side > 0 { Some(Linear::new(&mut lb, "entry", w + side, w)?) } else { None };
            let mut blocks = Vec::new();
            for i in 0..config.blocks_per_level {
                let mut p = BlockParams::new(config.decoder_block, d, w, &config.window_spec);
                p.index = i;
                p.side_channels = if cmw { side } else { 0 };
                p.heads = config.heads;
                p.kernel = config.kernel;
                p.mlp_ratio = config.mlp_ratio;
                blocks.push(Block::new(&mut lb, &format!("block{i}"), &p)?);
            }
            let head = Linear::zeroed(&mut lb, "head", w, d)?;
            decoder.push(DecoderLevel { level, input, lift, entry, blocks, head });
        }
        drop(s);
        let affine = if config.use_affine_stage {
            let w = 2 * config.widths[config.depth - 1];
            let mut ab = b.scope("affine");
            Some(AffineHead { hidden: Linear::new(&mut ab, "hidden", w, w)?, out: Linear::zeroed(&mut ab, "out", w, d * (d + 1))? })
        } else {
            None
        };
        Ok(Self { config, encoder, decoder, affine })
    }

    /// `fixed` and `moving` are `[grid..., 1]`.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        fixed: Var<'t, T>,
        moving: Var<'t, T>,
        grid: &Grid,
    ) -> Result<RegOutput<'t, T>> {
        let cfg = &self.config;
        let d = cfg.rank;
        if fixed.shape() != moving.shape() || fixed.shape() != grid.with_channels(1) {
            return Err(Error::shape(
                "register",
                format!("fixed {:?} and moving {:?} on grid {:?}", fixed.shape(), moving.shape(), grid.extents()),
            ));
        }
        let fp = self.encoder.forward(ctx, fixed, grid).map_err(|e| e.context("encoder"))?;
        let mp = self.encoder.forward(ctx, moving, grid).map_err(|e| e.context("encoder"))?;
        let top = cfg.depth - 1;
        let top_scale = T::from_usize_lossy(1 << top);

        let (top_grid, _) = fp.level(top);
        let top_grid = top_grid.clone();
        let mut affine = None;
        let mut phi = match &self.affine {
            Some(head) => {
                let (m, t) = self.affine_params(ctx, head, &fp, &mp, top)?;
                let field = affine_field_var(m, t, &top_grid)?;
                affine = Some((m, t.scale(top_scale)?));
                field
            }
            None => ctx.constant(Tensor::zeros(top_grid.with_channels(d))),
        };

        let mut level_fields = Vec::new();
        let mut context: Option<(Grid, Var<'t, T>)> = None;
        for dl in &self.decoder {
            let (g, f_fix) = fp.level(dl.level);
            let (_, f_mov) = mp.level(dl.level);
            let g = g.clone();
            if let Some((coarse, _)) = &context {
                phi = upsample_field_var(phi, coarse, &g)?;
            }
            let warped = warp_var(f_mov, &g, phi)?;
            let mut side = Vec::new();
            if cfg.image_correlation {
                side.push(local_correlation(f_fix, warped, &g, cfg.corr_radius, true)?);
            }
            if let Some((coarse, c)) = &context {
                let (corr, up) = step_context_correlation(ctx, f_fix, *c, coarse, &g, dl.lift.as_ref(), cfg.corr_radius)?;
                if cfg.step_correlation {
                    side.push(corr);
                }
                side.push(up);
            }
            let side = match side.len() {
                0 => None,
                1 => Some(side[0]),
                _ => Some(Var::concat(&side, d)?),
            };
            let mut f = dl.input.forward(ctx, Var::concat(&[f_fix, warped], d)?)?;
            let block_side = match (&dl.entry, side) {
                (Some(entry), Some(s)) => {
                    f = entry.forward(ctx, Var::concat(&[f, s], d)?)?;
                    None
                }
                (_, s) => s,
            };
            for block in &dl.blocks {
                f = block.forward(ctx, f, &g, block_side).map_err(|e| e.context(format!("decoder level {}", dl.level)))?;
            }
            let residual = dl.head.forward(ctx, f)?;
            phi = compose_var(phi, residual, &g)?;
            level_fields.push((g.clone(), phi));
            context = Some((g, f));
        }

        let (mut g, _) = context.expect("at least one decoder level");
        let mut field = phi;
        while &g != grid {
            let fine = fp_grid_above(grid, &g)?;
            field = upsample_field_var(field, &g, &fine)?;
            g = fine;
        }
        Ok(RegOutput { field, level_fields, affine })
    }

    fn affine_params<'t, T: Real>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        head: &AffineHead,
        fp: &FeaturePyramid<'t, T>,
        mp: &FeaturePyramid<'t, T>,
        top: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let d = self.config.rank;
        let (_, a) = fp.level(top);
        let (_, b) = mp.level(top);
        let spatial: Vec<usize> = (0..d).collect();
        let pooled = Var::concat(&[a, b], d)?.mean_axes(&spatial)?;
        let w = pooled.shape()[0];
        let h = head.hidden.forward(ctx, pooled.reshape(vec![1, w])?)?.gelu()?;
        let delta = head.out.forward(ctx, h)?.reshape(vec![d * (d + 1)])?;
        let mut eye = Tensor::zeros(vec![d * d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = T::one();
        }
        let m = delta.slice(0, 0, d * d)?.add(ctx.constant(eye))?.reshape(vec![d, d])?;
        let t = delta.slice(0, d * d, d)?;
        Ok((m, t))
    }
}

/// Grid one level finer than `coarse` on the way to `full`.
fn fp_grid_above(full: &Grid, coarse: &Grid) -> Result<Grid> {
    let mut g = full.clone();
    loop {
        let h = g.halved();
        if &h == coarse {
            return Ok(g);
        }
        if h.numel() <= coarse.numel() {
            return Err(Error::shape("register", format!("{:?} is not a pyramid level of {:?}", coarse.extents(), full.extents())));
        }
        g = h;
    }
}

/// Registration network together with its parameters.
pub struct RegModel<T: Real> {
    pub net: RegNet,
    pub params: ParamStore<T>,
}

/// Result of registering one pair.
#[derive(Clone, Debug)]
pub struct RegistrationResult<T> {
    /// Full-resolution field warping `moving` onto `fixed`.
    pub field: DisplacementField<T>,
    pub affine: Option<AffineTransform<T>>,
    /// Field after each decoder level, coarsest first.
    pub level_fields: Vec<DisplacementField<T>>,
    pub warped: Volume<T>,
}

impl<T: Real> RegModel<T> {
    pub fn new(config: RegModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let net = RegNet::new(&mut Builder::new(&mut params, &mut init), config)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &RegModelConfig {
        &self.net.config
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, fixed: &Volume<T>, moving: &Volume<T>) -> Result<RegOutput<'t, T>> {
        check_pair(fixed, moving, self.config().rank)?;
        let ctx = Ctx::new(tape, &self.params);
        self.net.forward(&ctx, ctx.constant(fixed.to_tensor()), ctx.constant(moving.to_tensor()), fixed.grid())
    }

    pub fn register(&self, fixed: &Volume<T>, moving: &Volume<T>) -> Result<RegistrationResult<T>> {
        let tape = Tape::new();
        let out = self.forward(&tape, fixed, moving)?;
        let field = DisplacementField::from_tensor(fixed.grid().clone(), &out.field.value())?;
        let level_fields = out
            .level_fields
            .iter()
            .map(|(g, v)| DisplacementField::from_tensor(g.clone(), &v.value()))
            .collect::<Result<Vec<_>>>()?;
        let affine = match out.affine {
            Some((m, t)) => Some(AffineTransform::new(m.value().data().to_vec(), t.value().data().to_vec())?),
            None => None,
        };
        let warped_t = crate::warp::warp_tensor(&moving.to_tensor(), moving.grid(), &field)?;
        let warped = Volume::from_tensor(moving.grid().clone(), &warped_t)?;
        Ok(RegistrationResult { field, affine, level_fields, warped })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(dir, &self.params)
    }

    /// Builds the architecture for `config` and loads weights saved by [`RegModel::save`].
    pub fn load(config: RegModelConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        load_checkpoint(dir, &mut model.params)?;
        Ok(model)
    }
}

fn check_pair<T: Real>(fixed: &Volume<T>, moving: &Volume<T>, rank: usize) -> Result<()> {
    if fixed.grid() != moving.grid() {
        return Err(Error::shape(
            "register",
            format!("fixed {:?} vs moving {:?}", fixed.grid().extents(), moving.grid().extents()),
        ));
    }
    if fixed.grid().rank() != rank || fixed.channels() != 1 || moving.channels() != 1 {
        return Err(Error::shape("register", format!("expected single-channel rank-{rank} images")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
