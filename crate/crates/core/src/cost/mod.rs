//! Analytic FLOP / activation model and wall-clock measurement of blocks.
//!
//! A multiply and an add each count as one flop; only dense products
//! (linear layers, token mixing, attention, convolution) are counted.
//! Activations are counted in elements.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::blocks::{Block, BlockKind, BlockParams, WindowLayout, WindowMeta, WindowSpec};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Builder, Ctx, Init, ParamStore};
use crate::regnet::RegModelConfig;
use crate::tensor::Tensor;

pub const CROSSOVER_HEADER: [&str; 5] = ["resolution", "kind", "flops", "peak_acts", "measured_s"];

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub kind: BlockKind,
    /// Spatial rank and extents; `0` and empty when only a token count is known.
    pub rank: usize,
    pub extents: Vec<usize>,
    /// Token count.
    pub n: u64,
    pub channels: u64,
    /// Window volume, kernel volume, or (shift MLP) number of shifted axes.
    pub volume: u64,
    /// Token/spatial mixing flops of the block's core operation.
    pub flops: u128,
    /// The channel-MLP sub-layer shared by every kind (`4·N·C·hidden`).
    pub channel_mlp_flops: u128,
    pub peak_activation_elems: u128,
    pub measured_seconds: Option<f64>,
    /// Elements held by the tape after one forward pass.
    pub measured_peak_elems: Option<u128>,
}

impl CostReport {
    pub fn total_flops(&self) -> u128 {
        self.flops + self.channel_mlp_flops
    }
}

fn check_positive(n: u64, c: u64, v: u64) -> Result<()> {
    if n == 0 || c == 0 || v == 0 {
        return Err(Error::invalid(format!("cost model needs N, C, volume >= 1 (got {n}, {c}, {v})")));
    }
    Ok(())
}

/// Closed-form cost with hidden width `2C` for the channel MLP. For
/// [`BlockKind::CmwMlp`] `t_or_k` is a single branch of volume `t`
/// without side inputs.
pub fn analytic_cost(kind: BlockKind, n: u64, c: u64, t_or_k: u64) -> Result<CostReport> {
    check_positive(n, c, t_or_k)?;
    let (n, c, v) = (n as u128, c as u128, t_or_k as u128);
    let hidden = 2 * c;
    let (flops, inner) = match kind {
        BlockKind::WindowMixerMlp => (4 * c * n * v, n * c),
        BlockKind::CmwMlp => (4 * n * c * c + 4 * n * c * v, 2 * n * c),
        BlockKind::ShiftMlp => (2 * n * c * c * (v + 1), n * c * v),
        BlockKind::WindowAttention => (8 * n * c * c + 4 * n * v * c, n * v),
        BlockKind::GlobalAttention => (8 * n * c * c + 4 * n * n * c, n * n),
        BlockKind::Conv => (2 * n * c * c * v, n * c * v),
    };
    Ok(CostReport {
        kind,
        rank: 0,
        extents: Vec::new(),
        n: n as u64,
        channels: c as u64,
        volume: t_or_k,
        flops,
        channel_mlp_flops: 4 * n * c * hidden,
        peak_activation_elems: n * c + inner.max(n * hidden),
        measured_seconds: None,
        measured_peak_elems: None,
    })
}

/// Padded token count of one window tiling.
fn padded_tokens(grid: &Grid, window: usize, shift: usize) -> Result<u128> {
    let d = grid.rank();
    let meta = WindowMeta::new(grid, &vec![window; d], &vec![shift; d], WindowLayout::PositionMajor)?;
    Ok((meta.num_windows() * meta.window_volume()) as u128)
}

/// Exact cost of one built block on `grid`, padding included; equals the
/// tape's dense-product counter for a forward pass.
pub fn block_cost(p: &BlockParams<'_>, grid: &Grid) -> Result<CostReport> {
    let n = grid.numel() as u128;
    let c = p.width as u128;
    let d = grid.rank() as u32;
    let hidden = c * p.mlp_ratio as u128;
    let shift = |w: usize| p.spec.shift_for(p.index, w);
    let (flops, volume, inner) = match p.kind {
        BlockKind::CmwMlp => {
            let mut f = 2 * n * (c + p.side_channels as u128) * c;
            let mut inner = 0;
            for &w in p.spec.sizes() {
                let np = padded_tokens(grid, w, shift(w))?;
                f += 4 * np * c * w.pow(d) as u128;
                inner = inner.max(np * c);
            }
            let nb = p.spec.sizes().len() as u128;
            f += 2 * n * nb * c * c;
            (f, p.spec.sizes().iter().map(|w| w.pow(d) as u64).sum(), inner.max(n * nb * c))
        }
        BlockKind::WindowMixerMlp => {
            let w = p.spec.largest();
            let np = padded_tokens(grid, w, shift(w))?;
            (4 * np * c * w.pow(d) as u128, w.pow(d) as u64, np * c)
        }
        BlockKind::ShiftMlp => (2 * n * c * c * (d as u128 + 1), d as u64, n * c * d as u128),
        BlockKind::WindowAttention => {
            let w = p.spec.largest();
            let t = w.pow(d) as u128;
            let np = padded_tokens(grid, w, shift(w))?;
            (8 * n * c * c + 4 * np * t * c, t as u64, p.heads as u128 * np * t)
        }
        BlockKind::GlobalAttention => (8 * n * c * c + 4 * n * n * c, n as u64, p.heads as u128 * n * n),
        BlockKind::Conv => {
            let k = p.kernel.pow(d) as u128;
            (2 * n * c * c * k, k as u64, n * c * k)
        }
    };
    Ok(CostReport {
        kind: p.kind,
        rank: grid.rank(),
        extents: grid.extents().to_vec(),
        n: n as u64,
        channels: c as u64,
        volume,
        flops,
        channel_mlp_flops: 4 * n * c * hidden,
        peak_activation_elems: n * c + inner.max(n * hidden),
        measured_seconds: None,
        measured_peak_elems: None,
    })
}

fn linear_flops(rows: usize, fan_in: usize, fan_out: usize) -> u128 {
    2 * rows as u128 * fan_in as u128 * fan_out as u128
}

/// Dense-product flops of one registration forward pass (both encoder
/// passes, decoder, affine head) on `grid`.
pub fn model_flops(cfg: &RegModelConfig, grid: &Grid) -> Result<u128> {
    cfg.validate()?;
    let enc = cfg.encoder_config();
    let grids = enc.level_grids(grid)?;
    let d = cfg.rank;
    let block = |kind: BlockKind, level: usize, index: usize, side: usize| -> Result<u128> {
        let mut p = BlockParams::new(kind, d, cfg.widths[level], &cfg.window_spec);
        p.index = index;
        p.side_channels = side;
        p.heads = cfg.heads;
        p.kernel = cfg.kernel;
        p.mlp_ratio = cfg.mlp_ratio;
        Ok(block_cost(&p, &grids[level])?.total_flops())
    };
    let mut encoder = 0;
    for level in enc.first_level()..cfg.depth {
        let n = grids[level].numel();
        let w = cfg.widths[level];
        encoder += if cfg.stride4_start && level == 2 {
            linear_flops(n, 4usize.pow(d as u32), w)
        } else if level == 0 {
            linear_flops(n, 1, w)
        } else {
            linear_flops(n, cfg.widths[level - 1] << d, w)
        };
        let kind = if level == 0 { cfg.first_stage } else { cfg.encoder_block };
        for i in 0..cfg.encoder_blocks_per_level {
            encoder += block(kind, level, i, 0)?;
        }
    }
    let mut decoder = 0;
    let cmw = cfg.decoder_block == BlockKind::CmwMlp;
    for level in cfg.finest_level()..cfg.depth {
        let n = grids[level].numel();
        let w = cfg.widths[level];
        let side = cfg.side_channels(level);
        decoder += linear_flops(n, 2 * w, w) + linear_flops(n, w, d);
        if level + 1 < cfg.depth {
            decoder += linear_flops(n, cfg.widths[level + 1], w);
        }
        if !cmw && side > 0 {
            decoder += linear_flops(n, w + side, w);
        }
        for i in 0..cfg.blocks_per_level {
            decoder += block(cfg.decoder_block, level, i, if cmw { side } else { 0 })?;
        }
    }
    let affine = if cfg.use_affine_stage {
        let w = 2 * cfg.widths[cfg.depth - 1];
        // head MLP, then the affine map applied at every top-level voxel
        linear_flops(1, w, w) + linear_flops(1, w, d * (d + 1)) + linear_flops(grids[cfg.depth - 1].numel(), d, d)
    } else {
        0
    };
    Ok(2 * encoder + decoder + affine)
}

/// Median wall-clock of `reps` forward passes (after one warm-up) of a
/// freshly built block on a random `[extents..., C]` input.
pub fn measure(p: &BlockParams<'_>, extents: &[usize], reps: usize) -> Result<CostReport> {
    if reps < 5 {
        return Err(Error::invalid(format!("measure needs at least 5 repetitions, got {reps}")));
    }
    let grid = Grid::new(extents.to_vec())?;
    let mut report = block_cost(p, &grid)?;
    let mut params = ParamStore::<f32>::new();
    let mut init = Init::new(0);
    let block = Block::new(&mut Builder::new(&mut params, &mut init), "block", p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(grid.with_channels(p.width), |_| rng.random_range(-1.0f32..1.0));
    let side = (p.side_channels > 0)
        .then(|| Tensor::from_fn(grid.with_channels(p.side_channels), |_| rng.random_range(-1.0f32..1.0)));
    let mut times = Vec::with_capacity(reps);
    let mut peak = 0;
    for rep in 0..=reps {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params);
        let start = Instant::now();
        let input = ctx.constant(x.clone());
        let s = side.clone().map(|t| ctx.constant(t));
        block.forward(&ctx, input, &grid, s)?;
        let elapsed = start.elapsed().as_secs_f64();
        peak = tape.live_elements();
        if rep > 0 {
            times.push(elapsed);
        }
    }
    times.sort_by(f64::total_cmp);
    report.measured_seconds = Some(times[times.len() / 2]);
    report.measured_peak_elems = Some(peak as u128);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossoverRow {
    /// Side length of the square (2D) grid.
    pub resolution: usize,
    pub kind: BlockKind,
    pub flops: u128,
    pub peak_acts: u128,
    pub measured_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossoverTable {
    pub rows: Vec<CrossoverRow>,
    /// Smallest resolution where global attention exceeds the activation
    /// budget while the window MLP stays within it.
    pub crossover: Option<usize>,
}

/// Analytic rows for every kind at each square resolution; `t` is the
/// largest window volume, `k` the kernel volume. With `measure_reps`, the
/// kinds are also timed (global attention only where it fits `budget`).
pub fn crossover_table(
    resolutions: &[usize],
    channels: usize,
    spec: &WindowSpec,
    kernel: usize,
    budget: u128,
    measure_reps: Option<usize>,
) -> Result<CrossoverTable> {
    if resolutions.is_empty() {
        return Err(Error::invalid("crossover_table needs at least one resolution"));
    }
    let mut rows = Vec::new();
    let mut crossover = None;
    let t = spec.largest().pow(2) as u64;
    let k = kernel.pow(2) as u64;
    let c = channels as u64;
    for &r in resolutions {
        let n = (r * r) as u64;
        let sum_t: u64 = spec.sizes().iter().map(|w| (w * w) as u64).sum();
        for kind in BlockKind::ALL {
            let mut rep = match kind {
                BlockKind::CmwMlp => cmw_cost(n, c, 0, spec.sizes().len() as u64, sum_t)?,
                BlockKind::ShiftMlp => analytic_cost(kind, n, c, 2)?,
                BlockKind::Conv => analytic_cost(kind, n, c, k)?,
                BlockKind::GlobalAttention => analytic_cost(kind, n, c, n)?,
                _ => analytic_cost(kind, n, c, t)?,
            };
            if let Some(reps) = measure_reps {
                if kind != BlockKind::GlobalAttention || rep.peak_activation_elems <= budget {
                    let mut p = BlockParams::new(kind, 2, channels, spec);
                    p.kernel = kernel;
                    rep.measured_seconds = measure(&p, &[r, r], reps)?.measured_seconds;
                }
            }
            rows.push(CrossoverRow { resolution: r, kind, flops: rep.flops, peak_acts: rep.peak_activation_elems, measured_s: rep.measured_seconds });
        }
        let acts = |kind| rows.iter().rev().find(|row: &&CrossoverRow| row.kind == kind && row.resolution == r).map(|row| row.peak_acts);
        if crossover.is_none()
            && acts(BlockKind::GlobalAttention).is_some_and(|a| a > budget)
            && acts(BlockKind::WindowMixerMlp).is_some_and(|a| a <= budget)
        {
            crossover = Some(r);
        }
    }
    Ok(CrossoverTable { rows, crossover })
}

/// Multi-window block: input projection from `C + side`, `branches`
/// token mixers with total window volume `sum_t`, fused back to `C`.
pub fn cmw_cost(n: u64, c: u64, side: u64, branches: u64, sum_t: u64) -> Result<CostReport> {
    check_positive(n, c, sum_t)?;
    let mut rep = analytic_cost(BlockKind::CmwMlp, n, c, sum_t)?;
    let (n, c, side, nb) = (n as u128, c as u128, side as u128, branches as u128);
    rep.flops = 2 * n * (c + side) * c + 4 * n * c * sum_t as u128 + 2 * n * nb * c * c;
    rep.peak_activation_elems = n * c + (n * nb * c).max(2 * n * c);
    Ok(rep)
}

pub fn write_crossover(table: &CrossoverTable, out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CROSSOVER_HEADER).map_err(crate::train::csv_error)?;
    for r in &table.rows {
        let m = r.measured_s.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([r.resolution.to_string(), r.kind.to_string(), r.flops.to_string(), r.peak_acts.to_string(), m])
            .map_err(crate::train::csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `log flops` against `log N` for `kind` over the
/// table's resolutions.
pub fn scaling_exponent(table: &CrossoverTable, kind: BlockKind) -> Option<f64> {
    let pts: Vec<(f64, f64)> = table
        .rows
        .iter()
        .filter(|r| r.kind == kind)
        .map(|r| (((r.resolution * r.resolution) as f64).ln(), (r.flops as f64).ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}
