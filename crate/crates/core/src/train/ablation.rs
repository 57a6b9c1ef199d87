//! Paired experiment suites: every arm trains from the same seeds and is
//! evaluated on the same validation pairs.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use super::eval::mean_sd;
use super::{csv_error, evaluate, train_with_pool, EvalRecord, PairPool, TrainConfig};
use crate::blocks::BlockKind;
use crate::cost::model_flops;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::regnet::RegModelConfig;

pub const ABLATION_HEADER: [&str; 6] = ["arm", "mean_dice_after", "sd_dice_after", "mean_epe_after", "folding", "flops"];
pub const PAIRED_HEADER: [&str; 7] = ["arm", "reference", "seed", "pair_id", "dice_after", "reference_dice_after", "difference"];

/// Allowed relative FLOP mismatch between block-swap arms.
pub const FLOP_TOLERANCE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationSuite {
    FullResVsStride4,
    BlockSwap,
    FirstStageConv,
    LambdaSweep,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 4] =
        [AblationSuite::FullResVsStride4, AblationSuite::BlockSwap, AblationSuite::FirstStageConv, AblationSuite::LambdaSweep];

    pub fn name(self) -> &'static str {
        match self {
            AblationSuite::FullResVsStride4 => "full_res_vs_stride4",
            AblationSuite::BlockSwap => "block_swap",
            AblationSuite::FirstStageConv => "first_stage_conv",
            AblationSuite::LambdaSweep => "lambda_sweep",
        }
    }
}

impl fmt::Display for AblationSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationSuite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            format!("unknown ablation suite '{s}' (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationArm {
    pub name: String,
    pub config: TrainConfig,
    /// Dense-product flops of one forward pass on the data grid.
    pub flops: u128,
}

fn arm(name: impl Into<String>, config: TrainConfig) -> Result<AblationArm> {
    let grid = Grid::new(config.data.spatial_shape.clone())?;
    let flops = model_flops(&config.model, &grid)?;
    Ok(AblationArm { name: name.into(), config, flops })
}

/// Rescales `arm`'s widths (multiples of its head count, shape of the
/// width profile kept) so its flops on `grid` come closest to `target`.
/// An arm already within tolerance is returned unchanged.
/// Returns the config and its flop ratio to `target`.
pub fn matched_width_scale(arm: &RegModelConfig, grid: &Grid, target: u128) -> Result<(RegModelConfig, f64)> {
    let ratio = |c: &RegModelConfig| -> Result<f64> { Ok(model_flops(c, grid)? as f64 / target as f64) };
    let own = ratio(arm)?;
    if (own - 1.0).abs() <= FLOP_TOLERANCE {
        return Ok((arm.clone(), own));
    }
    let h = arm.heads.max(1);
    let mut seen = HashSet::new();
    let mut best: Option<(RegModelConfig, f64)> = None;
    for step in 8..=512 {
        let m = step as f64 / 32.0;
        // every floor/ceil rounding of the scaled widths to multiples of h
        let choices: Vec<[usize; 2]> = arm
            .widths
            .iter()
            .map(|&w| {
                let x = w as f64 * m / h as f64;
                [(x.floor() as usize).max(1) * h, (x.ceil() as usize).max(1) * h]
            })
            .collect();
        for mask in 0..1u32 << choices.len() {
            let widths: Vec<usize> = choices.iter().enumerate().map(|(i, c)| c[(mask >> i & 1) as usize]).collect();
            if !seen.insert(widths.clone()) {
                continue;
            }
            let cand = RegModelConfig { widths, ..arm.clone() };
            if cand.validate().is_err() {
                continue;
            }
            let r = ratio(&cand)?;
            if best.as_ref().is_none_or(|(_, b)| r.ln().abs() < b.ln().abs()) {
                best = Some((cand, r));
            }
        }
    }
    match best {
        Some((cfg, r)) if (r - 1.0).abs() <= FLOP_TOLERANCE => Ok((cfg, r)),
        Some((_, r)) => Err(Error::invalid(format!("no width scaling brings the arm within 20% of the flop budget (best ratio {r:.3})"))),
        None => Err(Error::invalid("no valid width scaling for the arm")),
    }
}

/// The arms of `suite` built from `base`; the first arm is the reference
/// for paired differences. `kinds` restricts block-swap arms.
pub fn ablation_arms(suite: AblationSuite, base: &TrainConfig, kinds: Option<&[BlockKind]>) -> Result<Vec<AblationArm>> {
    base.validate()?;
    let with_model = |model: RegModelConfig| TrainConfig { model, ..base.clone() };
    match suite {
        AblationSuite::FullResVsStride4 => Ok(vec![
            arm("full_res", with_model(RegModelConfig { stride4_start: false, ..base.model.clone() }))?,
            arm("stride4", with_model(RegModelConfig { stride4_start: true, ..base.model.clone() }))?,
        ]),
        AblationSuite::FirstStageConv => Ok(vec![
            arm("first_stage_mlp", base.clone())?,
            arm("first_stage_conv", with_model(RegModelConfig { first_stage: BlockKind::Conv, ..base.model.clone() }))?,
        ]),
        AblationSuite::LambdaSweep => {
            [0.5, 1.0, 2.0].into_iter().map(|lambda| arm(format!("lambda_{lambda}"), TrainConfig { lambda, ..base.clone() })).collect()
        }
        AblationSuite::BlockSwap => {
            let grid = Grid::new(base.data.spatial_shape.clone())?;
            let target = model_flops(&base.model, &grid)?;
            let kinds = kinds.unwrap_or(&BlockKind::ALL);
            if kinds.is_empty() {
                return Err(Error::invalid("block_swap needs at least one block kind"));
            }
            let mut arms = Vec::new();
            for &kind in kinds {
                let attention = matches!(kind, BlockKind::WindowAttention | BlockKind::GlobalAttention);
                let model = RegModelConfig {
                    encoder_block: kind,
                    decoder_block: kind,
                    first_stage: kind,
                    stride4_start: attention || base.model.stride4_start,
                    ..base.model.clone()
                };
                let (model, _) = matched_width_scale(&model, &grid, target)?;
                arms.push(arm(kind.name(), with_model(model))?);
            }
            Ok(arms)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: AblationArm,
    pub seeds: Vec<SeedResult>,
}

impl ArmResult {
    fn per_seed(&self, f: impl Fn(&EvalRecord) -> f64) -> Vec<f64> {
        self.seeds.iter().map(|s| s.records.iter().map(&f).sum::<f64>() / s.records.len() as f64).collect()
    }

    /// Mean validation dice_after of each seed, in seed order.
    pub fn seed_dice_after(&self) -> Vec<f64> {
        self.per_seed(|r| r.dice_after)
    }

    pub fn seed_folding(&self) -> Vec<f64> {
        self.per_seed(|r| r.folding)
    }

    /// `[mean dice_after, sd over seeds, mean epe_after, mean folding]`.
    pub fn summary(&self) -> [f64; 4] {
        let (dice, sd) = mean_sd(&self.seed_dice_after());
        let epe = mean_sd(&self.per_seed(|r| r.epe_after)).0;
        let fold = mean_sd(&self.seed_folding()).0;
        [dice, sd, epe, fold]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub suite: AblationSuite,
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm.name == name)
    }

    /// Per-pair `dice_after(arm) - dice_after(reference)` over all seeds.
    pub fn paired_differences(&self, arm: &str, reference: &str) -> Result<Vec<f64>> {
        let missing = |n: &str| Error::invalid(format!("no arm named '{n}'"));
        let a = self.arm(arm).ok_or_else(|| missing(arm))?;
        let r = self.arm(reference).ok_or_else(|| missing(reference))?;
        let mut out = Vec::new();
        for (sa, sr) in a.seeds.iter().zip(&r.seeds) {
            for (x, y) in sa.records.iter().zip(&sr.records) {
                debug_assert_eq!(x.pair_id, y.pair_id);
                out.push(x.dice_after - y.dice_after);
            }
        }
        Ok(out)
    }

    pub fn write_summary(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(ABLATION_HEADER).map_err(csv_error)?;
        for a in &self.arms {
            let [dice, sd, epe, fold] = a.summary();
            w.write_record([a.arm.name.clone(), dice.to_string(), sd.to_string(), epe.to_string(), fold.to_string(), a.arm.flops.to_string()])
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-pair differences of every arm against the first.
    pub fn write_paired(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(PAIRED_HEADER).map_err(csv_error)?;
        let Some(reference) = self.arms.first() else {
            w.flush()?;
            return Ok(());
        };
        for a in &self.arms[1..] {
            for (sa, sr) in a.seeds.iter().zip(&reference.seeds) {
                for (x, y) in sa.records.iter().zip(&sr.records) {
                    w.write_record([
                        a.arm.name.clone(),
                        reference.arm.name.clone(),
                        sa.seed.to_string(),
                        x.pair_id.to_string(),
                        x.dice_after.to_string(),
                        y.dice_after.to_string(),
                        (x.dice_after - y.dice_after).to_string(),
                    ])
                    .map_err(csv_error)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains `cfg` in single precision and evaluates its validation pairs.
pub fn run_arm(cfg: &TrainConfig, pool: &PairPool<f32>) -> Result<Vec<EvalRecord>> {
    let outcome = train_with_pool(cfg, pool)?;
    let ids: Vec<u64> = cfg.val_pairs.clone().collect();
    evaluate(&outcome.model, pool, &ids, cfg.record_timing)
}

/// Runs every arm for every seed through `runner` (which receives the
/// arm config with its seed set).
pub fn run_ablation_with(
    suite: AblationSuite,
    arms: Vec<AblationArm>,
    seeds: &[u64],
    mut runner: impl FnMut(&TrainConfig) -> Result<Vec<EvalRecord>>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("an ablation needs at least one seed"));
    }
    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let records = runner(&TrainConfig { seed, ..arm.config.clone() })?;
            per_seed.push(SeedResult { seed, records });
        }
        results.push(ArmResult { arm, seeds: per_seed });
    }
    Ok(AblationReport { suite, arms: results })
}

pub fn run_ablation(suite: AblationSuite, base: &TrainConfig, seeds: &[u64], kinds: Option<&[BlockKind]>) -> Result<AblationReport> {
    let arms = ablation_arms(suite, base, kinds)?;
    let pool = PairPool::new(base.data.clone());
    run_ablation_with(suite, arms, seeds, |cfg| run_arm(cfg, &pool))
}
