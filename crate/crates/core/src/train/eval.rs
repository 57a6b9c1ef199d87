use std::io::Write;
use std::time::Instant;

use super::{csv_error, PairPool};
use crate::error::{Error, Result};
use crate::regnet::{endpoint_error, RegModel};
use crate::scalar::Real;
use crate::volume::{DisplacementField, LabelMap};
use crate::warp::{jacobian_nonpositive_fraction, warp_labels};

pub const EVAL_HEADER: [&str; 7] = ["pair_id", "dice_before", "dice_after", "epe_before", "epe_after", "folding", "forward_s"];

/// `2|A∩B| / (|A|+|B|)` for one label; 1 when both masks are empty.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u32) -> Result<f64> {
    if a.grid() != b.grid() {
        return Err(Error::shape("dice", format!("{:?} vs {:?}", a.grid().extents(), b.grid().extents())));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Per-label Dice over the foreground labels of either map, and their mean.
pub fn mean_dice(a: &LabelMap, b: &LabelMap) -> Result<(Vec<(u32, f64)>, f64)> {
    let mut labels = a.labels();
    labels.extend(b.labels());
    labels.sort_unstable();
    labels.dedup();
    let per: Vec<(u32, f64)> = labels.iter().map(|&l| dice(a, b, l).map(|d| (l, d))).collect::<Result<_>>()?;
    let mean = if per.is_empty() { 1.0 } else { per.iter().map(|(_, d)| d).sum::<f64>() / per.len() as f64 };
    Ok((per, mean))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub pair_id: u64,
    pub dice_before_per_label: Vec<(u32, f64)>,
    pub dice_after_per_label: Vec<(u32, f64)>,
    pub dice_before: f64,
    pub dice_after: f64,
    pub epe_before: f64,
    pub epe_after: f64,
    pub folding: f64,
    pub forward_s: f64,
}

/// Registers every pair in `ids` (read-only on model and data), ordered by id.
pub fn evaluate<T: Real>(model: &RegModel<T>, pool: &PairPool<T>, ids: &[u64], record_timing: bool) -> Result<Vec<EvalRecord>> {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let pair = pool.get(id)?;
        let start = Instant::now();
        let result = model.register(&pair.fixed, &pair.moving)?;
        let forward_s = if record_timing { start.elapsed().as_secs_f64() } else { 0.0 };
        let warped = warp_labels(&pair.moving_labels, &result.field)?;
        let (before, dice_before) = mean_dice(&pair.fixed_labels, &pair.moving_labels)?;
        let (after, dice_after) = mean_dice(&pair.fixed_labels, &warped)?;
        let zero = DisplacementField::zeros(pair.truth_field.grid().clone());
        records.push(EvalRecord {
            pair_id: id,
            dice_before_per_label: before,
            dice_after_per_label: after,
            dice_before,
            dice_after,
            epe_before: endpoint_error(&zero, &pair.truth_field)?,
            epe_after: endpoint_error(&result.field, &pair.truth_field)?,
            folding: jacobian_nonpositive_fraction(&result.field)?,
            forward_s,
        });
    }
    Ok(records)
}

/// Means and sample standard deviations of the scalar columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub mean: [f64; 6],
    pub sd: [f64; 6],
}

impl EvalSummary {
    pub fn dice_before(&self) -> f64 {
        self.mean[0]
    }
    pub fn dice_after(&self) -> f64 {
        self.mean[1]
    }
    pub fn epe_before(&self) -> f64 {
        self.mean[2]
    }
    pub fn epe_after(&self) -> f64 {
        self.mean[3]
    }
    pub fn folding(&self) -> f64 {
        self.mean[4]
    }
}

fn columns(r: &EvalRecord) -> [f64; 6] {
    [r.dice_before, r.dice_after, r.epe_before, r.epe_after, r.folding, r.forward_s]
}

pub(crate) fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

pub fn summarize(records: &[EvalRecord]) -> EvalSummary {
    let mut mean = [0.0; 6];
    let mut sd = [0.0; 6];
    for k in 0..6 {
        let col: Vec<f64> = records.iter().map(|r| columns(r)[k]).collect();
        (mean[k], sd[k]) = mean_sd(&col);
    }
    EvalSummary { mean, sd }
}

/// One row per pair, then `mean` and `sd` summary rows.
pub fn write_eval(records: &[EvalRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVAL_HEADER).map_err(csv_error)?;
    let row = |id: String, v: [f64; 6]| std::iter::once(id).chain(v.iter().map(|x| x.to_string())).collect::<Vec<_>>();
    for r in records {
        w.write_record(row(r.pair_id.to_string(), columns(r))).map_err(csv_error)?;
    }
    if !records.is_empty() {
        let s = summarize(records);
        w.write_record(row("mean".into(), s.mean)).map_err(csv_error)?;
        w.write_record(row("sd".into(), s.sd)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
