//! Deterministic training, evaluation metrics, and ablation experiments.

mod ablation;
mod eval;

pub use ablation::{
    ablation_arms, matched_width_scale, run_ablation, run_ablation_with, run_arm, AblationArm, AblationReport, AblationSuite,
    ArmResult, SeedResult, ABLATION_HEADER, FLOP_TOLERANCE, PAIRED_HEADER,
};
pub use eval::{dice, evaluate, mean_dice, summarize, write_eval, EvalRecord, EvalSummary, EVAL_HEADER};

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::regnet::{default_ncc_window, ncc_loss, smoothness_loss, supervised_epe_loss, RegModel, RegModelConfig, NCC_EPS};
use crate::scalar::Real;
use crate::synth::{synth_pair, SynthConfig, SynthPair};
use crate::warp::warp_var;

/// Default training learning rate; sized for a 2000-step budget.
pub const DEFAULT_LR: f64 = 1e-3;

pub const CURVE_HEADER: [&str; 5] = ["step", "loss", "ncc", "smooth", "epe"];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Smoothness weight.
    pub lambda: f64,
    /// Supervised endpoint-error weight.
    pub mu: f64,
    /// Initialisation and pair-schedule seed.
    pub seed: u64,
    /// Generator settings; each pair uses its id as the generator seed.
    pub data: SynthConfig,
    pub train_pairs: Range<u64>,
    pub val_pairs: Range<u64>,
    pub model: RegModelConfig,
    /// Odd NCC window; defaults to 9 (2D) or 7 (3D).
    pub ncc_window: Option<usize>,
    /// Record wall-clock forward times; off makes every CSV reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 1,
            adam: AdamConfig { lr: DEFAULT_LR, ..AdamConfig::default() },
            lambda: 1.0,
            mu: 0.0,
            seed: 0,
            data: SynthConfig::default(),
            train_pairs: 1000..1256,
            val_pairs: 0..20,
            model: RegModelConfig::default(),
            ncc_window: None,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::invalid("steps and batch must be at least 1"));
        }
        if self.train_pairs.is_empty() || self.val_pairs.is_empty() {
            return Err(Error::invalid("train and validation pair ranges must be non-empty"));
        }
        if self.train_pairs.start < self.val_pairs.end && self.val_pairs.start < self.train_pairs.end {
            return Err(Error::invalid(format!(
                "train pairs {:?} and validation pairs {:?} overlap",
                self.train_pairs, self.val_pairs
            )));
        }
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.adam.lr)));
        }
        if self.data.spatial_shape.len() != self.model.rank {
            return Err(Error::invalid(format!(
                "data shape {:?} does not match model rank {}",
                self.data.spatial_shape, self.model.rank
            )));
        }
        if let Some(w) = self.ncc_window {
            if w % 2 == 0 {
                return Err(Error::invalid(format!("ncc window {w} must be odd")));
            }
        }
        self.model.validate()?;
        self.data.validate_for_depth(self.model.depth)
    }

    pub fn window(&self) -> usize {
        self.ncc_window.unwrap_or_else(|| default_ncc_window(self.model.rank))
    }
}

/// Lazily generated, memoised synthetic pairs keyed by id.
pub struct PairPool<T: Real> {
    data: SynthConfig,
    cache: RefCell<HashMap<u64, Rc<SynthPair<T>>>>,
}

impl<T: Real> PairPool<T> {
    pub fn new(data: SynthConfig) -> Self {
        Self { data, cache: RefCell::new(HashMap::new()) }
    }

    pub fn get(&self, id: u64) -> Result<Rc<SynthPair<T>>> {
        if let Some(p) = self.cache.borrow().get(&id) {
            return Ok(p.clone());
        }
        let pair = Rc::new(synth_pair(&SynthConfig { seed: id, ..self.data.clone() })?);
        self.cache.borrow_mut().insert(id, pair.clone());
        Ok(pair)
    }
}

/// One row of the training curve; losses are batch means before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub loss: f64,
    pub ncc: f64,
    pub smooth: f64,
    pub epe: f64,
}

pub struct TrainOutcome<T: Real> {
    pub model: RegModel<T>,
    pub curve: Vec<CurveRow>,
}

/// Differentiable loss terms for one pair: `(total, ncc, smooth, epe)`.
pub fn pair_losses<'t, T: Real>(
    model: &RegModel<T>,
    tape: &'t Tape<T>,
    pair: &SynthPair<T>,
    lambda: f64,
    mu: f64,
    window: usize,
) -> Result<[Var<'t, T>; 4]> {
    let grid = pair.fixed.grid();
    let out = model.forward(tape, &pair.fixed, &pair.moving)?;
    let warped = warp_var(tape.constant(pair.moving.to_tensor()), grid, out.field)?;
    let ncc = ncc_loss(warped, tape.constant(pair.fixed.to_tensor()), grid, window, NCC_EPS)?;
    let smooth = smoothness_loss(out.field, grid)?;
    let epe = supervised_epe_loss(out.field, tape.constant(pair.truth_field.to_tensor()))?;
    let mut total = ncc.add(smooth.scale(T::lit(lambda))?)?;
    if mu > 0.0 {
        total = total.add(epe.scale(T::lit(mu))?)?;
    }
    Ok([total, ncc, smooth, epe])
}

/// Id of the pair used at `(step, slot)`: uniform over the training range,
/// drawn from a stream seeded by the run seed.
fn schedule(cfg: &TrainConfig) -> impl FnMut() -> u64 + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5C4E_D01E_0000);
    move || rng.random_range(cfg.train_pairs.clone())
}

pub fn train<T: Real>(cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let pool = PairPool::new(cfg.data.clone());
    train_with_pool(cfg, &pool)
}

/// Trains from a fixed-seed initialisation; aborts with [`Error::Diverged`]
/// on the first non-finite loss or gradient.
pub fn train_with_pool<T: Real>(cfg: &TrainConfig, pool: &PairPool<T>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut model = RegModel::<T>::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut next_pair = schedule(cfg);
    let window = cfg.window();
    let inv_batch = T::one() / T::from_usize_lossy(cfg.batch);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let diverged = |e: Error| Error::Diverged { step, detail: e.to_string() };
        let tape = Tape::new();
        let mut sums = [0.0; 4];
        let mut total: Option<Var<'_, T>> = None;
        for _ in 0..cfg.batch {
            let pair = pool.get(next_pair())?;
            let terms = pair_losses(&model, &tape, &pair, cfg.lambda, cfg.mu, window).map_err(diverged)?;
            for (s, t) in sums.iter_mut().zip(&terms) {
                *s += t.value().item().to_f64_lossy();
            }
            let scaled = terms[0].scale(inv_batch).map_err(diverged)?;
            total = Some(match total {
                Some(acc) => acc.add(scaled).map_err(diverged)?,
                None => scaled,
            });
        }
        let n = cfg.batch as f64;
        let row = CurveRow { step, loss: sums[0] / n, ncc: sums[1] / n, smooth: sums[2] / n, epe: sums[3] / n };
        if !row.loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {}", row.loss) });
        }
        curve.push(row);
        let grads = tape.backward(total.expect("batch >= 1")).map_err(diverged)?;
        model.params.zero_grad();
        model.params.accumulate(&grads);
        if !model.params.grads_finite() {
            return Err(Error::Diverged { step, detail: "non-finite gradient".into() });
        }
        adam.step(&mut model.params);
    }
    Ok(TrainOutcome { model, curve })
}

/// Mean of `ncc + λ·smooth (+ μ·epe)` over the validation pairs.
pub fn validation_loss<T: Real>(model: &RegModel<T>, cfg: &TrainConfig, pool: &PairPool<T>) -> Result<f64> {
    let mut total = 0.0;
    for id in cfg.val_pairs.clone() {
        let pair = pool.get(id)?;
        let tape = Tape::new();
        let [loss, ..] = pair_losses(model, &tape, &pair, cfg.lambda, cfg.mu, cfg.window())?;
        total += loss.value().item().to_f64_lossy();
    }
    Ok(total / (cfg.val_pairs.end - cfg.val_pairs.start) as f64)
}

pub fn write_curve(curve: &[CurveRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER).map_err(csv_error)?;
    for r in curve {
        w.write_record([r.step.to_string(), r.loss.to_string(), r.ncc.to_string(), r.smooth.to_string(), r.epe.to_string()])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests;
