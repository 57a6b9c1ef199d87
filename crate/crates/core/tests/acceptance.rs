//! Acceptance suite: one pass/fail line per criterion.
//!
//! Training criteria share a memoised runner, so an arm that appears in
//! several comparisons (the default model, for one) is trained once per
//! seed. The whole suite takes roughly an hour on one core.

use std::cell::RefCell;
use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlpreg::blocks::{window_partition, Block, BlockKind, BlockParams, WindowLayout, WindowMeta, WindowSpec};
use mlpreg::config::{parse_config, ConfigError};
use mlpreg::correlation::local_correlation;
use mlpreg::cost::{analytic_cost, crossover_table, scaling_exponent};
use mlpreg::grid::displacements;
use mlpreg::mvd::{self, MvdError, MvdPayload};
use mlpreg::nn::{Builder, Ctx, Init, ParamStore};
use mlpreg::regnet::{ncc_loss, smoothness_loss, supervised_epe_loss, RegModel, RegModelConfig, NCC_EPS};
use mlpreg::synth::{synth_pair, SynthConfig};
use mlpreg::train::{
    ablation_arms, dice, evaluate, run_ablation_with, summarize, train_with_pool, write_curve, write_eval, AblationArm, AblationReport,
    AblationSuite, EvalRecord, PairPool, TrainConfig, FLOP_TOLERANCE,
};
use mlpreg::warp::{warp_tensor, warp_var};
use mlpreg::{grad_check, DisplacementField, Grid, LabelMap, Tape, Tensor};

/// Steps per arm for the ablation criteria (5-9); the end-to-end
/// criterion (4) uses the full default budget.
const ABLATION_STEPS: usize = 500;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------- 1

fn block_grad_error(kind: BlockKind, extents: &[usize], seed: u64) -> f64 {
    let grid = Grid::new(extents.to_vec()).unwrap();
    let spec = WindowSpec::default();
    let mut p = BlockParams::new(kind, grid.rank(), 4, &spec);
    if kind == BlockKind::CmwMlp {
        p.side_channels = 3;
    }
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(seed);
    let block = Block::new(&mut Builder::new(&mut store, &mut init), "b", &p).unwrap();
    // non-zero output heads so every path carries gradient
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        let t = random(shape, seed * 100 + i as u64).map(|v| 0.5 * v);
        store.set(id, t).unwrap();
    }
    let x = random(grid.with_channels(4), seed + 1);
    let side = random(grid.with_channels(3), seed + 2);
    let w = random(grid.with_channels(4), seed + 3);
    grad_check(
        |tape, v| {
            let ctx = Ctx::new(tape, &store);
            let s = (p.side_channels > 0).then(|| tape.constant(side.clone()));
            block.forward(&ctx, v, &grid, s)?.mul(tape.constant(w.clone()))?.sum_all()
        },
        &x,
        1e-5,
    )
    .unwrap()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |err: f64, what: String| {
        if err > worst.0 {
            worst = (err, what);
        }
    };
    for kind in BlockKind::ALL {
        note(block_grad_error(kind, &[8, 8], 1), format!("{kind} 2D"));
        note(block_grad_error(kind, &[4, 4, 4], 2), format!("{kind} 3D"));
    }
    let grid = Grid::new(vec![6, 6]).unwrap();
    let b = random(vec![6, 6, 3], 5);
    let wc = random(vec![6, 6, 25], 6);
    note(
        grad_check(|t, x| local_correlation(x, t.constant(b.clone()), &grid, 2, true)?.mul(t.constant(wc.clone()))?.sum_all(), &random(vec![6, 6, 3], 4), 1e-5)
            .unwrap(),
        "local_correlation".into(),
    );
    let src = random(vec![6, 6, 2], 7);
    let field = random(vec![6, 6, 2], 8).map(|v| 1.3 * v);
    let ww = random(vec![6, 6, 2], 9);
    note(grad_check(|t, f| warp_var(t.constant(src.clone()), &grid, f)?.mul(t.constant(ww.clone()))?.sum_all(), &field, 1e-5).unwrap(), "warp (field)".into());
    note(grad_check(|t, s| warp_var(s, &grid, t.constant(field.clone()))?.mul(t.constant(ww.clone()))?.sum_all(), &src, 1e-5).unwrap(), "warp (source)".into());
    let g9 = Grid::new(vec![9, 9]).unwrap();
    let fixed = random(vec![9, 9, 1], 10);
    note(grad_check(|t, m| ncc_loss(m, t.constant(fixed.clone()), &g9, 5, NCC_EPS), &random(vec![9, 9, 1], 11), 1e-5).unwrap(), "ncc_loss".into());
    note(grad_check(|_, f| smoothness_loss(f, &grid), &field, 1e-5).unwrap(), "smoothness_loss".into());
    let secs = start.elapsed().as_secs_f64();
    verdict(worst.0 <= 1e-4 && secs < 300.0, format!("max rel err {:.2e} ({}), {secs:.1}s", worst.0, worst.1))
}

// ---------------------------------------------------------------- 2

fn clamp_read(src: &Tensor<f64>, grid: &Grid, coords: &[isize], ch: usize) -> f64 {
    let c = src.shape()[grid.rank()];
    let idx: Vec<usize> = coords.iter().zip(grid.extents()).map(|(&x, &e)| x.clamp(0, e as isize - 1) as usize).collect();
    src.data()[grid.offset(&idx) * c + ch]
}

fn criterion_2() -> Verdict {
    let mut failures = Vec::new();
    // local correlation against a direct double loop
    let grid = Grid::new(vec![7, 6]).unwrap();
    let (a, b) = (random(vec![7, 6, 3], 1), random(vec![7, 6, 3], 2));
    let tape = Tape::new();
    let corr = local_correlation(tape.constant(a.clone()), tape.constant(b.clone()), &grid, 2, true).unwrap().value();
    let mut err: f64 = 0.0;
    for p in 0..grid.numel() {
        let pc = grid.coords(p);
        for (k, d) in displacements(2, 2).iter().enumerate() {
            let q: Vec<isize> = pc.iter().zip(d).map(|(&x, &y)| x as isize + y).collect();
            let inside = q.iter().zip(grid.extents()).all(|(&x, &e)| x >= 0 && x < e as isize);
            let expect = if inside {
                let qi = grid.offset(&q.iter().map(|&x| x as usize).collect::<Vec<_>>());
                let (va, vb) = (&a.data()[p * 3..p * 3 + 3], &b.data()[qi * 3..qi * 3 + 3]);
                let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (n(va) * n(vb) + 1e-8)
            } else {
                0.0
            };
            err = err.max((corr.data()[p * 25 + k] - expect).abs());
        }
    }
    if err > 1e-9 {
        failures.push(format!("local_correlation {err:.1e}"));
    }
    // warp with integer and half-voxel fields
    let src = random(vec![7, 6, 2], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ints: Vec<f64> = (0..84).map(|_| rng.random_range(-3i32..=3) as f64).collect();
    let field = DisplacementField::new(grid.clone(), ints.clone()).unwrap();
    let out = warp_tensor(&src, &grid, &field).unwrap();
    let mut werr: f64 = 0.0;
    for p in 0..grid.numel() {
        let c: Vec<isize> = grid.coords(p).iter().enumerate().map(|(ax, &x)| x as isize + ints[p * 2 + ax] as isize).collect();
        for ch in 0..2 {
            werr = werr.max((out.data()[p * 2 + ch] - clamp_read(&src, &grid, &c, ch)).abs());
        }
    }
    let half = DisplacementField::constant(grid.clone(), &[0.5, 0.0]).unwrap();
    let out = warp_tensor(&src, &grid, &half).unwrap();
    for p in 0..grid.numel() {
        let pc = grid.coords(p);
        let lo = [pc[0] as isize, pc[1] as isize];
        let hi = [pc[0] as isize + 1, pc[1] as isize];
        for ch in 0..2 {
            let expect = 0.5 * (clamp_read(&src, &grid, &lo, ch) + clamp_read(&src, &grid, &hi, ch));
            werr = werr.max((out.data()[p * 2 + ch] - expect).abs());
        }
    }
    if werr > 1e-12 {
        failures.push(format!("warp {werr:.1e}"));
    }
    // window partition / merge round trips, both layouts and shifts
    let x = tape.constant(random(vec![7, 9, 5], 5));
    let g79 = Grid::new(vec![7, 9]).unwrap();
    for shift in [[0, 0], [1, 1], [2, 1]] {
        for layout in [WindowLayout::WindowMajor, WindowLayout::PositionMajor] {
            let meta = WindowMeta::new(&g79, &[3, 5], &shift, layout).unwrap();
            if *meta.merge(meta.partition(x).unwrap()).unwrap().value() != *x.value() {
                failures.push(format!("window round trip {shift:?} {layout:?}"));
            }
        }
    }
    let (w, _) = window_partition(x, &g79, &[3, 3], &[0, 0]).unwrap();
    if w.shape() != vec![9, 9, 5] {
        failures.push("partition shape".into());
    }
    // dice examples
    let lm = |d: Vec<u32>| LabelMap::new(Grid::new(vec![2, 2]).unwrap(), d).unwrap();
    let (m1, m2, m3) = (lm(vec![1, 1, 0, 0]), lm(vec![0, 0, 1, 1]), lm(vec![1, 0, 1, 0]));
    if dice(&m1, &m1, 1).unwrap() != 1.0 || dice(&m1, &m2, 1).unwrap() != 0.0 || dice(&m1, &m3, 1).unwrap() != 0.5 {
        failures.push("dice examples".into());
    }
    // supervised EPE against the mean Euclidean norm
    let (p, q) = (random(vec![5, 4, 2], 6), random(vec![5, 4, 2], 7));
    let epe = supervised_epe_loss(tape.constant(p.clone()), tape.constant(q.clone())).unwrap().value().item();
    let expect = (0..20).map(|i| ((p.data()[2 * i] - q.data()[2 * i]).powi(2) + (p.data()[2 * i + 1] - q.data()[2 * i + 1]).powi(2)).sqrt()).sum::<f64>() / 20.0;
    if (epe - expect).abs() > 1e-12 {
        failures.push(format!("epe {epe} vs {expect}"));
    }
    // analytic cost: stated examples and a loop count on N=4, C=2
    let g = analytic_cost(BlockKind::GlobalAttention, 4096, 16, 4096).unwrap();
    let m = analytic_cost(BlockKind::WindowMixerMlp, 4096, 16, 49).unwrap();
    let c = analytic_cost(BlockKind::Conv, 4096, 16, 9).unwrap();
    if g.flops - 8 * 4096 * 256 != 1_073_741_824 || m.flops != 12_845_056 || c.flops != 18_874_368 {
        failures.push("analytic cost examples".into());
    }
    let mut ops = 0u128;
    let (n, ch) = (4, 2);
    for (rows, k, cols) in [(n, ch, 3 * ch), (n, ch, n), (n, n, ch), (n, ch, ch)] {
        for _ in 0..rows * k * cols {
            ops += 2;
        }
    }
    if analytic_cost(BlockKind::GlobalAttention, 4, 2, 4).unwrap().flops != ops {
        failures.push("analytic cost loop count".into());
    }
    let ok = failures.is_empty();
    verdict(ok, if ok { format!("correlation {err:.1e}, warp {werr:.1e}, windows, dice, epe, cost all exact") } else { failures.join("; ") })
}

// ---------------------------------------------------------------- 3

fn criterion_3(pool: &PairPool<f32>) -> Verdict {
    let model = RegModel::<f32>::new(RegModelConfig::default(), 0).unwrap();
    let pair = pool.get(0).unwrap();
    let r = model.register(&pair.fixed, &pair.moving).unwrap();
    let zero = r.field.data().iter().all(|&v| v == 0.0);
    let affine = r.affine.as_ref().is_some_and(|a| a.matrix == vec![1.0, 0.0, 0.0, 1.0] && a.translation == vec![0.0, 0.0]);
    let ids: Vec<u64> = (0..20).collect();
    let recs = evaluate(&model, pool, &ids, false).unwrap();
    let same = recs.iter().all(|r| r.dice_after.to_bits() == r.dice_before.to_bits() && r.epe_after == r.epe_before);
    verdict(zero && affine && same, format!("zero field {zero}, identity affine {affine}, dice unchanged on 20 pairs {same}"))
}

// ---------------------------------------------------------------- shared training

struct Runner {
    pool: PairPool<f32>,
    cache: RefCell<HashMap<String, (Vec<EvalRecord>, f64)>>,
}

impl Runner {
    /// Validation records and wall-clock seconds (train + eval) of one run.
    fn run(&self, cfg: &TrainConfig) -> (Vec<EvalRecord>, f64) {
        let key = format!("{cfg:?}");
        if let Some(hit) = self.cache.borrow().get(&key) {
            return hit.clone();
        }
        let start = Instant::now();
        let outcome = train_with_pool(cfg, &self.pool).expect("training runs");
        let ids: Vec<u64> = cfg.val_pairs.clone().collect();
        let recs = evaluate(&outcome.model, &self.pool, &ids, false).expect("evaluation runs");
        let secs = start.elapsed().as_secs_f64();
        eprintln!("  trained {} steps, seed {}, decoder {}: {:.0}s", cfg.steps, cfg.seed, cfg.model.decoder_block, secs);
        self.cache.borrow_mut().insert(key, (recs.clone(), secs));
        (recs, secs)
    }

    fn suite(&self, suite: AblationSuite, kinds: Option<&[BlockKind]>) -> (AblationReport, Vec<AblationArm>) {
        let base = TrainConfig { steps: ABLATION_STEPS, record_timing: false, ..Default::default() };
        let arms = ablation_arms(suite, &base, kinds).unwrap();
        let report = run_ablation_with(suite, arms.clone(), &SEEDS, |c| Ok(self.run(c).0)).unwrap();
        (report, arms)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------- 4

fn criterion_4(runner: &Runner) -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig { seed, record_timing: false, ..Default::default() };
        let (recs, secs) = runner.run(&cfg);
        let s = summarize(&recs);
        let better = recs.iter().filter(|r| r.dice_after > r.dice_before).count();
        let seed_ok = s.dice_after() > s.dice_before() && better * 10 >= recs.len() * 9 && s.epe_after() <= 0.5 * s.epe_before() && secs <= 1800.0;
        ok &= seed_ok;
        lines.push(format!(
            "seed {seed}: dice {:.3}->{:.3} ({better}/{} improved), epe {:.2}->{:.2}, {secs:.0}s",
            s.dice_before(),
            s.dice_after(),
            recs.len(),
            s.epe_before(),
            s.epe_after()
        ));
    }
    verdict(ok, lines.join("; "))
}

// ---------------------------------------------------------------- 5-7, 9

fn wins(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x > y).count()
}

fn criterion_5(runner: &Runner) -> Verdict {
    let (report, _) = runner.suite(AblationSuite::FullResVsStride4, None);
    let full = report.arm("full_res").unwrap().seed_dice_after();
    let s4 = report.arm("stride4").unwrap().seed_dice_after();
    let diff = mean(&report.paired_differences("full_res", "stride4").unwrap());
    let w = wins(&full, &s4);
    verdict(w >= 4 && diff > 0.0, format!("full_res [{}] vs stride4 [{}]: {w}/5 seeds, mean paired diff {diff:+.4}", fmt(&full), fmt(&s4)))
}

fn criterion_6(runner: &Runner) -> Verdict {
    let (report, _) = runner.suite(AblationSuite::FirstStageConv, None);
    let mlp = report.arm("first_stage_mlp").unwrap().seed_dice_after();
    let conv = report.arm("first_stage_conv").unwrap().seed_dice_after();
    let n = conv.iter().zip(&mlp).filter(|(c, m)| c <= m).count();
    verdict(n >= 4, format!("conv [{}] <= mlp [{}] on {n}/5 seeds", fmt(&conv), fmt(&mlp)))
}

fn criterion_7(runner: &Runner) -> Verdict {
    let kinds = [BlockKind::CmwMlp, BlockKind::WindowMixerMlp, BlockKind::ShiftMlp, BlockKind::WindowAttention];
    let (report, arms) = runner.suite(AblationSuite::BlockSwap, Some(&kinds));
    let flops: Vec<f64> = arms.iter().map(|a| a.flops as f64).collect();
    let spread = flops.iter().cloned().fold(f64::MIN, f64::max) / flops.iter().cloned().fold(f64::MAX, f64::min);
    let matched = spread <= 1.0 + FLOP_TOLERANCE;
    let attn = report.arm("window_attention").unwrap();
    let stride4 = attn.arm.config.model.stride4_start;
    let attn_dice = attn.seed_dice_after();
    let mut ok = matched && stride4;
    let mut parts = vec![format!("flop spread {spread:.3}"), format!("window_attention [{}]", fmt(&attn_dice))];
    for k in &kinds[..3] {
        let d = report.arm(k.name()).unwrap().seed_dice_after();
        let w = wins(&d, &attn_dice);
        ok &= w >= 4;
        parts.push(format!("{k} [{}] wins {w}/5", fmt(&d)));
    }
    verdict(ok, parts.join("; "))
}

fn criterion_9(runner: &Runner) -> Verdict {
    let (report, _) = runner.suite(AblationSuite::LambdaSweep, None);
    let folds: Vec<f64> = ["lambda_0.5", "lambda_1", "lambda_2"].iter().map(|n| mean(&report.arm(n).unwrap().seed_folding())).collect();
    let monotone = folds.windows(2).all(|w| w[1] <= w[0]);
    // the default model at the full budget
    let default_fold = mean(
        &SEEDS.iter().map(|&seed| summarize(&runner.run(&TrainConfig { seed, record_timing: false, ..Default::default() }).0).folding()).collect::<Vec<_>>(),
    );
    verdict(
        monotone && default_fold < 0.05,
        format!("folding at lambda 0.5/1/2: {:.5}/{:.5}/{:.5}; default model {:.5}", folds[0], folds[1], folds[2], default_fold),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Verdict {
    let spec = WindowSpec::new(vec![7], false).unwrap();
    let table = crossover_table(&[32, 64, 128, 256], 16, &spec, 3, 4_000_000, None).unwrap();
    let flops = |r, k| table.rows.iter().find(|row| row.resolution == r && row.kind == k).unwrap().flops as f64;
    let ratio = flops(64, BlockKind::GlobalAttention) / flops(64, BlockKind::WindowMixerMlp);
    let ratio8 = {
        let g = analytic_cost(BlockKind::GlobalAttention, 64, 16, 64).unwrap().flops as f64;
        g / analytic_cost(BlockKind::WindowMixerMlp, 64, 16, 49).unwrap().flops as f64
    };
    let e = |k| scaling_exponent(&table, k).unwrap();
    let (mlp, conv, global) = (e(BlockKind::WindowMixerMlp), e(BlockKind::Conv), e(BlockKind::GlobalAttention));
    let ok = ratio > 80.0 && ratio8 < 8.0 && (mlp - 1.0).abs() <= 0.1 && (conv - 1.0).abs() <= 0.1 && (global - 2.0).abs() <= 0.1;
    verdict(ok, format!("ratio at 64x64 {ratio:.1}, at 8x8 {ratio8:.2}; exponents mlp {mlp:.3}, conv {conv:.3}, global {global:.3}"))
}

// ---------------------------------------------------------------- 10

fn criterion_10(pool: &PairPool<f32>) -> Verdict {
    let model = RegModel::<f32>::new(RegModelConfig::default(), 0).unwrap();
    let pair = pool.get(1).unwrap();
    model.register(&pair.fixed, &pair.moving).unwrap();
    let start = Instant::now();
    model.register(&pair.fixed, &pair.moving).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(secs < 1.0, format!("64x64 register forward {secs:.3}s"))
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Verdict {
    let mut failures = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    // training and evaluation CSVs
    let cfg = TrainConfig {
        steps: 5,
        data: SynthConfig { spatial_shape: vec![32, 32], ..Default::default() },
        val_pairs: 0..3,
        model: RegModelConfig { depth: 3, widths: vec![4, 8, 8], ..Default::default() },
        record_timing: false,
        ..Default::default()
    };
    let csvs = || {
        let pool = PairPool::<f32>::new(cfg.data.clone());
        let out = train_with_pool(&cfg, &pool).unwrap();
        let (mut curve, mut eval) = (Vec::new(), Vec::new());
        write_curve(&out.curve, &mut curve).unwrap();
        write_eval(&evaluate(&out.model, &pool, &[0, 1, 2], false).unwrap(), &mut eval).unwrap();
        (curve, eval)
    };
    if csvs() != csvs() {
        failures.push("training/eval CSVs differ between runs".into());
    }
    // MVD files from two generator runs, and bit-exact round trips
    let pairs = || synth_pair::<f32>(&SynthConfig { seed: 9, ..Default::default() }).unwrap();
    let (p1, p2) = (pairs(), pairs());
    let payloads = |p: &mlpreg::synth::SynthPair<f32>| {
        vec![
            MvdPayload::Volume(p.fixed.clone()),
            MvdPayload::Volume(p.moving.clone()),
            MvdPayload::Field(p.truth_field.clone()),
            MvdPayload::Labels(p.fixed_labels.clone()),
        ]
    };
    for (i, (a, b)) in payloads(&p1).into_iter().zip(payloads(&p2)).enumerate() {
        let (fa, fb) = (dir.path().join(format!("a{i}.mvd")), dir.path().join(format!("b{i}.mvd")));
        mvd::write(&fa, &a).unwrap();
        mvd::write(&fb, &b).unwrap();
        let (ba, bb) = (std::fs::read(&fa).unwrap(), std::fs::read(&fb).unwrap());
        if ba != bb {
            failures.push(format!("mvd {i} differs between runs"));
        }
        let back = mvd::read(&fa).unwrap();
        if back != a || mvd::encode(&back) != ba {
            failures.push(format!("mvd {i} round trip"));
        }
    }
    // malformed inputs
    let good = mvd::encode(&MvdPayload::Volume(p1.fixed.clone()));
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_kind = good.clone();
    bad_kind[4] = 9;
    let checks = [
        matches!(mvd::decode(&bad_magic), Err(MvdError::BadMagic(_))),
        matches!(mvd::decode(&bad_kind), Err(MvdError::UnknownKind(9))),
        matches!(mvd::decode(&good[..good.len() - 3]), Err(MvdError::Truncated { .. })),
        matches!(mvd::decode(&good[..6]), Err(MvdError::Truncated { .. })),
        matches!(parse_config("[train]\nlerning_rate = 1\n"), Err(ConfigError::UnknownKey { line: 2, .. })),
        matches!(parse_config("[model]\ndepth = 0\n"), Err(ConfigError::Range { line: Some(2), .. })),
        matches!(parse_config("[model\n"), Err(ConfigError::Syntax { line: 1, .. })),
        matches!(parse_config("[train]\nsteps = 1.5\n"), Err(ConfigError::Type { line: 2, .. })),
    ];
    if let Some(i) = checks.iter().position(|c| !c) {
        failures.push(format!("malformed-input check {i}"));
    }
    let ok = failures.is_empty();
    verdict(ok, if ok { "CSVs and MVD files bit-identical; round trips exact; error classes correct".to_string() } else { failures.join("; ") })
}

fn main() -> ExitCode {
    // the default harness passes filter and option arguments; honour `--list`
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let runner = Runner { pool: PairPool::new(SynthConfig::default()), cache: RefCell::new(HashMap::new()) };
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("numerical correctness", Box::new(criterion_1)),
        ("oracle equivalence", Box::new(criterion_2)),
        ("initialization identity", Box::new(|| criterion_3(&runner.pool))),
        ("cost asymmetry", Box::new(criterion_8)),
        ("runtime analog", Box::new(|| criterion_10(&runner.pool))),
        ("determinism and formats", Box::new(criterion_11)),
        ("end-to-end registration", Box::new(|| criterion_4(&runner))),
        ("full-resolution finding", Box::new(|| criterion_5(&runner))),
        ("first-stage ablation", Box::new(|| criterion_6(&runner))),
        ("architecture-agnostic check", Box::new(|| criterion_7(&runner))),
        ("smoothness trend", Box::new(|| criterion_9(&runner))),
    ];
    let numbers = [1, 2, 3, 8, 10, 11, 4, 5, 6, 7, 9];
    let mut results = Vec::new();
    for ((name, run), n) in criteria.iter().zip(numbers) {
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {status} {name} [{:.0}s]: {}", start.elapsed().as_secs_f64(), v.detail);
        results.push((n, v.pass));
    }
    results.sort();
    let failed: Vec<String> = results.iter().filter(|r| !r.1).map(|r| r.0.to_string()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
