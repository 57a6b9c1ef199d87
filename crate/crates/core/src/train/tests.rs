use super::*;
use crate::blocks::{BlockKind, WindowSpec};
use crate::grid::Grid;
use crate::regnet::ncc_value;
use crate::volume::LabelMap;

fn tiny() -> TrainConfig {
    TrainConfig {
        steps: 3,
        data: SynthConfig { spatial_shape: vec![16, 16], warp_smoothness: 3.0, warp_amplitude: 1.5, ..Default::default() },
        train_pairs: 100..110,
        val_pairs: 0..3,
        model: RegModelConfig {
            depth: 3,
            widths: vec![4, 4, 8],
            window_spec: WindowSpec::new(vec![3], true).unwrap(),
            ..Default::default()
        },
        record_timing: false,
        ..Default::default()
    }
}

fn labels(extents: Vec<usize>, data: Vec<u32>) -> LabelMap {
    LabelMap::new(Grid::new(extents).unwrap(), data).unwrap()
}

#[test]
fn dice_examples() {
    let a = labels(vec![2, 2], vec![1, 1, 0, 0]);
    let b = labels(vec![2, 2], vec![0, 0, 1, 1]);
    let c = labels(vec![2, 2], vec![1, 0, 1, 0]);
    assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
    assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    assert_eq!(dice(&a, &c, 1).unwrap(), 0.5);
    assert_eq!(dice(&a, &b, 7).unwrap(), 1.0);
    assert!(dice(&a, &labels(vec![4], vec![1, 1, 0, 0]), 1).is_err());
}

#[test]
fn dice_symmetry_and_relabeling() {
    let a = labels(vec![3, 3], vec![0, 1, 1, 2, 2, 2, 0, 3, 1]);
    let b = labels(vec![3, 3], vec![1, 1, 0, 2, 2, 0, 3, 3, 1]);
    let perm = |l: &LabelMap| labels(vec![3, 3], l.data().iter().map(|&v| [5, 9, 2, 7][v as usize]).collect());
    let (pa, pb) = (perm(&a), perm(&b));
    for (l, pl) in [(0, 5), (1, 9), (2, 2), (3, 7)] {
        let d = dice(&a, &b, l).unwrap();
        assert_eq!(d, dice(&b, &a, l).unwrap());
        assert_eq!(d, dice(&pa, &pb, pl).unwrap());
        assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn config_validation() {
    assert!(tiny().validate().is_ok());
    assert!(TrainConfig { steps: 0, ..tiny() }.validate().is_err());
    assert!(TrainConfig { val_pairs: 105..108, ..tiny() }.validate().is_err());
    assert!(TrainConfig { lambda: -1.0, ..tiny() }.validate().is_err());
    assert!(TrainConfig { ncc_window: Some(4), ..tiny() }.validate().is_err());
    let mut bad = tiny();
    bad.data.spatial_shape = vec![16, 16, 16];
    assert!(bad.validate().is_err());
}

#[test]
fn training_is_deterministic_and_starts_unregistered() {
    let cfg = tiny();
    let a = train::<f64>(&cfg).unwrap();
    let b = train::<f64>(&cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.curve.len(), 3);
    let mut w1 = Vec::new();
    let mut w2 = Vec::new();
    write_curve(&a.curve, &mut w1).unwrap();
    write_curve(&b.curve, &mut w2).unwrap();
    assert_eq!(w1, w2);
    assert!(String::from_utf8(w1).unwrap().starts_with("step,loss,ncc,smooth,epe\n"));

    let first = schedule(&cfg)();
    let pair = synth_pair::<f64>(&SynthConfig { seed: first, ..cfg.data.clone() }).unwrap();
    let unregistered = ncc_value(&pair.moving, &pair.fixed, cfg.window()).unwrap();
    assert!((a.curve[0].loss - unregistered).abs() < 1e-12, "{} vs {unregistered}", a.curve[0].loss);
    assert_eq!(a.curve[0].smooth, 0.0);
    // a different seed changes the schedule and initialisation
    let c = train::<f64>(&TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.curve, c.curve);
}

#[test]
fn untrained_model_leaves_pairs_unchanged() {
    let cfg = tiny();
    let model = RegModel::<f32>::new(cfg.model.clone(), 0).unwrap();
    let pool = PairPool::new(cfg.data.clone());
    let recs = evaluate(&model, &pool, &[2, 0, 1], false).unwrap();
    assert_eq!(recs.iter().map(|r| r.pair_id).collect::<Vec<_>>(), vec![0, 1, 2]);
    for r in &recs {
        assert_eq!(r.dice_after, r.dice_before);
        assert_eq!(r.dice_after_per_label, r.dice_before_per_label);
        assert_eq!(r.epe_after, r.epe_before);
        assert_eq!(r.folding, 0.0);
        assert!(r.epe_before > 0.0);
    }
    let mut out = Vec::new();
    write_eval(&recs, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "pair_id,dice_before,dice_after,epe_before,epe_after,folding,forward_s");
    assert_eq!(lines.len(), 1 + 3 + 2);
    assert!(lines[4].starts_with("mean,") && lines[5].starts_with("sd,"));
    let s = summarize(&recs);
    assert_eq!(s.dice_before(), s.dice_after());
}

#[test]
fn degenerate_pairs_have_perfect_dice() {
    let mut data = tiny().data;
    data.warp_amplitude = 0.0;
    data.max_rotation_deg = 0.0;
    data.max_log_scale = 0.0;
    data.max_shear = 0.0;
    data.max_translation = 0.0;
    let cfg = TrainConfig { data, ..tiny() };
    let model = RegModel::<f64>::new(cfg.model.clone(), 0).unwrap();
    let pool = PairPool::new(cfg.data.clone());
    for r in evaluate(&model, &pool, &[0, 1, 2], false).unwrap() {
        assert!(r.dice_before_per_label.iter().all(|&(_, d)| d == 1.0));
        assert_eq!(r.epe_before, 0.0);
    }
}

#[test]
fn training_reduces_validation_loss() {
    let cfg = TrainConfig { steps: 150, adam: AdamConfig { lr: 1e-3, ..Default::default() }, ..tiny() };
    let pool = PairPool::<f32>::new(cfg.data.clone());
    let before = validation_loss(&RegModel::new(cfg.model.clone(), cfg.seed).unwrap(), &cfg, &pool).unwrap();
    let out = train_with_pool(&cfg, &pool).unwrap();
    let after = validation_loss(&out.model, &cfg, &pool).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn divergence_is_reported_with_its_step() {
    let cfg = TrainConfig { steps: 5, adam: AdamConfig { lr: 1e30, ..Default::default() }, ..tiny() };
    match train::<f32>(&cfg) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.curve)),
    }
}

#[test]
fn suite_arms() {
    let base = tiny();
    let arms = ablation_arms(AblationSuite::FullResVsStride4, &base, None).unwrap();
    assert_eq!(arms.len(), 2);
    let mut a = arms[0].config.clone();
    a.model.stride4_start = true;
    assert_eq!(a, arms[1].config);

    let arms = ablation_arms(AblationSuite::FirstStageConv, &base, None).unwrap();
    assert_eq!(arms[0].config, base);
    assert_eq!(arms[1].config.model.first_stage, BlockKind::Conv);

    let arms = ablation_arms(AblationSuite::LambdaSweep, &base, None).unwrap();
    assert_eq!(arms.iter().map(|a| a.config.lambda).collect::<Vec<_>>(), vec![0.5, 1.0, 2.0]);

    let arms = ablation_arms(AblationSuite::BlockSwap, &base, None).unwrap();
    assert_eq!(arms.len(), BlockKind::ALL.len());
    let target = crate::cost::model_flops(&base.model, &base.data.grid().unwrap()).unwrap() as f64;
    for arm in &arms {
        assert!((arm.flops as f64 / target - 1.0).abs() <= FLOP_TOLERANCE, "{} {}", arm.name, arm.flops as f64 / target);
        let m = &arm.config.model;
        assert_eq!(m.decoder_block.name(), arm.name);
        assert_eq!(m.stride4_start, matches!(m.decoder_block, BlockKind::WindowAttention | BlockKind::GlobalAttention));
        assert_eq!(arm.config.val_pairs, base.val_pairs);
    }
    assert_eq!("block_swap".parse::<AblationSuite>().unwrap(), AblationSuite::BlockSwap);
    assert!("nope".parse::<AblationSuite>().is_err());
}

#[test]
fn ablation_report_csvs() {
    let base = tiny();
    let arms = ablation_arms(AblationSuite::LambdaSweep, &base, None).unwrap();
    let report = run_ablation_with(AblationSuite::LambdaSweep, arms, &[0, 1], |cfg| {
        let rec = |id: u64| EvalRecord {
            pair_id: id,
            dice_before_per_label: vec![],
            dice_after_per_label: vec![],
            dice_before: 0.5,
            dice_after: 0.5 + cfg.lambda / 10.0 + cfg.seed as f64 / 100.0,
            epe_before: 1.0,
            epe_after: 0.5,
            folding: 0.01 / cfg.lambda,
            forward_s: 0.0,
        };
        Ok(cfg.val_pairs.clone().map(rec).collect())
    })
    .unwrap();
    let arm = report.arm("lambda_2").unwrap();
    let means = arm.seed_dice_after();
    assert!((means[0] - 0.7).abs() < 1e-12 && (means[1] - 0.71).abs() < 1e-12);
    let diffs = report.paired_differences("lambda_2", "lambda_0.5").unwrap();
    assert_eq!(diffs.len(), 6);
    assert!(diffs.iter().all(|d| (d - 0.15).abs() < 1e-12));
    let mut out = Vec::new();
    report.write_summary(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("arm,mean_dice_after,sd_dice_after,mean_epe_after,folding,flops\n"));
    assert_eq!(text.lines().count(), 4);
    let mut out = Vec::new();
    report.write_paired(&mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1 + 2 * 2 * 3);
}
