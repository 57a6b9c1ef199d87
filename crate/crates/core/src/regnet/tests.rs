use super::*;
use crate::nn::ParamId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(extents: Vec<usize>, seed: u64) -> Volume<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grid::new(extents).unwrap();
    let n = g.numel();
    Volume::new(g, 1, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn small(decoder_block: BlockKind) -> RegModelConfig {
    RegModelConfig { depth: 3, widths: vec![4, 8, 8], decoder_block, blocks_per_level: 1, ..Default::default() }
}

#[test]
fn untrained_model_is_identity() {
    let model = RegModel::<f64>::new(RegModelConfig::default(), 3).unwrap();
    let (f, m) = (image(vec![32, 32], 1), image(vec![32, 32], 2));
    let r = model.register(&f, &m).unwrap();
    assert!(r.field.data().iter().all(|&v| v == 0.0));
    assert_eq!(r.affine.unwrap(), AffineTransform::identity(2));
    assert_eq!(r.level_fields.len(), 4);
    let extents: Vec<_> = r.level_fields.iter().map(|f| f.grid().extents()[0]).collect();
    assert_eq!(extents, vec![4, 8, 16, 32]);
    assert_eq!(r.warped, m);
}

#[test]
fn every_decoder_kind_builds_and_runs() {
    for kind in BlockKind::ALL {
        let model = RegModel::<f64>::new(small(kind), 1).unwrap();
        let r = model.register(&image(vec![16, 12], 3), &image(vec![16, 12], 4)).unwrap();
        assert_eq!(r.field.grid().extents(), &[16, 12]);
        assert!(r.field.data().iter().all(|&v| v == 0.0), "{kind}");
    }
}

#[test]
fn stride4_predicts_at_quarter_resolution() {
    let cfg = RegModelConfig { stride4_start: true, ..Default::default() };
    let model = RegModel::<f64>::new(cfg, 1).unwrap();
    let r = model.register(&image(vec![32, 32], 1), &image(vec![32, 32], 2)).unwrap();
    assert_eq!(r.field.grid().extents(), &[32, 32]);
    let extents: Vec<_> = r.level_fields.iter().map(|f| f.grid().extents()[0]).collect();
    assert_eq!(extents, vec![4, 8]);
}

#[test]
fn volumetric_model_runs() {
    let cfg = RegModelConfig { rank: 3, depth: 2, widths: vec![4, 4], blocks_per_level: 1, ..Default::default() };
    let model = RegModel::<f64>::new(cfg, 1).unwrap();
    let r = model.register(&image(vec![8, 8, 8], 1), &image(vec![8, 8, 8], 2)).unwrap();
    assert_eq!(r.field.data().len(), 8 * 8 * 8 * 3);
}

#[test]
fn invalid_inputs() {
    let cfg = RegModelConfig { depth: 1, widths: vec![8], ..Default::default() };
    let err = RegModel::<f64>::new(cfg, 0).err().unwrap();
    assert!(err.to_string().contains("depth >= 2"), "{err}");
    let model = RegModel::<f64>::new(small(BlockKind::CmwMlp), 0).unwrap();
    assert!(model.register(&image(vec![16, 16], 1), &image(vec![16, 12], 2)).is_err());
    assert!(model.register(&image(vec![2, 16], 1), &image(vec![2, 16], 2)).is_err());
}

fn total_loss(model: &RegModel<f64>, f: &Volume<f64>, m: &Volume<f64>) -> f64 {
    let tape = Tape::new();
    loss_var(model, &tape, f, m).value().item()
}

fn loss_var<'t>(model: &RegModel<f64>, tape: &'t Tape<f64>, f: &Volume<f64>, m: &Volume<f64>) -> Var<'t, f64> {
    let out = model.forward(tape, f, m).unwrap();
    let warped = warp_var(tape.constant(m.to_tensor()), f.grid(), out.field).unwrap();
    let ncc = ncc_loss(warped, tape.constant(f.to_tensor()), f.grid(), 5, NCC_EPS).unwrap();
    ncc.add(smoothness_loss(out.field, f.grid()).unwrap()).unwrap()
}

/// After one perturbation of the zero-initialised heads, every parameter
/// gradient matches central differences.
#[test]
fn end_to_end_gradients() {
    let mut model = RegModel::<f64>::new(small(BlockKind::CmwMlp), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<ParamId> = model.params.ids().collect();
    for &id in &ids {
        let mut v = model.params.value(id).clone();
        v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
        model.params.set(id, v).unwrap();
    }
    let (f, m) = (image(vec![8, 8], 1), image(vec![8, 8], 2));
    let tape = Tape::new();
    let loss = loss_var(&model, &tape, &f, &m);
    let grads = tape.backward(loss).unwrap();
    model.params.zero_grad();
    model.params.accumulate(&grads);
    let h = 1e-6;
    let mut checked = 0;
    for &id in ids.iter().step_by(3) {
        let analytic = model.params.grad(id).data()[0];
        let base = model.params.value(id).clone();
        let mut plus = base.clone();
        plus.data_mut()[0] += h;
        model.params.set(id, plus).unwrap();
        let lp = total_loss(&model, &f, &m);
        let mut minus = base.clone();
        minus.data_mut()[0] -= h;
        model.params.set(id, minus).unwrap();
        let lm = total_loss(&model, &f, &m);
        model.params.set(id, base).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let tol = 1e-5 * (1.0 + numeric.abs());
        assert!((analytic - numeric).abs() <= tol, "{}: {analytic} vs {numeric}", model.params.name(id));
        checked += 1;
    }
    assert!(checked > 10);
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let mut model = RegModel::<f64>::new(small(BlockKind::CmwMlp), 5).unwrap();
    let ids: Vec<ParamId> = model.params.ids().collect();
    for &id in &ids {
        let v = model.params.value(id).map(|x| x + 0.01);
        model.params.set(id, v).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = RegModel::<f64>::load(small(BlockKind::CmwMlp), dir.path()).unwrap();
    let (f, m) = (image(vec![16, 16], 1), image(vec![16, 16], 2));
    assert_eq!(model.register(&f, &m).unwrap().field, loaded.register(&f, &m).unwrap().field);
    assert!(RegModel::<f64>::load(small(BlockKind::Conv), dir.path()).is_err());
}
