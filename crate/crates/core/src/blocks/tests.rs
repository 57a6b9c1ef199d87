use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Tape};
use crate::nn::{Init, ParamStore};
use crate::tensor::Tensor;

fn random(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        store.set(id, random(shape, seed + i as u64, 0.5)).unwrap();
    }
}

fn build(kind: BlockKind, rank: usize, width: usize, side: usize, index: usize) -> (ParamStore<f64>, Block) {
    let spec = WindowSpec::default();
    let mut store = ParamStore::new();
    let mut init = Init::new(11);
    let mut p = BlockParams::new(kind, rank, width, &spec);
    p.side_channels = side;
    p.index = index;
    let block = {
        let mut b = Builder::new(&mut store, &mut init);
        Block::new(&mut b, "blk", &p).unwrap()
    };
    (store, block)
}

#[test]
fn partition_tiles_exactly() {
    let g = Grid::new(vec![4, 4]).unwrap();
    let tape = Tape::new();
    let x = tape.constant(random(vec![4, 4, 3], 1, 1.0));
    let (w, meta) = window_partition(x, &g, &[2, 2], &[0, 0]).unwrap();
    assert_eq!(w.shape(), vec![4, 4, 3]);
    assert_eq!(meta.pad_high, vec![0, 0]);
}

#[test]
fn partition_pads_high_side() {
    let g = Grid::new(vec![5, 5]).unwrap();
    let tape = Tape::new();
    let x = tape.constant(random(vec![5, 5, 2], 2, 1.0));
    let (w, meta) = window_partition(x, &g, &[3, 3], &[0, 0]).unwrap();
    assert_eq!(meta.num_windows(), 4);
    assert_eq!(meta.pad_high, vec![1, 1]);
    assert_eq!(meta.pad_low, vec![0, 0]);
    assert_eq!(w.shape(), vec![4, 9, 2]);
    // window 1 covers rows 0..3, columns 3..6; column 5 is padding
    let wv = w.value();
    let xv = x.value();
    assert_eq!(wv.get(&[1, 0, 0]), xv.get(&[0, 3, 0]));
    assert_eq!(wv.get(&[1, 2, 1]), 0.0);
}

#[test]
fn merge_inverts_partition_bit_exactly() {
    let g = Grid::new(vec![7, 9]).unwrap();
    let tape = Tape::new();
    let x = tape.constant(random(vec![7, 9, 5], 3, 1.0));
    for shift in [[0, 0], [1, 1], [2, 0]] {
        for layout in [WindowLayout::WindowMajor, WindowLayout::PositionMajor] {
            let meta = WindowMeta::new(&g, &[3, 4], &shift, layout).unwrap();
            let back = meta.merge(meta.partition(x).unwrap()).unwrap();
            assert_eq!(*back.value(), *x.value());
        }
    }
    let g3 = Grid::new(vec![3, 4, 5]).unwrap();
    let x3 = tape.constant(random(vec![3, 4, 5, 2], 4, 1.0));
    let (w, meta) = window_partition(x3, &g3, &[3, 3, 3], &[1, 1, 1]).unwrap();
    assert_eq!(*window_merge(w, &meta).unwrap().value(), *x3.value());
    // one window covering the whole image
    let (w, meta) = window_partition(x, &g, &[7, 9], &[0, 0]).unwrap();
    assert_eq!(meta.num_windows(), 1);
    assert_eq!(*window_merge(w, &meta).unwrap().value(), *x.value());
    assert!(window_partition(x, &g, &[3, 3], &[3, 0]).is_err());
}

#[test]
fn token_mix_examples() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(1);
    let mix = {
        let mut b = Builder::new(&mut store, &mut init);
        TokenMix::new(&mut b, "m", 2, true).unwrap()
    };
    store.set(mix.w1, Tensor::zeros(vec![2, 2])).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let x = tape.constant(random(vec![3, 2, 4], 5, 1.0));
    let y = mix.forward(&ctx, x, WindowLayout::WindowMajor).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));

    store.set(mix.w1, Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    store.set(mix.w2, Tensor::from_f64(vec![2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    // large positive inputs sit in GELU's linear region
    let x = tape.constant(Tensor::from_f64(vec![1, 2, 1], &[10.0, 20.0]).unwrap());
    let y = mix.forward(&ctx, x, WindowLayout::WindowMajor).unwrap().value();
    assert!((y.data()[0] - 20.0).abs() < 1e-12 && (y.data()[1] - 10.0).abs() < 1e-12);

    randomize(&mut store, 40);
    let err = grad_check(
        |t, x| {
            let ctx = Ctx::new(t, &store);
            mix.forward(&ctx, x, WindowLayout::WindowMajor)?.mul(t.constant(random(vec![3, 2, 4], 6, 1.0)))?.sum_all()
        },
        &random(vec![3, 2, 4], 7, 1.0),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn both_layouts_mix_identically() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(2);
    let mix = {
        let mut b = Builder::new(&mut store, &mut init);
        TokenMix::new(&mut b, "m", 9, false).unwrap()
    };
    let g = Grid::new(vec![6, 5]).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let x = tape.constant(random(vec![6, 5, 3], 8, 1.0));
    let run = |layout| {
        let meta = WindowMeta::new(&g, &[3, 3], &[1, 1], layout).unwrap();
        meta.merge(mix.forward(&ctx, meta.partition(x).unwrap(), layout).unwrap()).unwrap().value()
    };
    let (a, b) = (run(WindowLayout::WindowMajor), run(WindowLayout::PositionMajor));
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn every_block_is_identity_at_init() {
    for rank in [2, 3] {
        let shape: Vec<usize> = if rank == 2 { vec![8, 8, 4] } else { vec![4, 4, 4, 4] };
        let g = Grid::new(shape[..rank].to_vec()).unwrap();
        for kind in BlockKind::ALL {
            for index in [0, 1] {
                let side = if kind == BlockKind::CmwMlp { 3 } else { 0 };
                let (store, block) = build(kind, rank, 4, side, index);
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store);
                let x = tape.constant(random(shape.clone(), 9, 1.0));
                let s = (side > 0).then(|| {
                    let mut ss = g.extents().to_vec();
                    ss.push(side);
                    tape.constant(random(ss, 10, 1.0))
                });
                let y = block.forward(&ctx, x, &g, s).unwrap();
                assert_eq!(*y.value(), *x.value(), "{kind} rank {rank}");
            }
        }
    }
}

#[test]
fn cmw_block_preserves_shape_at_64() {
    let (mut store, block) = build(BlockKind::CmwMlp, 2, 16, 0, 0);
    randomize(&mut store, 50);
    let g = Grid::new(vec![64, 64]).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let x = tape.constant(random(vec![64, 64, 16], 11, 1.0));
    assert_eq!(block.forward(&ctx, x, &g, None).unwrap().shape(), vec![64, 64, 16]);
}

#[test]
fn cmw_block_is_equivariant_to_period_105_translations() {
    let (mut store, block) = build(BlockKind::CmwMlp, 2, 2, 0, 0);
    randomize(&mut store, 60);
    // 1D reduction: periodic along the first axis, extent 1 on the second
    let g = Grid::new(vec![210, 1]).unwrap();
    let period = random(vec![105, 1, 2], 12, 1.0);
    let data: Vec<f64> = period.data().iter().chain(period.data()).copied().collect();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let x = tape.constant(Tensor::new(vec![210, 1, 2], data).unwrap());
    let y = block.forward(&ctx, x, &g, None).unwrap().value();
    let (first, second) = y.data().split_at(210);
    assert_ne!(first, &period.data()[..]);
    for (a, b) in first.iter().zip(second) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn every_block_passes_grad_check() {
    for rank in [2, 3] {
        let shape: Vec<usize> = if rank == 2 { vec![8, 8, 4] } else { vec![4, 4, 4, 4] };
        let g = Grid::new(shape[..rank].to_vec()).unwrap();
        for kind in BlockKind::ALL {
            let side = if kind == BlockKind::CmwMlp { 2 } else { 0 };
            let (mut store, block) = build(kind, rank, 4, side, 1);
            randomize(&mut store, 70);
            let weights = random(shape.clone(), 13, 1.0);
            let side_val = {
                let mut ss = g.extents().to_vec();
                ss.push(side.max(1));
                random(ss, 14, 1.0)
            };
            let err = grad_check(
                |t, x| {
                    let ctx = Ctx::new(t, &store);
                    let s = (side > 0).then(|| t.constant(side_val.clone()));
                    block.forward(&ctx, x, &g, s)?.mul(t.constant(weights.clone()))?.sum_all()
                },
                &random(shape.clone(), 15, 1.0),
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{kind} rank {rank}: {err}");
        }
    }
}

#[test]
fn cmw_block_sum_loss_grad_check_on_1x8x8x4() {
    let (mut store, block) = build(BlockKind::CmwMlp, 2, 4, 0, 0);
    randomize(&mut store, 80);
    let g = Grid::new(vec![8, 8]).unwrap();
    let err = grad_check(
        |t, x| {
            let ctx = Ctx::new(t, &store);
            block.forward(&ctx, x.reshape(vec![8, 8, 4])?, &g, None)?.sum_all()
        },
        &random(vec![1, 8, 8, 4], 16, 1.0),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn uniform_attention_reproduces_identical_rows() {
    let store = ParamStore::<f64>::new();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let row = [0.3, -0.2, 0.7, 0.1, 0.4, -0.5];
    let data: Vec<f64> = (0..5).flat_map(|_| row).collect();
    let tiles = tape.constant(Tensor::new(vec![1, 5, 6], data).unwrap());
    let out = attention::multi_head(&ctx, tiles, 1, None).unwrap().value();
    for t in 0..5 {
        for c in 0..2 {
            assert!((out.get(&[0, t, c]) - row[4 + c]).abs() < 1e-15);
        }
    }
}

#[test]
fn conv_examples() {
    let g = Grid::new(vec![5, 5]).unwrap();
    let tape = Tape::new();
    let mut impulse = vec![0.0; 25];
    impulse[12] = 1.0;
    let x = tape.constant(Tensor::new(vec![5, 5, 1], impulse).unwrap());
    let ones = tape.constant(Tensor::ones(vec![9, 1]));
    let y = conv_nd(x, &g, &[3, 3], ones, None).unwrap().value();
    for r in 0..5 {
        for c in 0..5 {
            let inside = (1..4).contains(&r) && (1..4).contains(&c);
            assert_eq!(y.get(&[r, c, 0]), if inside { 1.0 } else { 0.0 });
        }
    }
    let img = tape.constant(random(vec![5, 5, 2], 17, 1.0));
    let eye = tape.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = conv_nd(img, &g, &[1, 1], eye, None).unwrap();
    assert_eq!(*y.value(), *img.value());
}

fn encoder_config(stride4: bool) -> EncoderConfig {
    EncoderConfig {
        rank: 2,
        in_channels: 1,
        depth: 4,
        widths: vec![4, 8, 8, 8],
        first_stage: BlockKind::WindowMixerMlp,
        stage_kind: BlockKind::WindowMixerMlp,
        blocks_per_level: 1,
        spec: WindowSpec::default(),
        stride4,
        heads: 2,
        kernel: 3,
        mlp_ratio: 2,
    }
}

#[test]
fn pyramid_halves_at_every_level() {
    for stride4 in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(3);
        let enc = {
            let mut b = Builder::new(&mut store, &mut init);
            PyramidEncoder::new(&mut b, "enc", encoder_config(stride4)).unwrap()
        };
        let g = Grid::new(vec![64, 64]).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let img = tape.constant(random(vec![64, 64, 1], 18, 1.0));
        let pyr = enc.forward(&ctx, img, &g).unwrap();
        let extents: Vec<usize> = pyr.grids.iter().map(|g| g.extents()[0]).collect();
        if stride4 {
            assert_eq!(pyr.first_level, 2);
            assert_eq!(extents, vec![16, 8]);
        } else {
            assert_eq!(extents, vec![64, 32, 16, 8]);
        }
        let (cg, cx) = pyr.level(3);
        assert_eq!(cg.extents(), &[8, 8]);
        assert_eq!(cx.shape(), vec![8, 8, 8]);
    }
}

#[test]
fn constant_image_gives_constant_pyramid() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(4);
    let enc = {
        let mut b = Builder::new(&mut store, &mut init);
        PyramidEncoder::new(&mut b, "enc", encoder_config(false)).unwrap()
    };
    let g = Grid::new(vec![16, 16]).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let pyr = enc.forward(&ctx, tape.constant(Tensor::full(vec![16, 16, 1], 0.7)), &g).unwrap();
    for x in &pyr.levels {
        let v = x.value();
        let c = v.last_dim();
        let first = &v.data()[..c];
        for row in v.data().chunks_exact(c) {
            for (a, b) in row.iter().zip(first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encoder_rejects_small_images_and_bad_depth() {
    let cfg = encoder_config(false);
    assert!(cfg.level_grids(&Grid::new(vec![4, 64]).unwrap()).is_err());
    let mut bad = cfg.clone();
    bad.depth = 1;
    bad.widths = vec![4];
    assert!(bad.validate().unwrap_err().to_string().contains("depth >= 2"));
}

#[test]
fn window_spec_validation() {
    assert!(WindowSpec::new(vec![3, 5, 7], true).is_ok());
    assert!(WindowSpec::new(vec![], true).is_err());
    assert!(WindowSpec::new(vec![3, 4], true).is_err());
    assert!(WindowSpec::new(vec![5, 3], true).is_err());
    assert_eq!("cmw_mlp".parse::<BlockKind>().unwrap(), BlockKind::CmwMlp);
    assert!("mlp".parse::<BlockKind>().is_err());
}
