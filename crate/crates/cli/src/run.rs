use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mlpreg::blocks::BlockKind;
use mlpreg::config::{parse_config, RunConfig};
use mlpreg::cost::{crossover_table, scaling_exponent, write_crossover};
use mlpreg::mvd::{self, MvdPayload};
use mlpreg::regnet::{ncc_value, RegModel};
use mlpreg::synth::{synth_pair, SynthConfig};
use mlpreg::train::{
    ablation_arms, evaluate, run_ablation_with, run_arm, summarize, train_with_pool, write_curve, write_eval, AblationSuite,
    PairPool,
};
use mlpreg::volume::Volume;
use mlpreg::warp::{jacobian_nonpositive_fraction, warp_volume, Interpolation};
use mlpreg::Error;

use crate::{Command, Common, Failure};

type Outcome = Result<(), Failure>;

fn runtime(context: &str) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Loads the configuration, applies `--seed`, creates `--out` and echoes
/// the resolved configuration into it.
fn prepare(common: &Common) -> Result<RunConfig, Failure> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let name = common.config.as_ref().map_or("<defaults>".into(), |p| p.display().to_string());
    let mut cfg = parse_config(&text).map_err(|e| Failure::Usage(format!("{name}: {e}")))?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    fs::create_dir_all(&common.out).map_err(io(&common.out))?;
    let echo = common.out.join("config.toml");
    fs::write(&echo, cfg.to_document()).map_err(io(&echo))?;
    Ok(cfg)
}

fn create(path: PathBuf) -> Result<BufWriter<File>, Failure> {
    File::create(&path).map(BufWriter::new).map_err(io(&path))
}

fn write_mvd(path: PathBuf, payload: MvdPayload) -> Outcome {
    mvd::write(&path, &payload).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn read_volume(path: &Path) -> Result<Volume<f32>, Failure> {
    match mvd::read(path) {
        Ok(MvdPayload::Volume(v)) => Ok(v),
        Ok(other) => Err(Failure::Runtime(format!("{}: expected a volume, found {:?}", path.display(), other.kind()))),
        Err(e) => Err(Failure::Runtime(format!("{}: {e}", path.display()))),
    }
}

fn model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<RegModel<f32>, Failure> {
    match checkpoint {
        Some(dir) => RegModel::load(cfg.model().clone(), dir).map_err(runtime("checkpoint")),
        None => RegModel::new(cfg.model().clone(), cfg.train.seed).map_err(runtime("model")),
    }
}

pub fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Synth { common } => synth(&common),
        Command::Train { common } => train(&common),
        Command::Register { common, fixed, moving, checkpoint } => register(&common, &fixed, &moving, checkpoint.as_deref()),
        Command::Eval { common, checkpoint } => eval(&common, checkpoint.as_deref()),
        Command::Ablate { common, suite, kinds } => ablate(&common, &suite, kinds),
        Command::Bench { common } => bench(&common),
    }
}

fn synth(common: &Common) -> Outcome {
    let cfg = prepare(common)?;
    let out = &common.out;
    let data = cfg.data();
    for seed in data.seed..data.seed + cfg.count {
        let pair = synth_pair::<f32>(&SynthConfig { seed, ..data.clone() }).map_err(runtime("synth"))?;
        let file = |part: &str| out.join(format!("pair_{seed}_{part}.mvd"));
        write_mvd(file("fixed"), MvdPayload::Volume(pair.fixed))?;
        write_mvd(file("moving"), MvdPayload::Volume(pair.moving))?;
        write_mvd(file("field"), MvdPayload::Field(pair.truth_field))?;
        write_mvd(file("fixed_labels"), MvdPayload::Labels(pair.fixed_labels))?;
        write_mvd(file("moving_labels"), MvdPayload::Labels(pair.moving_labels))?;
    }
    let manifest = out.join("manifest.txt");
    fs::write(&manifest, format!("{}count = {}\n", data.manifest(), cfg.count)).map_err(io(&manifest))
}

fn train(common: &Common) -> Outcome {
    let cfg = prepare(common)?;
    let pool = PairPool::<f32>::new(cfg.data().clone());
    let outcome = train_with_pool(&cfg.train, &pool).map_err(runtime("train"))?;
    outcome.model.save(common.out.join("checkpoint")).map_err(runtime("checkpoint"))?;
    write_curve(&outcome.curve, create(common.out.join("curve.csv"))?).map_err(runtime("curve.csv"))
}

fn register(common: &Common, fixed: &Path, moving: &Path, checkpoint: Option<&Path>) -> Outcome {
    let cfg = prepare(common)?;
    let (f, m) = (read_volume(fixed)?, read_volume(moving)?);
    let model = model(&cfg, checkpoint)?;
    let start = Instant::now();
    let result = model.register(&f, &m).map_err(runtime("register"))?;
    let seconds = if cfg.train.record_timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let warped = warp_volume(&m, &result.field, Interpolation::Linear).map_err(runtime("warp"))?;
    let window = cfg.train.window();
    let metrics = [
        ncc_value(&m, &f, window).map_err(runtime("metrics"))?,
        ncc_value(&warped, &f, window).map_err(runtime("metrics"))?,
        jacobian_nonpositive_fraction(&result.field).map_err(runtime("metrics"))?,
        seconds,
    ];
    write_mvd(common.out.join("field.mvd"), MvdPayload::Field(result.field))?;
    write_mvd(common.out.join("warped.mvd"), MvdPayload::Volume(warped))?;
    let path = common.out.join("metrics.csv");
    let mut w = create(path.clone())?;
    writeln!(w, "ncc_loss_before,ncc_loss_after,folding,forward_s").map_err(io(&path))?;
    let row: Vec<String> = metrics.iter().map(|v| v.to_string()).collect();
    writeln!(w, "{}", row.join(",")).map_err(io(&path))?;
    w.flush().map_err(io(&path))
}

fn eval(common: &Common, checkpoint: Option<&Path>) -> Outcome {
    let cfg = prepare(common)?;
    let model = model(&cfg, checkpoint)?;
    let pool = PairPool::<f32>::new(cfg.data().clone());
    let ids: Vec<u64> = cfg.train.val_pairs.clone().collect();
    let records = evaluate(&model, &pool, &ids, cfg.train.record_timing).map_err(runtime("eval"))?;
    write_eval(&records, create(common.out.join("eval.csv"))?).map_err(runtime("eval.csv"))?;
    let s = summarize(&records);
    println!("dice {:.4} -> {:.4}, epe {:.4} -> {:.4}, folding {:.5}", s.dice_before(), s.dice_after(), s.epe_before(), s.epe_after(), s.folding());
    Ok(())
}

fn ablate(common: &Common, suite: &str, kinds: Option<Vec<String>>) -> Outcome {
    let suite: AblationSuite = suite.parse().map_err(Failure::Usage)?;
    let kinds = kinds
        .map(|ks| ks.iter().map(|k| k.parse::<BlockKind>()).collect::<Result<Vec<_>, _>>())
        .transpose()
        .map_err(Failure::Usage)?;
    let cfg = prepare(common)?;
    let arms = ablation_arms(suite, &cfg.train, kinds.as_deref()).map_err(runtime("ablate"))?;
    let path = common.out.join("arms.csv");
    let mut w = create(path.clone())?;
    writeln!(w, "arm,flops,widths,stride4_start,first_stage,encoder_block,decoder_block,lambda").map_err(io(&path))?;
    for a in &arms {
        let m = &a.config.model;
        let widths: Vec<String> = m.widths.iter().map(|w| w.to_string()).collect();
        writeln!(w, "{},{},{},{},{},{},{},{}", a.name, a.flops, widths.join(" "), m.stride4_start, m.first_stage, m.encoder_block, m.decoder_block, a.config.lambda)
            .map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    let pool = PairPool::<f32>::new(cfg.data().clone());
    let report = run_ablation_with(suite, arms, &cfg.ablation_seeds, |c| {
        eprintln!("training: decoder {}, lambda {}, seed {}", c.model.decoder_block, c.lambda, c.seed);
        run_arm(c, &pool)
    })
    .map_err(runtime("ablate"))?;
    report.write_summary(create(common.out.join("ablation.csv"))?).map_err(runtime("ablation.csv"))?;
    report.write_paired(create(common.out.join("paired.csv"))?).map_err(runtime("paired.csv"))
}

fn bench(common: &Common) -> Outcome {
    let cfg = prepare(common)?;
    let b = &cfg.bench;
    let reps = b.measure.then_some(b.reps);
    let table = crossover_table(&b.resolutions, b.channels, &cfg.model().window_spec, b.kernel, b.activation_budget as u128, reps)
        .map_err(runtime("bench"))?;
    write_crossover(&table, create(common.out.join("crossover.csv"))?).map_err(runtime("crossover.csv"))?;
    let path = common.out.join("summary.csv");
    let mut w = create(path.clone())?;
    writeln!(w, "kind,flop_exponent").map_err(io(&path))?;
    for kind in BlockKind::ALL {
        let e = scaling_exponent(&table, kind).map_or(String::new(), |e| format!("{e:.4}"));
        writeln!(w, "{kind},{e}").map_err(io(&path))?;
    }
    let cross = table.crossover.map_or(String::new(), |r| r.to_string());
    writeln!(w, "crossover_resolution,{cross}").map_err(io(&path))?;
    w.flush().map_err(io(&path))
}
