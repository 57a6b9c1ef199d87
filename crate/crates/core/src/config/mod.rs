//! Run configuration: a sectioned `key = value` document (a strict TOML
//! subset) with sections `[data]`, `[model]`, `[train]` and `[bench]`.
//!
//! Every key is optional. Unknown keys, wrong types and out-of-range values
//! are rejected with the offending line. The resolved configuration can be
//! echoed back (see [`RunConfig::to_document`]) and re-parsed to the same
//! value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;

use thiserror::Error;
use toml::de::{DeTable, DeValue};
use toml::Value;

use crate::blocks::{BlockKind, WindowSpec};
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{name}]{}", hint(.suggestion))]
    UnknownSection { line: usize, name: String, suggestion: Option<String> },
    #[error("line {line}: unknown key '{key}' in [{section}]{}", hint(.suggestion))]
    UnknownKey { line: usize, section: String, key: String, suggestion: Option<String> },
    #[error("line {line}: '{key}' must be {expected}")]
    Type { line: usize, key: String, expected: &'static str },
    #[error("{}{message}", at(.line))]
    Range { line: Option<usize>, key: String, message: String },
}

fn hint(s: &Option<String>) -> String {
    s.as_ref().map(|s| format!(" (did you mean '{s}'?)")).unwrap_or_default()
}

fn at(line: &Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Syntax { line, .. }
            | ConfigError::UnknownSection { line, .. }
            | ConfigError::UnknownKey { line, .. }
            | ConfigError::Type { line, .. } => Some(*line),
            ConfigError::Range { line, .. } => *line,
        }
    }
}

const DATA_KEYS: &[&str] = &[
    "spatial_shape",
    "num_shapes",
    "texture_period",
    "texture_amplitude",
    "noise_std",
    "max_rotation_deg",
    "max_log_scale",
    "max_shear",
    "max_translation",
    "warp_amplitude",
    "warp_smoothness",
    "seed",
    "count",
];
const MODEL_KEYS: &[&str] = &[
    "depth",
    "widths",
    "encoder_block",
    "first_stage",
    "encoder_blocks_per_level",
    "decoder_block",
    "blocks_per_level",
    "window_sizes",
    "shift_alternation",
    "corr_radius",
    "image_correlation",
    "step_correlation",
    "use_affine_stage",
    "stride4_start",
    "heads",
    "kernel",
    "mlp_ratio",
];
const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch",
    "learning_rate",
    "beta1",
    "beta2",
    "eps",
    "lambda",
    "mu",
    "seed",
    "train_pairs",
    "val_pairs",
    "ncc_window",
    "record_timing",
    "ablation_seeds",
];
const BENCH_KEYS: &[&str] = &["resolutions", "channels", "kernel", "activation_budget", "measure", "reps"];
const SECTIONS: &[(&str, &[&str])] = &[("data", DATA_KEYS), ("model", MODEL_KEYS), ("train", TRAIN_KEYS), ("bench", BENCH_KEYS)];

/// Cost benchmark settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Square side lengths swept by the crossover table.
    pub resolutions: Vec<usize>,
    pub channels: usize,
    pub kernel: usize,
    /// Activation budget (elements) used to flag the crossover resolution.
    pub activation_budget: u64,
    /// Time every block kind, not only count.
    pub measure: bool,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { resolutions: vec![16, 32, 64, 128], channels: 16, kernel: 3, activation_budget: 4_000_000, measure: true, reps: 5 }
    }
}

/// Fully resolved configuration of one command. Equality ignores which
/// keys were explicit.
#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Training settings; its `data` and `model` hold the `[data]` and
    /// `[model]` sections.
    pub train: TrainConfig,
    /// Number of pairs `synth` writes, starting at the data seed.
    pub count: u64,
    pub ablation_seeds: Vec<u64>,
    pub bench: BenchConfig,
    /// `section.key` names set explicitly in the source document.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            count: 1,
            ablation_seeds: (0..5).collect(),
            bench: BenchConfig::default(),
            explicit: BTreeSet::new(),
        }
    }
}

impl PartialEq for RunConfig {
    fn eq(&self, other: &Self) -> bool {
        self.train == other.train && self.count == other.count && self.ablation_seeds == other.ablation_seeds && self.bench == other.bench
    }
}

/// Default width of level `l`: 8, 16, then 32 from level 2 on.
pub fn default_widths(depth: usize) -> Vec<usize> {
    (0..depth).map(|l| (8usize << l).min(32)).collect()
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn closest<'a>(word: &str, candidates: &[&'a str]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::damerau_levenshtein(word, c), *c))
        .filter(|(d, c)| *d <= 3.max(c.len() / 3))
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c)
}

struct Entry {
    line: usize,
    value: Value,
}

/// Reads typed values out of one section and records which were set.
struct Section<'a> {
    name: &'static str,
    entries: BTreeMap<String, Entry>,
    explicit: &'a mut BTreeSet<String>,
}

trait FromValue: Sized {
    const EXPECTED: &'static str;
    fn from_value(v: &Value) -> Option<Self>;
}

impl FromValue for i64 {
    const EXPECTED: &'static str = "an integer";
    fn from_value(v: &Value) -> Option<Self> {
        v.as_integer()
    }
}

impl FromValue for f64 {
    const EXPECTED: &'static str = "a number";
    fn from_value(v: &Value) -> Option<Self> {
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }
}

impl FromValue for bool {
    const EXPECTED: &'static str = "true or false";
    fn from_value(v: &Value) -> Option<Self> {
        v.as_bool()
    }
}

impl FromValue for BlockKind {
    const EXPECTED: &'static str = "a block kind (cmw_mlp, window_mixer_mlp, shift_mlp, window_attention, global_attention, conv)";
    fn from_value(v: &Value) -> Option<Self> {
        v.as_str()?.parse().ok()
    }
}

impl FromValue for Vec<i64> {
    const EXPECTED: &'static str = "an array of integers";
    fn from_value(v: &Value) -> Option<Self> {
        v.as_array()?.iter().map(Value::as_integer).collect()
    }
}

impl FromValue for Vec<f64> {
    const EXPECTED: &'static str = "an array of numbers";
    fn from_value(v: &Value) -> Option<Self> {
        v.as_array()?.iter().map(f64::from_value).collect()
    }
}

impl Section<'_> {
    fn get<T: FromValue>(&mut self, key: &str) -> Result<Option<(T, usize)>, ConfigError> {
        let Some(e) = self.entries.get(key) else { return Ok(None) };
        self.explicit.insert(format!("{}.{key}", self.name));
        match T::from_value(&e.value) {
            Some(v) => Ok(Some((v, e.line))),
            None => Err(ConfigError::Type { line: e.line, key: key.into(), expected: T::EXPECTED }),
        }
    }

    fn range(&self, key: &str, line: usize, message: String) -> ConfigError {
        ConfigError::Range { line: Some(line), key: format!("{}.{key}", self.name), message }
    }

    fn int(&mut self, key: &str, slot: &mut usize, min: usize) -> Result<(), ConfigError> {
        if let Some((v, line)) = self.get::<i64>(key)? {
            if v < min as i64 {
                return Err(self.range(key, line, format!("{key} = {v} violates {key} ≥ {min}")));
            }
            *slot = v as usize;
        }
        Ok(())
    }

    fn u64(&mut self, key: &str, slot: &mut u64) -> Result<(), ConfigError> {
        if let Some((v, line)) = self.get::<i64>(key)? {
            if v < 0 {
                return Err(self.range(key, line, format!("{key} = {v} must be non-negative")));
            }
            *slot = v as u64;
        }
        Ok(())
    }

    fn float(&mut self, key: &str, slot: &mut f64, ok: impl Fn(f64) -> bool, rule: &str) -> Result<(), ConfigError> {
        if let Some((v, line)) = self.get::<f64>(key)? {
            if !(v.is_finite() && ok(v)) {
                return Err(self.range(key, line, format!("{key} = {v} violates {rule}")));
            }
            *slot = v;
        }
        Ok(())
    }

    fn flag(&mut self, key: &str, slot: &mut bool) -> Result<(), ConfigError> {
        if let Some((v, _)) = self.get::<bool>(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn kind(&mut self, key: &str, slot: &mut BlockKind) -> Result<(), ConfigError> {
        if let Some((v, _)) = self.get::<BlockKind>(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn ints(&mut self, key: &str, min: i64, len: Option<Range<usize>>) -> Result<Option<(Vec<usize>, usize)>, ConfigError> {
        let Some((v, line)) = self.get::<Vec<i64>>(key)? else { return Ok(None) };
        if let Some(r) = len {
            if !r.contains(&v.len()) {
                return Err(self.range(key, line, format!("{key} needs {} to {} entries, got {}", r.start, r.end - 1, v.len())));
            }
        }
        if let Some(bad) = v.iter().find(|&&x| x < min) {
            return Err(self.range(key, line, format!("{key} entry {bad} violates ≥ {min}")));
        }
        Ok(Some((v.into_iter().map(|x| x as usize).collect(), line)))
    }

    fn pair_range(&mut self, key: &str, slot: &mut Range<u64>) -> Result<(), ConfigError> {
        if let Some((v, line)) = self.ints(key, 0, Some(2..3))? {
            if v[0] >= v[1] {
                return Err(self.range(key, line, format!("{key} = [{}, {}] must be a non-empty [start, end) range", v[0], v[1])));
            }
            *slot = v[0] as u64..v[1] as u64;
        }
        Ok(())
    }
}

/// Splits the document into sections of key entries (with line numbers),
/// rejecting unknown sections and keys.
fn sections(text: &str) -> Result<BTreeMap<&'static str, BTreeMap<String, Entry>>, ConfigError> {
    let syntax = |e: toml::de::Error| ConfigError::Syntax {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    };
    let spanned = DeTable::parse(text).map_err(syntax)?;
    let values: toml::Table = text.parse().map_err(syntax)?;
    let mut out: BTreeMap<&'static str, BTreeMap<String, Entry>> = BTreeMap::new();
    let mut items: Vec<_> = spanned.get_ref().iter().collect();
    items.sort_by_key(|(k, _)| k.span().start);
    for (name, body) in items {
        let line = line_of(text, name.span().start);
        let name = name.get_ref().as_ref();
        let names: Vec<&str> = SECTIONS.iter().map(|s| s.0).collect();
        let Some(&(section, keys)) = SECTIONS.iter().find(|s| s.0 == name) else {
            if !matches!(body.get_ref(), DeValue::Table(_)) {
                return Err(ConfigError::Syntax { line, message: format!("key '{name}' must appear inside a section such as [train]") });
            }
            return Err(ConfigError::UnknownSection { line, name: name.into(), suggestion: closest(name, &names).map(Into::into) });
        };
        let DeValue::Table(table) = body.get_ref() else {
            return Err(ConfigError::Syntax { line, message: format!("'{name}' must be a section") });
        };
        let mut keyed: Vec<_> = table.iter().collect();
        keyed.sort_by_key(|(k, _)| k.span().start);
        let entries = out.entry(section).or_default();
        for (key, _) in keyed {
            let line = line_of(text, key.span().start);
            let key = key.get_ref().as_ref();
            if !keys.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    section: section.into(),
                    key: key.into(),
                    suggestion: closest(key, keys).map(Into::into),
                });
            }
            let value = values[section][key].clone();
            if value.is_table() {
                return Err(ConfigError::Type { line, key: key.into(), expected: "a plain value, not a table" });
            }
            entries.insert(key.into(), Entry { line, value });
        }
    }
    Ok(out)
}

/// Parses, applies defaults and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut raw = sections(text)?;
    let mut cfg = RunConfig::default();
    let mut explicit = BTreeSet::new();
    let mut section = |name: &'static str| raw.remove(name).unwrap_or_default();

    let entries = section("data");
    let mut s = Section { name: "data", entries, explicit: &mut explicit };
    let d = &mut cfg.train.data;
    if let Some((v, _)) = s.ints("spatial_shape", 8, Some(2..4))? {
        d.spatial_shape = v;
    }
    s.int("num_shapes", &mut d.num_shapes, 1)?;
    if let Some((v, line)) = s.get::<Vec<f64>>("texture_period")? {
        if v.len() != 2 || !(v[0] >= 2.0 && v[1] >= v[0] && v[1].is_finite()) {
            return Err(s.range("texture_period", line, "texture_period must be [low, high] with 2 ≤ low ≤ high".into()));
        }
        d.texture_period = (v[0], v[1]);
    }
    let nonneg = |v: f64| v >= 0.0;
    s.float("texture_amplitude", &mut d.texture_amplitude, nonneg, "≥ 0")?;
    s.float("noise_std", &mut d.noise_std, nonneg, "≥ 0")?;
    s.float("max_rotation_deg", &mut d.max_rotation_deg, |v| (0.0..=45.0).contains(&v), "0 ≤ max_rotation_deg ≤ 45")?;
    s.float("max_log_scale", &mut d.max_log_scale, |v| (0.0..0.5).contains(&v), "0 ≤ max_log_scale < 0.5")?;
    s.float("max_shear", &mut d.max_shear, |v| (0.0..0.5).contains(&v), "0 ≤ max_shear < 0.5")?;
    s.float("max_translation", &mut d.max_translation, nonneg, "≥ 0")?;
    s.float("warp_amplitude", &mut d.warp_amplitude, nonneg, "≥ 0")?;
    s.float("warp_smoothness", &mut d.warp_smoothness, |v| v > 0.0, "warp_smoothness > 0")?;
    s.u64("seed", &mut d.seed)?;
    s.u64("count", &mut cfg.count)?;

    let entries = section("model");
    let mut s = Section { name: "model", entries, explicit: &mut explicit };
    let m = &mut cfg.train.model;
    m.rank = cfg.train.data.spatial_shape.len();
    s.int("depth", &mut m.depth, 2)?;
    m.widths = default_widths(m.depth);
    if let Some((v, line)) = s.ints("widths", 1, None)? {
        if v.len() != m.depth {
            return Err(s.range("widths", line, format!("widths has {} entries but depth is {}", v.len(), m.depth)));
        }
        m.widths = v;
    }
    s.kind("encoder_block", &mut m.encoder_block)?;
    s.kind("first_stage", &mut m.first_stage)?;
    s.int("encoder_blocks_per_level", &mut m.encoder_blocks_per_level, 0)?;
    s.kind("decoder_block", &mut m.decoder_block)?;
    s.int("blocks_per_level", &mut m.blocks_per_level, 0)?;
    let mut shift = m.window_spec.shift_alternation;
    s.flag("shift_alternation", &mut shift)?;
    let sizes = match s.ints("window_sizes", 1, Some(1..9))? {
        Some((v, line)) => {
            if v.iter().any(|w| w % 2 == 0) {
                return Err(s.range("window_sizes", line, format!("window_sizes {v:?} must all be odd")));
            }
            v
        }
        None => m.window_spec.sizes().to_vec(),
    };
    m.window_spec = WindowSpec::new(sizes, shift).map_err(|e| ConfigError::Range { line: None, key: "model.window_sizes".into(), message: e.to_string() })?;
    s.int("corr_radius", &mut m.corr_radius, 0)?;
    s.flag("image_correlation", &mut m.image_correlation)?;
    s.flag("step_correlation", &mut m.step_correlation)?;
    s.flag("use_affine_stage", &mut m.use_affine_stage)?;
    s.flag("stride4_start", &mut m.stride4_start)?;
    s.int("heads", &mut m.heads, 1)?;
    s.int("kernel", &mut m.kernel, 1)?;
    s.int("mlp_ratio", &mut m.mlp_ratio, 1)?;

    let entries = section("train");
    let mut s = Section { name: "train", entries, explicit: &mut explicit };
    let t = &mut cfg.train;
    s.int("steps", &mut t.steps, 1)?;
    s.int("batch", &mut t.batch, 1)?;
    s.float("learning_rate", &mut t.adam.lr, |v| v > 0.0, "learning_rate > 0")?;
    s.float("beta1", &mut t.adam.beta1, |v| (0.0..1.0).contains(&v), "0 ≤ beta1 < 1")?;
    s.float("beta2", &mut t.adam.beta2, |v| (0.0..1.0).contains(&v), "0 ≤ beta2 < 1")?;
    s.float("eps", &mut t.adam.eps, |v| v > 0.0, "eps > 0")?;
    s.float("lambda", &mut t.lambda, nonneg, "lambda ≥ 0")?;
    s.float("mu", &mut t.mu, nonneg, "mu ≥ 0")?;
    s.u64("seed", &mut t.seed)?;
    s.pair_range("train_pairs", &mut t.train_pairs)?;
    s.pair_range("val_pairs", &mut t.val_pairs)?;
    if let Some((v, line)) = s.get::<i64>("ncc_window")? {
        if v < 1 || v % 2 == 0 {
            return Err(s.range("ncc_window", line, format!("ncc_window = {v} must be odd and ≥ 1")));
        }
        t.ncc_window = Some(v as usize);
    }
    s.flag("record_timing", &mut t.record_timing)?;
    if let Some((v, line)) = s.ints("ablation_seeds", 0, None)? {
        if v.is_empty() {
            return Err(s.range("ablation_seeds", line, "ablation_seeds must not be empty".into()));
        }
        cfg.ablation_seeds = v.into_iter().map(|x| x as u64).collect();
    }

    let entries = section("bench");
    let mut s = Section { name: "bench", entries, explicit: &mut explicit };
    let b = &mut cfg.bench;
    if let Some((v, line)) = s.ints("resolutions", 1, None)? {
        if v.is_empty() {
            return Err(s.range("resolutions", line, "resolutions must not be empty".into()));
        }
        b.resolutions = v;
    }
    s.int("channels", &mut b.channels, 1)?;
    s.int("kernel", &mut b.kernel, 1)?;
    s.u64("activation_budget", &mut b.activation_budget)?;
    s.flag("measure", &mut b.measure)?;
    s.int("reps", &mut b.reps, 5)?;

    cfg.train.ncc_window = Some(cfg.train.window());
    cfg.explicit = explicit;
    cfg.train.validate().map_err(|e| ConfigError::Range { line: None, key: String::new(), message: e.to_string() })?;
    Ok(cfg)
}

fn list<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    format!("[{}]", xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    pub fn data(&self) -> &crate::synth::SynthConfig {
        &self.train.data
    }

    pub fn model(&self) -> &crate::regnet::RegModelConfig {
        &self.train.model
    }

    /// Overrides the data and training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.train.data.seed = seed;
        self.explicit.insert("train.seed".into());
        self.explicit.insert("data.seed".into());
        self
    }

    /// Every key with its resolved value; keys not set in the source are
    /// marked `# default`. Parsing the result yields the same values.
    pub fn to_document(&self) -> String {
        let (d, m, t, b) = (&self.train.data, &self.train.model, &self.train, &self.bench);
        let r = |x: &Range<u64>| list([x.start, x.end]);
        let sections: [(&str, Vec<(&str, String)>); 4] = [
            (
                "data",
                vec![
                    ("spatial_shape", list(&d.spatial_shape)),
                    ("num_shapes", d.num_shapes.to_string()),
                    ("texture_period", list([float(d.texture_period.0), float(d.texture_period.1)])),
                    ("texture_amplitude", float(d.texture_amplitude)),
                    ("noise_std", float(d.noise_std)),
                    ("max_rotation_deg", float(d.max_rotation_deg)),
                    ("max_log_scale", float(d.max_log_scale)),
                    ("max_shear", float(d.max_shear)),
                    ("max_translation", float(d.max_translation)),
                    ("warp_amplitude", float(d.warp_amplitude)),
                    ("warp_smoothness", float(d.warp_smoothness)),
                    ("seed", d.seed.to_string()),
                    ("count", self.count.to_string()),
                ],
            ),
            (
                "model",
                vec![
                    ("depth", m.depth.to_string()),
                    ("widths", list(&m.widths)),
                    ("encoder_block", format!("\"{}\"", m.encoder_block)),
                    ("first_stage", format!("\"{}\"", m.first_stage)),
                    ("encoder_blocks_per_level", m.encoder_blocks_per_level.to_string()),
                    ("decoder_block", format!("\"{}\"", m.decoder_block)),
                    ("blocks_per_level", m.blocks_per_level.to_string()),
                    ("window_sizes", list(m.window_spec.sizes())),
                    ("shift_alternation", m.window_spec.shift_alternation.to_string()),
                    ("corr_radius", m.corr_radius.to_string()),
                    ("image_correlation", m.image_correlation.to_string()),
                    ("step_correlation", m.step_correlation.to_string()),
                    ("use_affine_stage", m.use_affine_stage.to_string()),
                    ("stride4_start", m.stride4_start.to_string()),
                    ("heads", m.heads.to_string()),
                    ("kernel", m.kernel.to_string()),
                    ("mlp_ratio", m.mlp_ratio.to_string()),
                ],
            ),
            (
                "train",
                vec![
                    ("steps", t.steps.to_string()),
                    ("batch", t.batch.to_string()),
                    ("learning_rate", float(t.adam.lr)),
                    ("beta1", float(t.adam.beta1)),
                    ("beta2", float(t.adam.beta2)),
                    ("eps", float(t.adam.eps)),
                    ("lambda", float(t.lambda)),
                    ("mu", float(t.mu)),
                    ("seed", t.seed.to_string()),
                    ("train_pairs", r(&t.train_pairs)),
                    ("val_pairs", r(&t.val_pairs)),
                    ("ncc_window", t.window().to_string()),
                    ("record_timing", t.record_timing.to_string()),
                    ("ablation_seeds", list(&self.ablation_seeds)),
                ],
            ),
            (
                "bench",
                vec![
                    ("resolutions", list(&b.resolutions)),
                    ("channels", b.channels.to_string()),
                    ("kernel", b.kernel.to_string()),
                    ("activation_budget", b.activation_budget.to_string()),
                    ("measure", b.measure.to_string()),
                    ("reps", b.reps.to_string()),
                ],
            ),
        ];
        let mut out = String::new();
        for (i, (name, keys)) in sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (k, v) in keys {
                let mark = if self.explicit.contains(&format!("{name}.{k}")) { "" } else { "  # default" };
                let _ = writeln!(out, "{k} = {v}{mark}");
            }
        }
        out
    }
}
