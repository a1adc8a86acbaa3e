//! Command-line front end: a flat `section.key` configuration, figure
//! presets, and one runner per subcommand. Every runner echoes the resolved
//! configuration into the output directory before doing any work.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use thiserror::Error;

use crate::analysis::{self, Pattern, ScanBase, ScanMode, ScanRow};
use crate::circuit::{build_iteration_head, CircuitPlan};
use crate::dataset::{self, stream_rng, Dataset, DatasetConfig, Scheme, MAX_ENUMERATION};
use crate::encoding::{encode, EncodedSequence, Layout, LossMode, Vocab};
use crate::gradcheck;
use crate::model::{Activation, Model, ModelConfig, PatchMode, PatchSpec, PositionalMode};
use crate::tasks::TaskSpec;
use crate::training::{self, EvalRow, Optimizer, RunRecord, Status, TrainConfig};

pub const SUMMARY_FORMAT: &str = "iterhead-summary/1";

/// Circuit verification enumerates every input when there are at most this
/// many sequences in the length range, and samples otherwise.
pub const EXHAUSTIVE_LIMIT: u64 = 1 << 16;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("training aborted: {0}")]
    Aborted(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Aborted(_) => 3,
            CliError::Verification(_) => 4,
            CliError::Io(_) | CliError::Run(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn config_err(key: &str, msg: impl Display) -> CliError {
    CliError::Config {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

fn run_err(e: impl Display) -> CliError {
    CliError::Run(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Str,
    Int,
    Float,
    Bool,
}

/// Every accepted key with its kind and default.
pub const KEYS: &[(&str, Kind, &str)] = &[
    ("task.name", Kind::Str, "parity"),
    ("task.p", Kind::Int, "11"),
    // `xy+1` or a row-major square grid, `c00,c01,c10,c11`
    ("task.coeffs", Kind::Str, "xy+1"),
    ("task.alphabet", Kind::Int, "2"),
    ("task.second", Kind::Str, "parity"),
    ("data.l_min", Kind::Int, "1"),
    ("data.l_max", Kind::Int, "32"),
    ("data.n_per_length", Kind::Int, "1024"),
    ("data.seed", Kind::Int, "0"),
    ("data.scheme", Kind::Str, "iid_uniform"),
    ("data.layout", Kind::Str, "cot"),
    ("data.dir", Kind::Str, ""),
    ("model.d", Kind::Int, "128"),
    ("model.n_layers", Kind::Int, "2"),
    ("model.n_heads", Kind::Int, "1"),
    // 0 means 4d
    ("model.mlp_hidden", Kind::Int, "0"),
    // 0 means 2 l_max + 3
    ("model.max_positions", Kind::Int, "0"),
    ("model.pre_norm", Kind::Bool, "true"),
    ("model.activation", Kind::Str, "gelu"),
    // learned | frozen_random | partial:k
    ("model.positional", Kind::Str, "learned"),
    ("model.tie_unembedding", Kind::Bool, "false"),
    ("model.seed", Kind::Int, "0"),
    ("model.checkpoint", Kind::Str, ""),
    // 0 means the narrowest width the construction fits in
    ("model.circuit_d", Kind::Int, "0"),
    ("model.beta", Kind::Float, "40"),
    ("model.gain", Kind::Float, "10"),
    ("train.optimizer", Kind::Str, "adam"),
    ("train.lr", Kind::Float, "0.0003"),
    ("train.beta1", Kind::Float, "0.9"),
    ("train.beta2", Kind::Float, "0.999"),
    ("train.eps", Kind::Float, "1e-8"),
    ("train.batch_size", Kind::Int, "256"),
    ("train.epochs", Kind::Int, "1000"),
    ("train.seed", Kind::Int, "0"),
    ("train.loss_mode", Kind::Str, "all"),
    ("train.eval_every", Kind::Int, "10"),
    ("train.trainable", Kind::Str, "*"),
    ("train.reset_optimizer", Kind::Bool, "true"),
    // negative means never stop early
    ("train.stop_at_accuracy", Kind::Float, "-1"),
    ("train.record_wall_time", Kind::Bool, "false"),
    ("train.switch_epochs", Kind::Int, "200"),
    ("train.second_trainable", Kind::Str, "*"),
    ("analysis.samples", Kind::Int, "256"),
    ("analysis.invariance_len", Kind::Int, "0"),
    ("analysis.invariance_inputs", Kind::Int, "100"),
    ("analysis.attention_len", Kind::Int, "0"),
    ("analysis.patches", Kind::Str, "ideal_first@1:0+ideal_second@2:0"),
    ("analysis.scan_lmax", Kind::Str, "8,16,24,32"),
    ("analysis.scan_d", Kind::Str, "16,32,64,128"),
    ("analysis.scan_modes", Kind::Str, "cot_2layer,no_cot_2layer,cot_1layer"),
    ("analysis.runs", Kind::Int, "1"),
    ("analysis.protocols", Kind::Str, "first,second,transfer"),
    ("analysis.target_accuracy", Kind::Float, "0.99"),
    ("analysis.gradcheck_seeds", Kind::Int, "20"),
    ("analysis.gradcheck_tol", Kind::Float, "1e-5"),
    ("out.dir", Kind::Str, "out"),
];

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|&(_, kind, _)| kind)
}

/// Resolved key/value pairs, all drawn from [`KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        let mut cfg = Self { values: BTreeMap::new() };
        for &(k, _, v) in KEYS {
            cfg.set(k, v).expect("defaults are well-formed");
        }
        cfg
    }
}

impl Config {
    /// Sets one key, checking that it exists and that the value parses as
    /// the key's kind.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let kind = kind_of(key).ok_or_else(|| config_err(key, "unknown key"))?;
        let value = value.trim();
        let normalized = match kind {
            Kind::Str => value.to_string(),
            Kind::Int => value
                .parse::<i64>()
                .map_err(|e| config_err(key, format!("`{value}` is not an integer: {e}")))?
                .to_string(),
            Kind::Float => {
                let x: f64 = value
                    .parse()
                    .map_err(|e| config_err(key, format!("`{value}` is not a number: {e}")))?;
                if !x.is_finite() {
                    return Err(config_err(key, "must be finite"));
                }
                x.to_string()
            }
            Kind::Bool => value
                .parse::<bool>()
                .map_err(|_| config_err(key, format!("`{value}` is not true or false")))?
                .to_string(),
        };
        self.values.insert(key.to_string(), normalized);
        Ok(())
    }

    /// `KEY=VALUE`.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(assignment, "expected KEY=VALUE"))?;
        self.set(k.trim(), v)
    }

    /// Applies a TOML document; dotted keys and `[section]` tables are
    /// equivalent.
    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| config_err("<file>", e))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat)?;
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        self.merge_toml(&text)
    }

    /// The configuration as sectioned TOML, every key present.
    pub fn to_toml(&self) -> String {
        let mut root = toml::Table::new();
        for &(key, kind, _) in KEYS {
            let raw = &self.values[key];
            let (section, name) = key.split_once('.').expect("keys are dotted");
            let value = match kind {
                Kind::Str => toml::Value::String(raw.clone()),
                Kind::Int => toml::Value::Integer(raw.parse().expect("checked on set")),
                Kind::Float => toml::Value::Float(raw.parse().expect("checked on set")),
                Kind::Bool => toml::Value::Boolean(raw.parse().expect("checked on set")),
            };
            root.entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("sections are tables")
                .insert(name.to_string(), value);
        }
        toml::to_string(&root).expect("plain values serialize")
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.str(key).parse().map_err(|e| config_err(key, e))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    /// Comma-separated list; blank entries are skipped.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| config_err(key, format!("`{s}`: {e}"))))
            .collect()
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::String(s) => out.push((key, s.clone())),
            toml::Value::Integer(i) => out.push((key, i.to_string())),
            toml::Value::Float(x) => out.push((key, x.to_string())),
            toml::Value::Boolean(b) => out.push((key, b.to_string())),
            toml::Value::Array(items) => {
                let parts = items
                    .iter()
                    .map(|i| match i {
                        toml::Value::String(s) => Ok(s.clone()),
                        toml::Value::Integer(n) => Ok(n.to_string()),
                        toml::Value::Float(x) => Ok(x.to_string()),
                        _ => Err(config_err(&key, "arrays may only hold strings and numbers")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push((key, parts.join(",")));
            }
            toml::Value::Datetime(_) => return Err(config_err(&key, "dates are not accepted")),
        }
    }
    Ok(())
}

/// Settings for the figure presets, at full scale.
pub fn preset(fig: u8) -> Result<Vec<(&'static str, &'static str)>> {
    let poly = [("task.name", "poly"), ("task.p", "11"), ("task.coeffs", "xy+1")];
    let grid = [
        ("analysis.scan_lmax", "4,8,12,16,20,24,28,32"),
        ("analysis.scan_d", "8,16,32,64,128"),
        ("model.d", "128"),
        ("data.l_max", "32"),
        ("data.n_per_length", "1024"),
        ("train.epochs", "1000"),
    ];
    let mut out: Vec<(&str, &str)> = Vec::new();
    match fig {
        3 => out.extend([
            ("task.name", "parity"),
            ("data.l_max", "32"),
            ("data.n_per_length", "1024"),
            ("model.d", "128"),
            ("train.epochs", "1000"),
        ]),
        4 => {
            out.extend(poly);
            out.extend(grid);
            out.push(("analysis.scan_modes", "cot_2layer,no_cot_2layer,cot_1layer"));
        }
        7 => {
            out.extend(poly);
            out.extend(grid);
            out.push(("analysis.scan_modes", "cot_2layer"));
        }
        8 => out.extend([
            ("task.name", "parity"),
            ("data.scheme", "exhaustive_split"),
            ("data.l_max", "10"),
            ("analysis.scan_lmax", "2,4,6,8,10"),
            ("analysis.scan_d", "8,16,32,64,128"),
            ("analysis.scan_modes", "cot_2layer,no_cot_2layer,cot_1layer"),
            ("train.epochs", "5000"),
        ]),
        9 => {
            out.extend(poly);
            out.extend([
                ("task.second", "parity"),
                ("data.l_max", "32"),
                ("data.n_per_length", "1024"),
                ("model.d", "128"),
                ("train.switch_epochs", "200"),
                ("train.epochs", "1000"),
                ("analysis.runs", "100"),
                ("analysis.protocols", "first,second,transfer"),
            ]);
        }
        other => return Err(config_err("--fig", format!("no preset for figure {other} (3 | 4 | 7 | 8 | 9)"))),
    }
    Ok(out)
}

/// Multiplies epoch counts, samples per length and run counts by `factor`
/// (each at least 1).
pub fn apply_scale(cfg: &mut Config, factor: f64) -> Result<()> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(config_err("--scale", format!("must be positive, got {factor}")));
    }
    for key in ["train.epochs", "train.switch_epochs", "data.n_per_length", "analysis.runs"] {
        let v = cfg.usize(key)? as f64;
        let scaled = ((v * factor).round() as usize).max(1);
        cfg.set(key, &scaled.to_string())?;
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "iterhead", version, about = "Chain-of-thought and iteration heads in small transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Write train/test splits to `<out.dir>/data`
    Generate(Common),
    /// Train a model and log a run record
    Train(Common),
    /// Exact-match and teacher-forced accuracy of a checkpoint
    Eval(Common),
    /// Peakiness, attention invariance and attention maps of a checkpoint
    Analyze(Common),
    /// Accuracy under attention patches
    Patch(Common),
    /// Grid of training runs over (L_max, d) for each scan mode
    Scan(Common),
    /// Pretrain on one task, switch to another, and compare with scratch runs
    Transfer(Common),
    /// Build and verify the hand-set iteration head
    Circuit(Common),
    /// Finite-difference checks of every differentiable op
    Gradcheck(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Analyze(_) => "analyze",
            Command::Patch(_) => "patch",
            Command::Scan(_) => "scan",
            Command::Transfer(_) => "transfer",
            Command::Circuit(_) => "circuit",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Generate(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::Analyze(c)
            | Command::Patch(c)
            | Command::Scan(c)
            | Command::Transfer(c)
            | Command::Circuit(c)
            | Command::Gradcheck(c) => c,
        }
    }
}

/// Flags shared by every subcommand. Precedence, lowest first: defaults,
/// `--fig`, `--config`, `--set`, the named flags, then `--scale`.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML file of `section.key` settings
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-3`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Task name (copy | parity | poly)
    #[arg(long)]
    pub task: Option<String>,
    /// Longest input length
    #[arg(long = "Lmax")]
    pub l_max: Option<usize>,
    /// Figure preset (3 | 4 | 7 | 8 | 9)
    #[arg(long)]
    pub fig: Option<u8>,
    /// Factor applied to epochs, samples per length and run counts
    #[arg(long)]
    pub scale: Option<f64>,
    /// Number of independent runs
    #[arg(long)]
    pub runs: Option<usize>,
    /// Model checkpoint to load
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn resolve(common: &Common) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(fig) = common.fig {
        for (k, v) in preset(fig)? {
            cfg.set(k, v)?;
        }
    }
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    for a in &common.set {
        cfg.set_assignment(a)?;
    }
    if let Some(t) = &common.task {
        cfg.set("task.name", t)?;
    }
    if let Some(l) = common.l_max {
        cfg.set("data.l_max", &l.to_string())?;
    }
    if let Some(r) = common.runs {
        cfg.set("analysis.runs", &r.to_string())?;
    }
    if let Some(c) = &common.checkpoint {
        cfg.set("model.checkpoint", &c.to_string_lossy())?;
    }
    if let Some(o) = &common.out {
        cfg.set("out.dir", &o.to_string_lossy())?;
    }
    if let Some(s) = common.scale {
        apply_scale(&mut cfg, s)?;
    }
    Ok(cfg)
}

pub fn task_named(cfg: &Config, name: &str, key: &str) -> Result<TaskSpec> {
    let task = match name {
        "copy" => TaskSpec::copy_over(cfg.parse("task.alphabet")?),
        "parity" => Ok(TaskSpec::parity()),
        "poly" => {
            let p: u32 = cfg.parse("task.p")?;
            if cfg.str("task.coeffs") == "xy+1" {
                TaskSpec::xy_plus_one(p)
            } else {
                TaskSpec::polynomial_from_row_major(p, &cfg.list::<u32>("task.coeffs")?)
            }
        }
        other => return Err(config_err(key, format!("unknown task `{other}` (copy | parity | poly)"))),
    };
    task.map_err(|e| config_err(key, e))
}

pub fn task(cfg: &Config) -> Result<TaskSpec> {
    task_named(cfg, cfg.str("task.name"), "task.name")
}

/// Value tokens cover both configured tasks, so the first and second task of
/// a transfer share one vocabulary.
pub fn vocab(cfg: &Config) -> Result<Vocab> {
    let a = task(cfg)?;
    let b = task_named(cfg, cfg.str("task.second"), "task.second")?;
    let values = [11, a.input_alphabet_size, a.state_alphabet_size, b.input_alphabet_size, b.state_alphabet_size]
        .into_iter()
        .max()
        .expect("non-empty");
    Ok(Vocab::new(values, vec!["copy".into(), "parity".into(), "poly".into()]))
}

pub fn data_config(cfg: &Config, task: TaskSpec) -> Result<DatasetConfig> {
    let d = DatasetConfig {
        task,
        l_min: cfg.usize("data.l_min")?,
        l_max: cfg.usize("data.l_max")?,
        n_per_length: cfg.usize("data.n_per_length")?,
        seed: cfg.u64("data.seed")?,
        scheme: cfg.parse::<Scheme>("data.scheme")?,
        layout: cfg.parse::<Layout>("data.layout")?,
    };
    d.validate().map_err(|e| config_err("data.*", e))?;
    Ok(d)
}

/// The configured split: loaded from `data.dir` when set, generated
/// otherwise.
pub fn load_or_generate(cfg: &Config) -> Result<(Vocab, DatasetConfig, Dataset)> {
    let dir = cfg.str("data.dir");
    if !dir.is_empty() {
        let (vocab, header, data) = dataset::load(Path::new(dir)).map_err(|e| config_err("data.dir", e))?;
        return Ok((vocab, header.data, data));
    }
    let vocab = vocab(cfg)?;
    let dcfg = data_config(cfg, task(cfg)?)?;
    let data = dataset::generate(&vocab, &dcfg).map_err(run_err)?;
    Ok((vocab, dcfg, data))
}

fn parse_positional(s: &str) -> std::result::Result<PositionalMode, String> {
    match s {
        "learned" => Ok(PositionalMode::Learned),
        "frozen_random" => Ok(PositionalMode::FrozenRandom),
        _ => s
            .strip_prefix("partial:")
            .and_then(|k| k.parse().ok())
            .map(PositionalMode::Partial)
            .ok_or_else(|| format!("unknown positional mode `{s}` (learned | frozen_random | partial:k)")),
    }
}

pub fn model_config(cfg: &Config, vocab: &Vocab, l_max: usize) -> Result<ModelConfig> {
    let d = cfg.usize("model.d")?;
    let positions = match cfg.usize("model.max_positions")? {
        0 => ModelConfig::positions_for(l_max),
        p => p,
    };
    let mut m = ModelConfig::new(vocab.total_size(), d, positions);
    m.n_layers = cfg.usize("model.n_layers")?;
    m.n_heads = cfg.usize("model.n_heads")?;
    m.mlp_hidden = match cfg.usize("model.mlp_hidden")? {
        0 => 4 * d,
        h => h,
    };
    m.pre_norm = cfg.bool("model.pre_norm")?;
    m.activation = cfg.parse::<Activation>("model.activation")?;
    m.positional = parse_positional(cfg.str("model.positional")).map_err(|e| config_err("model.positional", e))?;
    m.tie_unembedding = cfg.bool("model.tie_unembedding")?;
    m.validate().map_err(|e| config_err("model.*", e))?;
    Ok(m)
}

fn globs(cfg: &Config, key: &str) -> Result<Vec<String>> {
    let g: Vec<String> = cfg.list(key)?;
    if g.is_empty() {
        return Err(config_err(key, "needs at least one pattern"));
    }
    Ok(g)
}

pub fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let stop = cfg.f64("train.stop_at_accuracy")?;
    let t = TrainConfig {
        optimizer: cfg.parse::<Optimizer>("train.optimizer")?,
        lr: cfg.f64("train.lr")?,
        beta1: cfg.f64("train.beta1")?,
        beta2: cfg.f64("train.beta2")?,
        eps: cfg.f64("train.eps")?,
        batch_size: cfg.usize("train.batch_size")?,
        epochs: cfg.usize("train.epochs")?,
        seed: cfg.u64("train.seed")?,
        loss_mode: cfg.parse::<LossMode>("train.loss_mode")?,
        eval_every: cfg.usize("train.eval_every")?,
        trainable: globs(cfg, "train.trainable")?,
        reset_optimizer_state_on_switch: cfg.bool("train.reset_optimizer")?,
        stop_at_accuracy: (stop >= 0.0).then_some(stop),
        record_wall_time: cfg.bool("train.record_wall_time")?,
    };
    t.validate().map_err(|e| config_err("train.*", e))?;
    Ok(t)
}

/// `mode@layer:head` terms joined by `+`; the input length is filled in per
/// evaluation group.
pub fn parse_patches(s: &str) -> std::result::Result<Vec<PatchSpec>, String> {
    s.split('+')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|term| {
            let (mode, at) = term.split_once('@').ok_or_else(|| format!("`{term}` is not mode@layer:head"))?;
            let (layer, head) = at.split_once(':').ok_or_else(|| format!("`{term}` is not mode@layer:head"))?;
            let layer = layer.parse().map_err(|_| format!("bad layer in `{term}`"))?;
            let head = head.parse().map_err(|_| format!("bad head in `{term}`"))?;
            Ok(PatchSpec::new(layer, head, mode.parse::<PatchMode>()?, 0))
        })
        .collect()
}

/// Workers for scans and multi-run transfers: `ITERHEAD_WORKERS`, else the
/// available parallelism.
pub fn workers() -> usize {
    std::env::var("ITERHEAD_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct Out {
    dir: PathBuf,
}

impl Out {
    fn new(cfg: &Config) -> Result<Self> {
        let dir = PathBuf::from(cfg.str("out.dir"));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        Ok(Self { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        if let Some(parent) = self.path(name).parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn record(&self, name: &str, record: &RunRecord) -> Result<()> {
        let mut buf = Vec::new();
        record.write_csv(&mut buf)?;
        self.write(name, std::str::from_utf8(&buf).expect("csv is utf-8"))
    }

    fn save(&self, name: &str, model: &Model) -> Result<()> {
        model.save(&self.path(name)).map_err(run_err)
    }

    fn summary(&self, command: &str, body: toml::Table) -> Result<()> {
        let mut root = toml::Table::new();
        root.insert("format".into(), SUMMARY_FORMAT.into());
        root.insert("command".into(), command.into());
        root.extend(body);
        self.write("summary.toml", &toml::to_string(&root).map_err(run_err)?)
    }
}

/// Summary tables hold floats as strings, so NaN stays readable.
fn num(x: f64) -> toml::Value {
    if x.is_finite() {
        toml::Value::Float(x)
    } else {
        toml::Value::String(x.to_string())
    }
}

fn int(x: usize) -> toml::Value {
    toml::Value::Integer(x as i64)
}

fn table<const N: usize>(entries: [(&str, toml::Value); N]) -> toml::Table {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn require_checkpoint(cfg: &Config, vocab: &Vocab) -> Result<Model> {
    let path = cfg.str("model.checkpoint");
    if path.is_empty() {
        return Err(config_err("model.checkpoint", "this command needs a checkpoint"));
    }
    let model = Model::load(Path::new(path)).map_err(|e| config_err("model.checkpoint", e))?;
    check_vocab(&model, vocab)?;
    Ok(model)
}

fn check_vocab(model: &Model, vocab: &Vocab) -> Result<()> {
    if model.cfg.vocab_size != vocab.total_size() {
        return Err(config_err(
            "model.checkpoint",
            format!(
                "checkpoint vocabulary has {} tokens, data has {}",
                model.cfg.vocab_size,
                vocab.total_size()
            ),
        ));
    }
    Ok(())
}

fn l_max_of(seqs: &[EncodedSequence]) -> usize {
    seqs.iter().map(|s| s.input_len).max().unwrap_or(0)
}

/// At most `n` sequences of each length, in their original order.
fn per_length_limit(seqs: &[EncodedSequence], n: usize) -> Vec<EncodedSequence> {
    if n == 0 {
        return seqs.to_vec();
    }
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    seqs.iter()
        .filter(|s| {
            let c = seen.entry(s.input_len).or_default();
            *c += 1;
            *c <= n
        })
        .cloned()
        .collect()
}

pub fn run(command: &Command) -> Result<()> {
    let cfg = resolve(command.common())?;
    match command {
        Command::Generate(_) => generate(&cfg),
        Command::Train(_) => train(&cfg),
        Command::Eval(_) => eval(&cfg),
        Command::Analyze(_) => analyze(&cfg),
        Command::Patch(_) => patch(&cfg),
        Command::Scan(_) => scan(&cfg),
        Command::Transfer(_) => transfer(&cfg),
        Command::Circuit(_) => circuit(&cfg),
        Command::Gradcheck(_) => gradcheck(&cfg),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn generate(cfg: &Config) -> Result<()> {
    let out = Out::new(cfg)?;
    let vocab = vocab(cfg)?;
    let dcfg = data_config(cfg, task(cfg)?)?;
    let data = dataset::generate(&vocab, &dcfg).map_err(run_err)?;
    dataset::save(&out.path("data"), &vocab, &dcfg, &data).map_err(run_err)?;
    out.summary(
        "generate",
        table([
            ("n_train", int(data.train.len())),
            ("n_test", int(data.test.len())),
            ("collision_rate", num(dataset::collision_rate(&data.train, &data.test))),
        ]),
    )
}

fn train(cfg: &Config) -> Result<()> {
    let out = Out::new(cfg)?;
    let (vocab, _, data) = load_or_generate(cfg)?;
    let l_max = l_max_of(&data.train).max(l_max_of(&data.test));
    let tcfg = train_config(cfg)?;
    let model = if cfg.str("model.checkpoint").is_empty() {
        Model::init(model_config(cfg, &vocab, l_max)?, cfg.u64("model.seed")?).map_err(|e| config_err("model.*", e))?
    } else {
        require_checkpoint(cfg, &vocab)?
    };
    let state = training::OptimizerState::new(&model);
    let outcome = training::train_from(model, state, &data, &tcfg, &mut |r: &EvalRow| {
        eprintln!("epoch {:>5}  loss {:.5}  acc {:.4}  tf {:.4}", r.epoch, r.loss, r.acc_overall, r.tf_acc)
    })
    .map_err(run_err)?;
    out.record("run_record.csv", &outcome.record)?;
    out.save("model.ckpt", &outcome.model)?;
    let last = outcome.record.last().expect("at least the initial row");
    let target = cfg.f64("analysis.target_accuracy")?;
    out.summary(
        "train",
        table([
            ("status", format!("{:?}", outcome.status).to_lowercase().into()),
            ("last_epoch", int(last.epoch)),
            ("final_loss", num(last.loss)),
            ("final_accuracy", num(last.acc_overall)),
            ("final_tf_accuracy", num(last.tf_acc)),
            ("peak1", num(last.peak1)),
            ("peak2", num(last.peak2)),
            ("target_accuracy", num(target)),
            (
                "first_epoch_at_target",
                outcome.record.first_epoch_reaching(target).map_or(toml::Value::Integer(-1), int),
            ),
        ]),
    )?;
    match outcome.record.aborted {
        Some(reason) => Err(CliError::Aborted(reason)),
        None => Ok(()),
    }
}

fn per_length_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn eval(cfg: &Config) -> Result<()> {
    let out = Out::new(cfg)?;
    let (vocab, _, data) = load_or_generate(cfg)?;
    let model = require_checkpoint(cfg, &vocab)?;
    let report = training::evaluate_with(&model, &data.test, &[], true).map_err(run_err)?;
    let csv = per_length_csv(
        "L,n,accuracy,tf_accuracy",
        report.per_length.iter().map(|(l, s)| {
            format!(
                "{l},{},{},{}",
                s.n,
                s.exact as f64 / s.n as f64,
                s.tf_correct as f64 / s.tf_total as f64
            )
        }),
    );
    out.write("eval.csv", &csv)?;
    out.summary(
        "eval",
        table([
            ("n", int(report.n())),
            ("accuracy", num(report.accuracy())),
            ("tf_accuracy", num(report.tf_accuracy())),
            ("peak1", num(report.peak1())),
            ("peak2", num(report.peak2())),
        ]),
    )
}

fn analyze(cfg: &Config) -> Result<()> {
    let out = Out::new(cfg)?;
    let (vocab, dcfg, data) = load_or_generate(cfg)?;
    let model = require_checkpoint(cfg, &vocab)?;
    let samples = per_length_limit(&data.test, cfg.usize("analysis.samples")?);
    let reports = analysis::peakiness_all(&model, &samples).map_err(run_err)?;
    let mut peak = String::from("layer,head,pattern,mean,std,n_samples\n");
    let mut by_len = String::from("layer,head,pattern,L,mean\n");
    for r in &reports {
        peak.push_str(&format!("{},{},{},{},{},{}\n", r.layer, r.head, r.pattern, r.mean, r.std, r.n_samples));
        for (l, m) in &r.per_length {
            by_len.push_str(&format!("{},{},{},{l},{m}\n", r.layer, r.head, r.pattern));
        }
    }
    out.write("peakiness.csv", &peak)?;
    out.write("peakiness_by_length.csv", &by_len)?;

    let l_data = l_max_of(&data.test);
    let pick_len = |key: &str| -> Result<usize> {
        Ok(match cfg.usize(key)? {
            0 => l_data,
            l => l,
        })
    };
    let inv_len = pick_len("analysis.invariance_len")?;
    let invariance = analysis::attention_invariance(
        &model,
        &vocab,
        &dcfg.task,
        inv_len,
        cfg.usize("analysis.invariance_inputs")?,
        dcfg.seed,
    )
    .map_err(run_err)?;

    let att_len = pick_len("analysis.attention_len")?;
    let tokens = match data.test.iter().find(|s| s.input_len == att_len) {
        Some(s) => s.tokens.clone(),
        None => {
            let mut rng = stream_rng(dcfg.seed, 0x1a7, att_len as u64);
            let xs: Vec<u32> = (0..att_len).map(|_| rng.gen_range(0..dcfg.task.input_alphabet_size)).collect();
            encode(&vocab, &dcfg.task, &xs, dcfg.layout).map_err(run_err)?.tokens
        }
    };
    let (_, capture) = model.forward(&tokens, true, &[]).map_err(run_err)?;
    let capture = capture.expect("capture requested");
    for ((layer, head), _) in capture.iter() {
        let mut buf = Vec::new();
        capture.write_csv(layer, head, &mut buf)?;
        out.write(&format!("attention_L{att_len}_layer{layer}_head{head}.csv"), &String::from_utf8_lossy(&buf))?;
    }

    let best = |layer: usize, p: Pattern| {
        reports
            .iter()
            .filter(|r| r.layer == layer && r.pattern == p)
            .map(|r| r.mean)
            .fold(f64::NAN, f64::max)
    };
    out.summary(
        "analyze",
        table([
            ("n_samples", int(samples.len())),
            ("peak1", num(best(1, Pattern::FirstEoi))),
            ("peak2", num(best(2, Pattern::SecondPt))),
            ("invariance_len", int(inv_len)),
            ("invariance_max_std", num(invariance)),
        ]),
    )
}

fn patch(cfg: &Config) -> Result<()> {
    let out = Out::new(cfg)?;
    let (vocab, dcfg, data) = load_or_generate(cfg)?;
    let model = require_checkpoint(cfg, &vocab)?;
    let patches = parse_patches(cfg.str("analysis.patches")).map_err(|e| config_err("analysis.patches", e))?;
    let base = training::evaluate(&model, &data.test).map_err(run_err)?;
    let patched = analysis::patch_eval(&model, &patches, &data.test).map_err(|e| config_err("analysis.patches", e))?;
    let csv = per_length_csv(
        "L,n,baseline_accuracy,patched_accuracy,baseline_tf_accuracy,patched_tf_accuracy",
        base.per_length.iter().map(|(l, b)| {
            let p = &patched.per_length[l];
            format!(
                "{l},{},{},{},{},{}",
                b.n,
                b.exact as f64 / b.n as f64,
                p.exact as f64 / p.n as f64,
                b.tf_correct as f64 / b.tf_total as f64,
                p.tf_correct as f64 / p.tf_total as f64
            )
        }),
    );
    out.write("patch.csv", &csv)?;
    out.summary(
        "patch",
        table([
            ("patches", cfg.str("analysis.patches").into()),
            ("baseline_accuracy", num(base.accuracy())),
            ("baseline_tf_accuracy", num(base.tf_accuracy())),
            ("accuracy", num(patched.accuracy())),
            ("tf_accuracy", num(patched.tf_accuracy())),
            ("chance", num(1.0 / dcfg.task.state_alphabet_size as f64)),
        ]),
    )
}

fn scan(cfg: &Config) -> Result<()> {
    let out = Out::new(cfg)?;
    let vocab = vocab(cfg)?;
    let dcfg = data_config(cfg, task(cfg)?)?;
    let l_maxes: Vec<usize> = cfg.list("analysis.scan_lmax")?;
    let dims: Vec<usize> = cfg.list("analysis.scan_d")?;
    let modes: Vec<ScanMode> = cfg.list("analysis.scan_modes")?;
    if l_maxes.is_empty() || dims.is_empty() || modes.is_empty() {
        return Err(config_err("analysis.scan_*", "scan grid is empty"));
    }
    let max_l = *l_maxes.iter().max().expect("non-empty");
    let model = model_config(cfg, &vocab, max_l)?;
    let base = ScanBase {
        vocab,
        data: dcfg,
        model,
        train: train_config(cfg)?,
    };
    let workers = workers();
    let mut body = toml::Table::new();
    for mode in modes {
        let name = format!("scan_{mode}.csv");
        let path = out.path(&name);
        let skip = if path.exists() {
            analysis::completed_cells(BufReader::new(File::open(&path)?)).map_err(run_err)?
        } else {
            let mut f = File::create(&path)?;
            analysis::write_scan_csv(&mut f, &[], true)?;
            BTreeSet::new()
        };
        let file = Mutex::new(OpenOptions::new().append(true).open(&path)?);
        let write_err = Mutex::new(None::<io::Error>);
        analysis::scan(
            &base,
            &l_maxes,
            &dims,
            mode,
            &skip,
            workers,
            &|l, d, e| eprintln!("cell L_max={l} d={d} {mode} failed: {e}"),
            &|row| {
                eprintln!("{}", row.to_csv());
                let mut f = file.lock().unwrap();
                if let Err(e) = writeln!(f, "{}", row.to_csv()).and_then(|_| f.flush()) {
                    write_err.lock().unwrap().get_or_insert(e);
                }
            },
        )
        .map_err(|e| config_err("analysis.scan_*", e))?;
        if let Some(e) = write_err.into_inner().unwrap() {
            return Err(e.into());
        }
        let rows: Vec<ScanRow> = BufReader::new(File::open(&path)?)
            .lines()
            .map_while(std::result::Result::ok)
            .filter_map(|l| ScanRow::from_csv(&l))
            .collect();
        let failed = rows.iter().filter(|r| r.final_accuracy.is_nan()).count();
        let best = rows.iter().map(|r| r.final_accuracy).fold(f64::NAN, f64::max);
        body.insert(
            mode.to_string(),
            toml::Value::Table(table([
                ("file", name.into()),
                ("cells", int(rows.len())),
                ("failed", int(failed)),
                ("best_accuracy", num(best)),
            ])),
        );
    }
    out.summary("scan", body)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Protocol {
    /// First task from scratch.
    First,
    /// Second task from scratch.
    Second,
    /// First task for `train.switch_epochs`, then the second task.
    Transfer,
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "first" => Ok(Protocol::First),
            "second" => Ok(Protocol::Second),
            "transfer" => Ok(Protocol::Transfer),
            other => Err(format!("unknown protocol `{other}` (first | second | transfer)")),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::First => "first",
            Protocol::Second => "second",
            Protocol::Transfer => "transfer",
        })
    }
}

/// One protocol of one run. For `Transfer` the record covers the second
/// task, with epochs counted from the switch.
pub struct RunResult {
    pub run: usize,
    pub protocol: Protocol,
    pub record: RunRecord,
    pub pretrain: Option<RunRecord>,
    pub switch_epoch: usize,
    pub status: Status,
    pub model: Model,
}

impl RunResult {
    /// Epochs (after the switch, for `Transfer`) until accuracy `target`.
    pub fn epochs_to(&self, target: f64) -> Option<usize> {
        self.record.first_epoch_reaching(target)
    }

    /// Layer-2 peakiness at the end of pretraining.
    pub fn peak2_at_switch(&self) -> f64 {
        self.pretrain.as_ref().and_then(RunRecord::last).map_or(f64::NAN, |r| r.peak2)
    }
}

/// Everything `transfer` needs, resolved once.
pub struct TransferPlan {
    pub vocab: Vocab,
    pub data_a: DatasetConfig,
    pub data_b: DatasetConfig,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train_a: TrainConfig,
    pub train_b: TrainConfig,
    pub switch_epochs: usize,
}

impl TransferPlan {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let vocab = vocab(cfg)?;
        let data_a = data_config(cfg, task(cfg)?)?;
        let data_b = data_config(cfg, task_named(cfg, cfg.str("task.second"), "task.second")?)?;
        let model = model_config(cfg, &vocab, data_a.l_max)?;
        let train_a = train_config(cfg)?;
        let mut train_b = train_a.clone();
        train_b.trainable = globs(cfg, "train.second_trainable")?;
        Ok(Self {
            vocab,
            data_a,
            data_b,
            model,
            model_seed: cfg.u64("model.seed")?,
            train_a,
            train_b,
            switch_epochs: cfg.usize("train.switch_epochs")?,
        })
    }

    /// Runs one protocol; run `i` offsets every seed by `i`.
    pub fn run(&self, i: usize, protocol: Protocol) -> Result<RunResult> {
        let off = i as u64;
        let with_seed = |d: &DatasetConfig| DatasetConfig {
            seed: d.seed + off,
            ..d.clone()
        };
        let with_train_seed = |t: &TrainConfig| TrainConfig {
            seed: t.seed + off,
            ..t.clone()
        };
        let data = |d: &DatasetConfig| dataset::generate(&self.vocab, &with_seed(d)).map_err(run_err);
        let model = Model::init(self.model.clone(), self.model_seed + off).map_err(run_err)?;
        let from_scratch = |d: &DatasetConfig| -> Result<RunResult> {
            let o = training::train(model.clone(), &data(d)?, &with_train_seed(&self.train_a)).map_err(run_err)?;
            Ok(RunResult {
                run: i,
                protocol,
                record: o.record,
                pretrain: None,
                switch_epoch: 0,
                status: o.status,
                model: o.model,
            })
        };
        match protocol {
            Protocol::First => from_scratch(&self.data_a),
            Protocol::Second => from_scratch(&self.data_b),
            Protocol::Transfer => {
                let a = TrainConfig {
                    epochs: self.switch_epochs,
                    stop_at_accuracy: None,
                    ..with_train_seed(&self.train_a)
                };
                let b = with_train_seed(&self.train_b);
                let o = training::transfer(
                    model,
                    (&self.vocab, &data(&self.data_a)?, &a),
                    (&self.vocab, &data(&self.data_b)?, &b),
                    &mut |_, _| {},
                )
                .map_err(run_err)?;
                Ok(RunResult {
                    run: i,
                    protocol,
                    record: o.second,
                    pretrain: Some(o.first),
                    switch_epoch: o.switch_epoch,
                    status: o.status,
                    model: o.model,
                })
            }
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

fn transfer(cfg: &Config) -> Result<()> {
    let out = Out::new(cfg)?;
    let plan = TransferPlan::from_config(cfg)?;
    let runs = cfg.usize("analysis.runs")?;
    let protocols: Vec<Protocol> = cfg.list("analysis.protocols")?;
    if runs == 0 || protocols.is_empty() {
        return Err(config_err("analysis.runs", "need at least one run and one protocol"));
    }
    let target = cfg.f64("analysis.target_accuracy")?;
    let jobs: Vec<(usize, Protocol)> = (0..runs).flat_map(|i| protocols.iter().map(move |&p| (i, p))).collect();
    let results = analysis::run_pool(&jobs, workers(), |&(i, p)| {
        let r = plan.run(i, p);
        if let Ok(r) = &r {
            eprintln!(
                "run {i} {p}: {:?}, epochs to target {:?}",
                r.status,
                r.epochs_to(target)
            );
        }
        r
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut runs_csv = String::from("run,protocol,status,epochs_to_target,final_accuracy,peak2_at_switch\n");
    for r in &results {
        let stem = format!("runs/run{:03}_{}", r.run, r.protocol);
        out.record(&format!("{stem}.csv"), &r.record)?;
        if let Some(pre) = &r.pretrain {
            out.record(&format!("{stem}_pretrain.csv"), pre)?;
        }
        if r.run == 0 {
            out.save(&format!("{stem}.ckpt"), &r.model)?;
        }
        runs_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.run,
            r.protocol,
            format!("{:?}", r.status).to_lowercase(),
            r.epochs_to(target).map_or(-1, |e| e as i64),
            r.record.last().map_or(f64::NAN, |l| l.acc_overall),
            r.peak2_at_switch()
        ));
    }
    out.write("runs.csv", &runs_csv)?;

    // epochs on the curve are absolute: transfer rows start at the switch
    let mut curves = String::from("protocol,epoch,runs,acc_mean,acc_std,peak1_mean,peak2_mean\n");
    let mut body = toml::Table::new();
    for &p in &protocols {
        let mine: Vec<&RunResult> = results.iter().filter(|r| r.protocol == p).collect();
        let mut by_epoch: BTreeMap<usize, Vec<&EvalRow>> = BTreeMap::new();
        for r in &mine {
            for row in &r.record.rows {
                by_epoch.entry(row.epoch + r.switch_epoch).or_default().push(row);
            }
        }
        for (epoch, rows) in by_epoch {
            let acc: Vec<f64> = rows.iter().map(|r| r.acc_overall).collect();
            let (m, s) = mean_std(&acc);
            let p1 = mean_std(&rows.iter().map(|r| r.peak1).collect::<Vec<_>>()).0;
            let p2 = mean_std(&rows.iter().map(|r| r.peak2).collect::<Vec<_>>()).0;
            curves.push_str(&format!("{p},{epoch},{},{m},{s},{p1},{p2}\n", rows.len()));
        }
        let reached: Vec<f64> = mine.iter().filter_map(|r| r.epochs_to(target)).map(|e| e as f64).collect();
        let switch_peaks: Vec<f64> = mine.iter().map(|r| r.peak2_at_switch()).collect();
        let mut t = table([
            ("runs", int(mine.len())),
            ("reached_target", int(reached.len())),
            ("median_epochs_to_target", num(median(reached))),
            ("diverged", int(mine.iter().filter(|r| r.status == Status::Diverged).count())),
        ]);
        if p == Protocol::Transfer {
            t.insert("switch_epochs".into(), int(plan.switch_epochs));
            t.insert("mean_peak2_at_switch".into(), num(mean_std(&switch_peaks).0));
        }
        body.insert(p.to_string(), toml::Value::Table(t));
    }
    out.write("transfer_curves.csv", &curves)?;
    body.insert("target_accuracy".into(), num(target));
    out.summary("transfer", body)?;
    let diverged = results.iter().filter(|r| r.status == Status::Diverged).count();
    if diverged > 0 {
        return Err(CliError::Aborted(format!("{diverged} run(s) diverged")));
    }
    Ok(())
}

/// Every input sequence of every length in range when there are few enough,
/// otherwise `samples` uniform draws per length. The flag tells which.
pub fn verification_set(vocab: &Vocab, task: &TaskSpec, l_min: usize, l_max: usize, samples: usize, seed: u64) -> Result<(Vec<EncodedSequence>, bool)> {
    let k = u64::from(task.input_alphabet_size);
    let total = (l_min..=l_max).try_fold(0u64, |acc, l| k.checked_pow(l as u32).and_then(|c| acc.checked_add(c)));
    let exhaustive = total.is_some_and(|t| t <= EXHAUSTIVE_LIMIT.min(MAX_ENUMERATION));
    let mut d = DatasetConfig::iid(task.clone(), l_min, l_max, samples.max(1), seed);
    if exhaustive {
        d.scheme = Scheme::ExhaustiveSplit;
    }
    let data = dataset::generate(vocab, &d).map_err(run_err)?;
    if exhaustive {
        Ok((data.train.into_iter().chain(data.test).collect(), true))
    } else {
        Ok((data.test, false))
    }
}

fn circuit(cfg: &Config) -> Result<()> {
    let out = Out::new(cfg)?;
    let vocab = vocab(cfg)?;
    let task = task(cfg)?;
    let l_min = cfg.usize("data.l_min")?;
    let l_max = cfg.usize("data.l_max")?;
    let mut plan = CircuitPlan::new(vocab.clone(), task.clone(), l_max);
    plan.beta = cfg.f64("model.beta")?;
    plan.gain = cfg.f64("model.gain")?;
    plan.d = match cfg.usize("model.circuit_d")? {
        0 => None,
        d => Some(d),
    };
    let model = build_iteration_head(&plan).map_err(|e| config_err("model.*", e))?;
    out.save("circuit.ckpt", &model)?;

    let (seqs, exhaustive) = verification_set(&vocab, &task, l_min, l_max, cfg.usize("analysis.samples")?, cfg.u64("data.seed")?)?;
    let report = training::evaluate_with(&model, &seqs, &[], true).map_err(run_err)?;
    let reports = analysis::peakiness_all(&model, &seqs).map_err(run_err)?;
    let invariance = analysis::attention_invariance(
        &model,
        &vocab,
        &task,
        l_max,
        cfg.usize("analysis.invariance_inputs")?.max(2),
        cfg.u64("data.seed")?,
    )
    .map_err(run_err)?;
    let find = |layer: usize, p: Pattern| {
        reports
            .iter()
            .find(|r| r.layer == layer && r.head == 0 && r.pattern == p)
            .expect("every head is reported")
    };
    let (p1, p2) = (find(1, Pattern::FirstEoi), find(2, Pattern::SecondPt));
    let csv = per_length_csv(
        "L,n,accuracy,peak1,peak2",
        report.per_length.iter().map(|(l, s)| {
            format!(
                "{l},{},{},{},{}",
                s.n,
                s.exact as f64 / s.n as f64,
                p1.per_length[l],
                p2.per_length[l]
            )
        }),
    );
    out.write("verify.csv", &csv)?;
    let acc = report.accuracy();
    out.summary(
        "circuit",
        table([
            ("task", task.name.clone().into()),
            ("l_max", int(l_max)),
            ("d", int(model.cfg.d)),
            ("n_verified", int(report.n())),
            ("exhaustive", exhaustive.into()),
            ("accuracy", num(acc)),
            ("peak1", num(p1.mean)),
            ("peak2", num(p2.mean)),
            ("invariance_max_std", num(invariance)),
        ]),
    )?;
    if acc < 1.0 || p1.mean < 1.0 || p2.mean < 1.0 {
        return Err(CliError::Verification(format!(
            "accuracy {acc}, peakiness {} / {}",
            p1.mean, p2.mean
        )));
    }
    Ok(())
}

fn gradcheck(cfg: &Config) -> Result<()> {
    let out = Out::new(cfg)?;
    let seeds = cfg.u64("analysis.gradcheck_seeds")?;
    let tol = cfg.f64("analysis.gradcheck_tol")?;
    let suite = gradcheck::run_suite(seeds, tol).map_err(run_err)?;
    let csv = per_length_csv(
        "op,cases,worst_rel_error,passed",
        suite.iter().map(|s| format!("{},{},{},{}", s.op, s.cases, s.worst, s.passed)),
    );
    out.write("gradcheck.csv", &csv)?;
    let failed: Vec<&str> = suite.iter().filter(|s| !s.passed).map(|s| s.op.as_str()).collect();
    let worst = suite.iter().map(|s| s.worst).fold(0.0, f64::max);
    out.summary(
        "gradcheck",
        table([
            ("ops", int(suite.len())),
            ("seeds", int(seeds as usize)),
            ("tolerance", num(tol)),
            ("worst_rel_error", num(worst)),
            ("failed", toml::Value::Array(failed.iter().map(|&s| s.into()).collect())),
        ]),
    )?;
    if !failed.is_empty() {
        return Err(CliError::Verification(format!("gradient mismatch in {}", failed.join(", "))));
    }
    Ok(())
}
