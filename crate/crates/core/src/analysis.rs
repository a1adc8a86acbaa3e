//! Circuit diagnostics: peakiness, attention invariance, patching and grid
//! scans.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::dataset::{generate, stream_rng, DatasetConfig, DatasetError};
use crate::encoding::{encode, EncodedSequence, EncodingError, Layout, Vocab};
use crate::model::{Model, ModelConfig, ModelError, PatchSpec};
use crate::training::{evaluate_with, train, EvalReport, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    /// Generation-region queries on the EoI key.
    FirstEoi,
    /// Query `L + t` on input position `t`.
    SecondPt,
}

impl FromStr for Pattern {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "first_eoi" => Ok(Pattern::FirstEoi),
            "second_pt" => Ok(Pattern::SecondPt),
            other => Err(format!("unknown pattern `{other}` (first_eoi | second_pt)")),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::FirstEoi => "first_eoi",
            Pattern::SecondPt => "second_pt",
        })
    }
}

/// Fraction of `t = 1..=L` whose target entry exceeds one half, for a
/// row-major `T x T` attention map of a sequence with `L` inputs.
pub fn pattern_score(a: &[f64], t: usize, l: usize, pattern: Pattern) -> f64 {
    let hits = (1..=l)
        .filter(|&step| {
            let q = l + step;
            let k = match pattern {
                Pattern::FirstEoi => l + 1,
                Pattern::SecondPt => step,
            };
            q < t && a[q * t + k] > 0.5
        })
        .count();
    hits as f64 / l as f64
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakinessReport {
    pub layer: usize,
    pub head: usize,
    pub pattern: Pattern,
    pub mean: f64,
    /// Population standard deviation over samples.
    pub std: f64,
    pub n_samples: usize,
    pub per_length: BTreeMap<usize, f64>,
}

fn pick(report: &EvalReport, layer: usize, head: usize, pattern: Pattern) -> Result<PeakinessReport> {
    if layer == 0 || layer > report.n_layers || head >= report.n_heads {
        return Err(AnalysisError::Invalid(format!("no head {head} in layer {layer}")));
    }
    let sums = &report.patterns[(layer - 1) * report.n_heads + head];
    let scores = match pattern {
        Pattern::FirstEoi => &sums.first_eoi,
        Pattern::SecondPt => &sums.second_pt,
    };
    let (mean, std) = mean_std(scores);
    let mut by_len: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&l, &s) in sums.input_len.iter().zip(scores) {
        by_len.entry(l).or_default().push(s);
    }
    Ok(PeakinessReport {
        layer,
        head,
        pattern,
        mean,
        std,
        n_samples: scores.len(),
        per_length: by_len.into_iter().map(|(l, v)| (l, mean_std(&v).0)).collect(),
    })
}

fn require_cot(samples: &[EncodedSequence]) -> Result<()> {
    if samples.is_empty() {
        return Err(AnalysisError::Invalid("no samples".into()));
    }
    if samples.iter().any(|s| s.layout != Layout::Cot) {
        return Err(AnalysisError::Invalid("peakiness is only defined for the cot layout".into()));
    }
    Ok(())
}

/// Peakiness of one (layer, head) for one pattern: per-sample means, then the
/// mean and standard deviation over samples.
pub fn peakiness(model: &Model, samples: &[EncodedSequence], pattern: Pattern, layer: usize, head: usize) -> Result<PeakinessReport> {
    require_cot(samples)?;
    let report = evaluate_with(model, samples, &[], true)?;
    pick(&report, layer, head, pattern)
}

/// Both patterns for every (layer, head).
pub fn peakiness_all(model: &Model, samples: &[EncodedSequence]) -> Result<Vec<PeakinessReport>> {
    require_cot(samples)?;
    let report = evaluate_with(model, samples, &[], true)?;
    let mut out = Vec::new();
    for layer in 1..=report.n_layers {
        for head in 0..report.n_heads {
            for pattern in [Pattern::FirstEoi, Pattern::SecondPt] {
                out.push(pick(&report, layer, head, pattern)?);
            }
        }
    }
    Ok(out)
}

/// Largest per-entry standard deviation of the attention maps over
/// `n_inputs` random inputs of length `l`, across every (layer, head).
pub fn attention_invariance(model: &Model, vocab: &Vocab, task: &crate::tasks::TaskSpec, l: usize, n_inputs: usize, seed: u64) -> Result<f64> {
    if n_inputs < 2 {
        return Err(AnalysisError::Invalid("attention_invariance needs at least 2 inputs".into()));
    }
    let mut rng = stream_rng(seed, 0x1a7, l as u64);
    let seqs = (0..n_inputs)
        .map(|_| {
            let xs: Vec<u32> = (0..l).map(|_| rng.gen_range(0..task.input_alphabet_size)).collect();
            encode(vocab, task, &xs, Layout::Cot)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let inputs: Vec<&[u32]> = seqs.iter().map(|s| &s.tokens[..]).collect();
    let (_, maps) = model.forward_batch(&inputs, true, &[])?;
    let t = inputs[0].len();
    let mut worst = 0.0_f64;
    for m in maps.expect("capture requested") {
        let d = m.data();
        for e in 0..t * t {
            let col: Vec<f64> = (0..n_inputs).map(|b| d[b * t * t + e]).collect();
            worst = worst.max(mean_std(&col).1);
        }
    }
    Ok(worst)
}

/// Accuracy under forward-time patching; see [`evaluate_with`] for how the
/// patch templates are specialised per length.
pub fn patch_eval(model: &Model, patches: &[PatchSpec], data: &[EncodedSequence]) -> Result<EvalReport> {
    Ok(evaluate_with(model, data, patches, false)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScanMode {
    Cot2Layer,
    NoCot2Layer,
    Cot1Layer,
}

impl ScanMode {
    pub const ALL: [ScanMode; 3] = [ScanMode::Cot2Layer, ScanMode::NoCot2Layer, ScanMode::Cot1Layer];

    pub fn layout(self) -> Layout {
        match self {
            ScanMode::NoCot2Layer => Layout::FinalOnly,
            _ => Layout::Cot,
        }
    }

    pub fn n_layers(self) -> usize {
        match self {
            ScanMode::Cot1Layer => 1,
            _ => 2,
        }
    }
}

impl FromStr for ScanMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cot_2layer" => Ok(ScanMode::Cot2Layer),
            "no_cot_2layer" => Ok(ScanMode::NoCot2Layer),
            "cot_1layer" => Ok(ScanMode::Cot1Layer),
            other => Err(format!("unknown scan mode `{other}` (cot_2layer | no_cot_2layer | cot_1layer)")),
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanMode::Cot2Layer => "cot_2layer",
            ScanMode::NoCot2Layer => "no_cot_2layer",
            ScanMode::Cot1Layer => "cot_1layer",
        })
    }
}

pub const SCAN_FORMAT: &str = "iterhead-scan/1";
pub const SCAN_HEADER: &str = "L_max,d,mode,final_accuracy,peak1,peak2";

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub l_max: usize,
    pub d: usize,
    pub mode: ScanMode,
    /// NaN when the cell failed.
    pub final_accuracy: f64,
    pub peak1: f64,
    pub peak2: f64,
}

impl ScanRow {
    pub fn key(&self) -> (usize, usize, ScanMode) {
        (self.l_max, self.d, self.mode)
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.l_max, self.d, self.mode, self.final_accuracy, self.peak1, self.peak2
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(Self {
            l_max: f[0].parse().ok()?,
            d: f[1].parse().ok()?,
            mode: f[2].parse().ok()?,
            final_accuracy: f[3].parse().ok()?,
            peak1: f[4].parse().ok()?,
            peak2: f[5].parse().ok()?,
        })
    }
}

/// Everything a scan cell needs besides its grid coordinates.
#[derive(Debug, Clone)]
pub struct ScanBase {
    pub vocab: Vocab,
    /// `l_max` and `layout` are overwritten per cell.
    pub data: DatasetConfig,
    /// `d`, `n_layers`, `max_positions` and `mlp_hidden = 4d` are set per cell.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Trains and scores one cell.
pub fn scan_cell(base: &ScanBase, l_max: usize, d: usize, mode: ScanMode) -> Result<ScanRow> {
    let mut dcfg = base.data.clone();
    dcfg.l_max = l_max;
    dcfg.layout = mode.layout();
    let data = generate(&base.vocab, &dcfg)?;
    let mut mcfg = base.model.clone();
    mcfg.d = d;
    mcfg.mlp_hidden = 4 * d;
    mcfg.n_layers = mode.n_layers();
    mcfg.max_positions = ModelConfig::positions_for(l_max);
    let model = Model::init(mcfg, base.train.seed)?;
    let out = train(model, &data, &base.train)?;
    let last = out
        .record
        .last()
        .ok_or_else(|| AnalysisError::Invalid("training produced no evaluation".into()))?;
    Ok(ScanRow {
        l_max,
        d,
        mode,
        final_accuracy: if out.record.aborted.is_some() { f64::NAN } else { last.acc_overall },
        peak1: last.peak1,
        peak2: last.peak2,
    })
}

/// Cell keys already present in an existing scan CSV.
pub fn completed_cells<R: BufRead>(input: R) -> Result<BTreeSet<(usize, usize, ScanMode)>> {
    let mut done = BTreeSet::new();
    for line in input.lines() {
        let line = line?;
        if line.starts_with('#') || line == SCAN_HEADER || line.trim().is_empty() {
            continue;
        }
        let row = ScanRow::from_csv(&line)
            .ok_or_else(|| AnalysisError::Invalid(format!("unreadable scan row `{line}`")))?;
        done.insert(row.key());
    }
    Ok(done)
}

/// Runs every (L_max, d) cell of `mode` not listed in `skip`, on up to
/// `workers` threads. Finished rows go to `emit` in grid order as soon as
/// every earlier cell is done, and are also returned in that order. A failed
/// cell is reported through `on_error` and yields a NaN row.
#[allow(clippy::too_many_arguments)]
pub fn scan(
    base: &ScanBase,
    l_maxes: &[usize],
    dims: &[usize],
    mode: ScanMode,
    skip: &BTreeSet<(usize, usize, ScanMode)>,
    workers: usize,
    on_error: &(dyn Fn(usize, usize, &AnalysisError) + Sync),
    emit: &(dyn Fn(&ScanRow) + Sync),
) -> Result<Vec<ScanRow>> {
    if l_maxes.is_empty() || dims.is_empty() {
        return Err(AnalysisError::Invalid("scan grid is empty".into()));
    }
    let cells: Vec<(usize, usize)> = l_maxes
        .iter()
        .flat_map(|&l| dims.iter().map(move |&d| (l, d)))
        .filter(|&(l, d)| !skip.contains(&(l, d, mode)))
        .collect();
    let index: BTreeMap<(usize, usize), usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    // next index to emit, plus finished rows waiting on earlier cells
    let pending = std::sync::Mutex::new((0usize, BTreeMap::<usize, ScanRow>::new()));
    let results = run_pool(&cells, workers, |&(l, d)| {
        let row = match scan_cell(base, l, d, mode) {
            Ok(row) => row,
            Err(e) => {
                on_error(l, d, &e);
                ScanRow {
                    l_max: l,
                    d,
                    mode,
                    final_accuracy: f64::NAN,
                    peak1: f64::NAN,
                    peak2: f64::NAN,
                }
            }
        };
        let mut guard = pending.lock().unwrap();
        let (next, waiting) = &mut *guard;
        waiting.insert(index[&(l, d)], row.clone());
        while let Some(r) = waiting.remove(next) {
            emit(&r);
            *next += 1;
        }
        row
    });
    Ok(results)
}

/// Maps `f` over `items` on up to `workers` scoped threads; output order
/// follows input order.
pub fn run_pool<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> = items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
}

pub fn write_scan_csv<W: Write>(mut out: W, rows: &[ScanRow], with_header: bool) -> std::io::Result<()> {
    if with_header {
        writeln!(out, "# {SCAN_FORMAT}")?;
        writeln!(out, "{SCAN_HEADER}")?;
    }
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}
