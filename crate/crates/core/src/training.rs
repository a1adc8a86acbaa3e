//! Optimizers, the training loop, evaluation and the task-switch protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{pattern_score, Pattern};
use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dataset::{stream_rng, Dataset};
use crate::encoding::{loss_mask, EncodedSequence, Layout, LossMode, Vocab};
use crate::model::{argmax, bind, freeze_mask, Model, ModelError, PatchSpec};

pub const RECORD_FORMAT: &str = "iterhead-runrecord/1";
/// Sequences per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;
const SHUFFLE_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0} set")]
    EmptyData(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(format!("unknown optimizer `{other}` (adam | sgd)")),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub eval_every: usize,
    /// Glob patterns over parameter names; matching arrays are trained.
    pub trainable: Vec<String>,
    pub reset_optimizer_state_on_switch: bool,
    /// Stop after the first evaluation at or above this accuracy.
    pub stop_at_accuracy: Option<f64>,
    /// Fill the `seconds` column; off keeps records byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            epochs: 1000,
            seed: 0,
            loss_mode: LossMode::All,
            eval_every: 10,
            trainable: vec!["*".into()],
            reset_optimizer_state_on_switch: true,
            stop_at_accuracy: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        // lr = 0 is allowed: it is the no-op run used to check bookkeeping.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if let Some(a) = self.stop_at_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("stop_at_accuracy {a} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Adam moments (or nothing, for SGD) per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for buf in self.m.iter_mut().chain(self.v.iter_mut()) {
            buf.fill(0.0);
        }
    }
}

/// Applies one update to every array with a gradient. `grads[i] = None`
/// leaves array `i` and its moments untouched.
pub fn apply_update(
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= cfg.lr * gi;
                }
            }
            Optimizer::Adam => {
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                for (j, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gi;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gi * gi;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
    }
}

/// Indices of `seqs` grouped by input length, in ascending length order.
fn group_by_length(seqs: &[EncodedSequence], idx: impl IntoIterator<Item = usize>) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in idx {
        groups.entry(seqs[i].input_len).or_default().push(i);
    }
    groups
}

/// Token-weighted mean cross-entropy of `batch` and the gradients of the
/// trainable arrays. Sequences of different lengths go through separate
/// forwards on one tape, so no padding is needed.
pub fn batch_loss_and_grads(
    model: &Model,
    seqs: &[EncodedSequence],
    batch: &[usize],
    mode: LossMode,
    trainable: &[bool],
    want_grads: bool,
) -> Result<(f64, usize, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &model.params, if want_grads { trainable } else { &[] });
    let groups = group_by_length(seqs, batch.iter().copied());
    let mut parts = Vec::with_capacity(groups.len());
    let mut total = 0usize;
    for members in groups.values() {
        let inputs: Vec<&[u32]> = members.iter().map(|&i| &seqs[i].tokens[..seqs[i].tokens.len() - 1]).collect();
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for &i in members {
            targets.extend(seqs[i].tokens[1..].iter().map(|&x| x as usize));
            mask.extend(loss_mask(&seqs[i], mode));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            continue;
        }
        let out = model.forward_on_tape(&mut tape, &bound, &inputs, &[])?;
        let ce = tape.cross_entropy(out.logits, &targets, &mask)?;
        parts.push((ce, count));
        total += count;
    }
    if total == 0 {
        return Err(TrainError::Config("batch has no supervised tokens".into()));
    }
    let mut loss = None;
    for (ce, count) in parts {
        let weighted = tape.scale(ce, count as f64 / total as f64);
        loss = Some(match loss {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let loss = loss.expect("at least one group");
    let value = tape.value(loss).data()[0];
    if !want_grads {
        return Ok((value, total, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let out = bound
        .vars()
        .iter()
        .zip(trainable)
        .map(|(&v, &on)| if on { grads.take(v) } else { None })
        .collect();
    Ok((value, total, out))
}

/// Outcome counts for one input length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LengthStats {
    pub n: usize,
    pub exact: usize,
    pub tf_correct: usize,
    pub tf_total: usize,
}

/// Sums of per-sample pattern scores for one (layer, head).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatternSums {
    pub first_eoi: Vec<f64>,
    pub second_pt: Vec<f64>,
    pub input_len: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_length: BTreeMap<usize, LengthStats>,
    /// Per-sample pattern scores per (layer, head), layer-major; empty when
    /// not requested or undefined for the layout.
    pub patterns: Vec<PatternSums>,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl EvalReport {
    pub fn n(&self) -> usize {
        self.per_length.values().map(|s| s.n).sum()
    }

    /// Exact-match accuracy over all test items.
    pub fn accuracy(&self) -> f64 {
        let exact: usize = self.per_length.values().map(|s| s.exact).sum();
        exact as f64 / self.n() as f64
    }

    pub fn accuracy_at(&self, len: usize) -> Option<f64> {
        self.per_length.get(&len).map(|s| s.exact as f64 / s.n as f64)
    }

    /// Teacher-forced next-state-token accuracy.
    pub fn tf_accuracy(&self) -> f64 {
        let (c, t) = self
            .per_length
            .values()
            .fold((0, 0), |(c, t), s| (c + s.tf_correct, t + s.tf_total));
        c as f64 / t as f64
    }

    fn pattern_mean(&self, layer: usize, pattern: Pattern) -> f64 {
        if self.patterns.is_empty() || layer == 0 || layer > self.n_layers {
            return f64::NAN;
        }
        (0..self.n_heads)
            .map(|h| {
                let sums = &self.patterns[(layer - 1) * self.n_heads + h];
                let scores = match pattern {
                    Pattern::FirstEoi => &sums.first_eoi,
                    Pattern::SecondPt => &sums.second_pt,
                };
                scores.iter().sum::<f64>() / scores.len() as f64
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Layer-1 `first_eoi` peakiness, maximised over heads.
    pub fn peak1(&self) -> f64 {
        self.pattern_mean(1, Pattern::FirstEoi)
    }

    /// Layer-2 `second_pt` peakiness, maximised over heads.
    pub fn peak2(&self) -> f64 {
        self.pattern_mean(2, Pattern::SecondPt)
    }
}

/// Scores the test set in one teacher-forced pass per length group.
///
/// Greedy decoding emits the reference completion exactly when, at every
/// completion position, the arg-max (lowest id on ties) of the logits given
/// the reference prefix is the next reference token. Causality makes the
/// logits on a prefix independent of what follows, so this single pass gives
/// the same exact-match verdict as decoding each prompt token by token.
///
/// `patches` are templates: their `input_len` is replaced by each group's
/// length.
pub fn evaluate_with(
    model: &Model,
    test: &[EncodedSequence],
    patches: &[PatchSpec],
    with_patterns: bool,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(TrainError::EmptyData("test"));
    }
    let cfg = &model.cfg;
    let layout = test[0].layout;
    if test.iter().any(|s| s.layout != layout) {
        return Err(TrainError::Config("test set mixes layouts".into()));
    }
    let with_patterns = with_patterns && layout == Layout::Cot;
    let n_maps = cfg.n_layers * cfg.n_heads;
    let mut report = EvalReport {
        per_length: BTreeMap::new(),
        patterns: if with_patterns { vec![PatternSums::default(); n_maps] } else { Vec::new() },
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
    };
    let v = cfg.vocab_size;
    for (len, members) in group_by_length(test, 0..test.len()) {
        let group_patches: Vec<PatchSpec> = patches
            .iter()
            .map(|p| PatchSpec {
                input_len: len,
                ..p.clone()
            })
            .collect();
        for chunk in members.chunks(EVAL_CHUNK) {
            let inputs: Vec<&[u32]> = chunk.iter().map(|&i| &test[i].tokens[..test[i].tokens.len() - 1]).collect();
            let t = inputs[0].len();
            let (logits, maps) = model.forward_batch(&inputs, with_patterns, &group_patches)?;
            let stats = report.per_length.entry(len).or_default();
            for (b, &i) in chunk.iter().enumerate() {
                let seq = &test[i];
                let eoi = seq.eoi_index;
                let answer = layout.answer_len(len);
                let row = |pos: usize| &logits.data()[(b * t + pos) * v..(b * t + pos + 1) * v];
                let hit = |pos: usize| argmax(row(pos)) as u32 == seq.tokens[pos + 1];
                let state_hits = (eoi..eoi + answer).filter(|&p| hit(p)).count();
                let exact = match layout {
                    Layout::Cot => state_hits == answer && hit(eoi + answer),
                    Layout::FinalOnly => state_hits == answer,
                };
                stats.n += 1;
                stats.exact += usize::from(exact);
                stats.tf_correct += state_hits;
                stats.tf_total += answer;
                if let Some(maps) = &maps {
                    for (k, m) in maps.iter().enumerate() {
                        let a = &m.data()[b * t * t..(b + 1) * t * t];
                        let sums = &mut report.patterns[k];
                        sums.first_eoi.push(pattern_score(a, t, len, Pattern::FirstEoi));
                        sums.second_pt.push(pattern_score(a, t, len, Pattern::SecondPt));
                        sums.input_len.push(len);
                    }
                }
            }
        }
    }
    Ok(report)
}

pub fn evaluate(model: &Model, test: &[EncodedSequence]) -> Result<EvalReport> {
    evaluate_with(model, test, &[], false)
}

/// Mean per-token loss over a whole split, without gradients.
pub fn dataset_loss(model: &Model, seqs: &[EncodedSequence], mode: LossMode, chunk: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..seqs.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (loss, n, _) = batch_loss_and_grads(model, seqs, part, mode, &[], false)?;
        sum += loss * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub epoch: usize,
    pub loss: f64,
    pub acc_overall: f64,
    /// Indexed by input length minus one, up to the record's `l_max`.
    pub acc_per_length: Vec<f64>,
    pub peak1: f64,
    pub peak2: f64,
    pub seconds: f64,
    pub tf_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub l_max: usize,
    pub rows: Vec<EvalRow>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

impl RunRecord {
    pub fn new(l_max: usize) -> Self {
        Self {
            l_max,
            rows: Vec::new(),
            aborted: None,
        }
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["epoch".to_string(), "loss".into(), "acc_overall".into()];
        cols.extend((1..=self.l_max).map(|l| format!("acc_L{l}")));
        cols.extend(["peak1", "peak2", "seconds", "tf_acc"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self, r: &EvalRow) -> String {
        let mut cols = vec![r.epoch.to_string(), r.loss.to_string(), r.acc_overall.to_string()];
        cols.extend(r.acc_per_length.iter().map(f64::to_string));
        cols.extend([r.peak1, r.peak2, r.seconds, r.tf_acc].map(|v| v.to_string()));
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# {RECORD_FORMAT}")?;
        writeln!(out, "{}", self.header())?;
        for r in &self.rows {
            writeln!(out, "{}", self.csv_row(r))?;
        }
        if let Some(reason) = &self.aborted {
            writeln!(out, "# aborted: {reason}")?;
        }
        Ok(())
    }

    /// First evaluated epoch whose overall accuracy reaches `threshold`.
    pub fn first_epoch_reaching(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.acc_overall >= threshold).map(|r| r.epoch)
    }

    pub fn last(&self) -> Option<&EvalRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Completed,
    ReachedTarget,
    Diverged,
}

pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
    pub optimizer: OptimizerState,
    pub status: Status,
}

fn eval_row(
    model: &Model,
    test: &[EncodedSequence],
    l_max: usize,
    epoch: usize,
    loss: f64,
    seconds: f64,
) -> Result<EvalRow> {
    let report = evaluate_with(model, test, &[], true)?;
    Ok(EvalRow {
        epoch,
        loss,
        acc_overall: report.accuracy(),
        acc_per_length: (1..=l_max).map(|l| report.accuracy_at(l).unwrap_or(f64::NAN)).collect(),
        peak1: report.peak1(),
        peak2: report.peak2(),
        seconds,
        tf_acc: report.tf_accuracy(),
    })
}

/// Trains from scratch (fresh optimizer state).
pub fn train(model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let state = OptimizerState::new(&model);
    train_from(model, state, data, cfg, &mut |_| {})
}

/// Continues training with an existing optimizer state. `observe` sees each
/// evaluation row as it is produced.
pub fn train_from(
    mut model: Model,
    mut state: OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&EvalRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyData("train"));
    }
    if data.test.is_empty() {
        return Err(TrainError::EmptyData("test"));
    }
    let trainable = freeze_mask(&model.cfg, &model.params, &cfg.trainable)?;
    let l_max = data.train.iter().chain(&data.test).map(|s| s.input_len).max().unwrap_or(0);
    let mut record = RunRecord::new(l_max);
    let start = Instant::now();
    let elapsed = |s: &Instant| if cfg.record_wall_time { s.elapsed().as_secs_f64() } else { 0.0 };

    let initial_loss = dataset_loss(&model, &data.train, cfg.loss_mode, cfg.batch_size)?;
    let row = eval_row(&model, &data.test, l_max, 0, initial_loss, elapsed(&start))?;
    observe(&row);
    let mut done = cfg.stop_at_accuracy.is_some_and(|a| row.acc_overall >= a);
    record.rows.push(row);
    if done {
        return Ok(TrainOutcome {
            model,
            record,
            optimizer: state,
            status: Status::ReachedTarget,
        });
    }

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let (loss, n, grads) =
                batch_loss_and_grads(&model, &data.train, batch, cfg.loss_mode, &trainable, true)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.all_finite()) {
                record.aborted = Some(format!("non-finite loss at epoch {epoch}"));
                return Ok(TrainOutcome {
                    model,
                    record,
                    optimizer: state,
                    status: Status::Diverged,
                });
            }
            let before = model.params.clone();
            let before_state = state.clone();
            apply_update(cfg, &mut state, model.params.tensors_mut(), &grads);
            if !model.params.all_finite() {
                model.params = before;
                record.aborted = Some(format!("non-finite parameters at epoch {epoch}"));
                return Ok(TrainOutcome {
                    model,
                    record,
                    optimizer: before_state,
                    status: Status::Diverged,
                });
            }
            loss_sum += loss * n as f64;
            loss_count += n;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let loss = loss_sum / loss_count as f64;
            (loss_sum, loss_count) = (0.0, 0);
            let row = eval_row(&model, &data.test, l_max, epoch, loss, elapsed(&start))?;
            observe(&row);
            done = cfg.stop_at_accuracy.is_some_and(|a| row.acc_overall >= a);
            record.rows.push(row);
            if done {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        record,
        optimizer: state,
        status: if done { Status::ReachedTarget } else { Status::Completed },
    })
}

pub struct TransferOutcome {
    pub model: Model,
    pub first: RunRecord,
    pub second: RunRecord,
    /// Epochs completed on the first task.
    pub switch_epoch: usize,
    pub status: Status,
}

/// Trains on `a`, optionally zeroes the optimizer moments, then continues on
/// `b` with `cfg_b` (which may restrict the trainable arrays).
pub fn transfer(
    model: Model,
    (vocab_a, data_a, cfg_a): (&Vocab, &Dataset, &TrainConfig),
    (vocab_b, data_b, cfg_b): (&Vocab, &Dataset, &TrainConfig),
    observe: &mut dyn FnMut(usize, &EvalRow),
) -> Result<TransferOutcome> {
    if vocab_a != vocab_b {
        return Err(TrainError::Config("both tasks must share one vocabulary".into()));
    }
    let state = OptimizerState::new(&model);
    let a = train_from(model, state, data_a, cfg_a, &mut |r| observe(0, r))?;
    let switch_epoch = a.record.last().map_or(0, |r| r.epoch);
    if a.status == Status::Diverged {
        return Ok(TransferOutcome {
            model: a.model,
            first: a.record,
            second: RunRecord::new(0),
            switch_epoch,
            status: Status::Diverged,
        });
    }
    let mut state = a.optimizer;
    if cfg_b.reset_optimizer_state_on_switch {
        state.reset();
    }
    let b = train_from(a.model, state, data_b, cfg_b, &mut |r| observe(1, r))?;
    Ok(TransferOutcome {
        model: b.model,
        first: a.record,
        second: b.record,
        switch_epoch,
        status: b.status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_iteration_head, CircuitPlan};
    use crate::dataset::{generate, DatasetConfig};
    use crate::model::ModelConfig;
    use crate::tasks::TaskSpec;
    use rand::{Rng, SeedableRng};

    fn tiny_model(seed: u64) -> Model {
        let mut cfg = ModelConfig::new(16, 8, ModelConfig::positions_for(4));
        cfg.mlp_hidden = 16;
        Model::init(cfg, seed).unwrap()
    }

    fn parity_data(l_max: usize, n: usize, seed: u64) -> Dataset {
        generate(&Vocab::standard(), &DatasetConfig::iid(TaskSpec::parity(), 1, l_max, n, seed)).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            eval_every: 1,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params_and_one_row() {
        let model = tiny_model(0);
        let out = train(model.clone(), &parity_data(3, 8, 1), &quick_cfg(0)).unwrap();
        assert_eq!(out.model.params, model.params);
        assert_eq!(out.record.rows.len(), 1);
        assert_eq!(out.record.rows[0].epoch, 0);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let model = tiny_model(1);
        for optimizer in [Optimizer::Adam, Optimizer::Sgd] {
            let cfg = TrainConfig {
                lr: 0.0,
                optimizer,
                ..quick_cfg(3)
            };
            let out = train(model.clone(), &parity_data(3, 8, 1), &cfg).unwrap();
            assert_eq!(out.model.params, model.params);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let data = parity_data(2, 4, 0);
        for cfg in [
            TrainConfig { lr: -1.0, ..quick_cfg(1) },
            TrainConfig { batch_size: 0, ..quick_cfg(1) },
            TrainConfig { trainable: vec!["nope".into()], ..quick_cfg(1) },
        ] {
            assert!(train(tiny_model(0), &data, &cfg).is_err());
        }
        let empty = Dataset { train: data.train.clone(), test: Vec::new() };
        assert!(matches!(train(tiny_model(0), &empty, &quick_cfg(1)), Err(TrainError::EmptyData("test"))));
        assert!(matches!(evaluate(&tiny_model(0), &[]), Err(TrainError::EmptyData("test"))));
    }

    #[test]
    fn sgd_step_lowers_single_example_loss() {
        let data = parity_data(4, 1, 3);
        let seqs = &data.train[..1];
        for seed in 0..10 {
            let model = tiny_model(seed);
            let mask = vec![true; model.params.len()];
            let (before, _, grads) = batch_loss_and_grads(&model, seqs, &[0], LossMode::All, &mask, true).unwrap();
            let cfg = TrainConfig {
                optimizer: Optimizer::Sgd,
                lr: 1e-3,
                ..TrainConfig::default()
            };
            let mut stepped = model.clone();
            let mut state = OptimizerState::new(&model);
            apply_update(&cfg, &mut state, stepped.params.tensors_mut(), &grads);
            let (after, _, _) = batch_loss_and_grads(&stepped, seqs, &[0], LossMode::All, &mask, false).unwrap();
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn adam_matches_reference_formula() {
        let cfg = TrainConfig::default();
        let mut p = vec![Tensor::new(vec![2], vec![0.5, -1.0]).unwrap()];
        let model_like = OptimizerState {
            step: 0,
            m: vec![vec![0.0; 2]],
            v: vec![vec![0.0; 2]],
        };
        let mut state = model_like;
        let g = [Some(Tensor::new(vec![2], vec![0.2, -3.0]).unwrap())];
        apply_update(&cfg, &mut state, &mut p, &g);
        // the first bias-corrected step is lr * g / (|g| + eps)
        let expect = |w: f64, gi: f64| w - 3e-4 * gi / (gi.abs() + 1e-8);
        assert!((p[0].data()[0] - expect(0.5, 0.2)).abs() < 1e-15);
        assert!((p[0].data()[1] - expect(-1.0, -3.0)).abs() < 1e-15);
        apply_update(&cfg, &mut state, &mut p, &g);
        let m = 0.9 * 0.1 * 0.2 + 0.1 * 0.2;
        let v = 0.999 * 0.001 * 0.04 + 0.001 * 0.04;
        let step = 3e-4 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p[0].data()[0] - (expect(0.5, 0.2) - step)).abs() < 1e-15);
    }

    #[test]
    fn reset_state_steps_like_fresh_adam() {
        let model = tiny_model(2);
        let data = parity_data(3, 8, 4);
        let cfg = quick_cfg(2);
        let warm = train(model.clone(), &data, &cfg).unwrap();
        let mask = vec![true; model.params.len()];
        let (_, _, grads) = batch_loss_and_grads(&warm.model, &data.train, &[0, 1, 2], LossMode::All, &mask, true).unwrap();

        let mut reset = warm.optimizer.clone();
        reset.reset();
        let mut a = warm.model.params.clone();
        apply_update(&cfg, &mut reset, a.tensors_mut(), &grads);
        let mut fresh = OptimizerState::new(&warm.model);
        let mut b = warm.model.params.clone();
        apply_update(&cfg, &mut fresh, b.tensors_mut(), &grads);
        assert_eq!(a, b);
        let mut carried = warm.optimizer.clone();
        let mut c = warm.model.params.clone();
        apply_update(&cfg, &mut carried, c.tensors_mut(), &grads);
        assert_ne!(a, c);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = parity_data(3, 16, 5);
        let run = || {
            let out = train(tiny_model(7), &data, &quick_cfg(3)).unwrap();
            let mut csv = Vec::new();
            out.record.write_csv(&mut csv).unwrap();
            (csv, out.model.params)
        };
        let (c1, p1) = run();
        let (c2, p2) = run();
        assert_eq!(c1, c2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn frozen_arrays_do_not_move() {
        let data = parity_data(3, 8, 5);
        let cfg = TrainConfig {
            trainable: vec!["layer2.mlp_*".into()],
            ..quick_cfg(2)
        };
        let model = tiny_model(3);
        let out = train(model.clone(), &data, &cfg).unwrap();
        for ((name, before), (_, after)) in model.params.iter().zip(out.model.params.iter()) {
            assert_eq!(before == after, !name.starts_with("layer2.mlp_"), "{name}");
        }
    }

    #[test]
    fn training_lowers_loss_on_tiny_parity() {
        let data = parity_data(3, 32, 9);
        let out = train(tiny_model(4), &data, &quick_cfg(15)).unwrap();
        let first = out.record.rows.first().unwrap().loss;
        let last = out.record.last().unwrap().loss;
        assert!(last < 0.8 * first, "{first} -> {last}");
        assert_eq!(out.status, Status::Completed);
        let epochs: Vec<usize> = out.record.rows.iter().map(|r| r.epoch).collect();
        assert!(epochs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn divergence_is_flagged_with_last_finite_params() {
        let data = parity_data(3, 8, 5);
        let mut model = tiny_model(0);
        model.params.get_mut("unembedding").unwrap().data_mut()[0] = f64::NAN;
        let out = train(model.clone(), &data, &quick_cfg(3));
        // a NaN already in the weights poisons the very first loss
        assert!(out.is_err() || out.as_ref().unwrap().status == Status::Diverged);

        let huge = TrainConfig {
            optimizer: Optimizer::Sgd,
            lr: 1e300,
            ..quick_cfg(3)
        };
        let out = train(tiny_model(0), &data, &huge).unwrap();
        assert_eq!(out.status, Status::Diverged);
        assert!(out.model.params.all_finite());
        assert!(out.record.aborted.is_some());
    }

    #[test]
    fn circuit_scores_perfectly() {
        let vocab = Vocab::standard();
        let task = TaskSpec::xy_plus_one(11).unwrap();
        let model = build_iteration_head(&CircuitPlan::new(vocab.clone(), task.clone(), 5)).unwrap();
        let data = generate(&vocab, &DatasetConfig::iid(task, 1, 5, 20, 2)).unwrap();
        let report = evaluate_with(&model, &data.test, &[], true).unwrap();
        assert_eq!(report.accuracy(), 1.0);
        assert_eq!(report.tf_accuracy(), 1.0);
        assert_eq!(report.peak1(), 1.0);
        assert_eq!(report.peak2(), 1.0);
        for l in 1..=5 {
            assert_eq!(report.accuracy_at(l), Some(1.0));
        }
    }

    #[test]
    fn random_init_is_near_zero_exact_match() {
        let mut cfg = ModelConfig::new(16, 32, ModelConfig::positions_for(8));
        cfg.mlp_hidden = 64;
        let data = parity_data(8, 64, 11);
        for seed in 0..3 {
            let model = Model::init(cfg.clone(), seed).unwrap();
            assert!(evaluate(&model, &data.test).unwrap().accuracy() <= 0.05);
        }
    }

    #[test]
    fn teacher_forced_verdict_matches_greedy_decoding() {
        // Half-trained models make mistakes at varied positions.
        let vocab = Vocab::standard();
        let data = parity_data(4, 24, 21);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for seed in 0..3 {
            let epochs = rng.gen_range(2..8);
            let out = train(tiny_model(seed), &data, &quick_cfg(epochs)).unwrap();
            let report = evaluate(&out.model, &data.test).unwrap();
            let mut exact = 0;
            for seq in &data.test {
                let max_new = seq.completion().len();
                let decoded = out.model.greedy_decode(seq.prompt(), max_new, vocab.eos(), &[]).unwrap();
                exact += usize::from(decoded == seq.tokens);
            }
            assert_eq!(report.per_length.values().map(|s| s.exact).sum::<usize>(), exact);
        }
    }

    #[test]
    fn final_only_layout_scores_the_single_state() {
        let vocab = Vocab::standard();
        let mut dcfg = DatasetConfig::iid(TaskSpec::parity(), 1, 4, 8, 1);
        dcfg.layout = Layout::FinalOnly;
        let data = generate(&vocab, &dcfg).unwrap();
        let report = evaluate_with(&tiny_model(0), &data.test, &[], true).unwrap();
        assert!(report.patterns.is_empty());
        assert!(report.peak1().is_nan());
        assert_eq!(report.per_length.values().map(|s| s.tf_total).sum::<usize>(), data.test.len());
    }

    #[test]
    fn transfer_to_same_data_keeps_accuracy_at_switch() {
        let vocab = Vocab::standard();
        let data = parity_data(3, 16, 8);
        let out = transfer(
            tiny_model(5),
            (&vocab, &data, &quick_cfg(4)),
            (&vocab, &data, &quick_cfg(2)),
            &mut |_, _| {},
        )
        .unwrap();
        assert_eq!(out.switch_epoch, 4);
        assert!(out.second.rows[0].acc_overall >= out.first.last().unwrap().acc_overall);
        let other = Vocab::new(11, vec!["parity".into()]);
        assert!(transfer(
            tiny_model(5),
            (&vocab, &data, &quick_cfg(1)),
            (&other, &data, &quick_cfg(1)),
            &mut |_, _| {}
        )
        .is_err());
    }

    #[test]
    fn csv_layout() {
        let data = parity_data(3, 4, 8);
        let out = train(tiny_model(5), &data, &quick_cfg(1)).unwrap();
        let mut csv = Vec::new();
        out.record.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# iterhead-runrecord/1"));
        assert_eq!(
            lines.next(),
            Some("epoch,loss,acc_overall,acc_L1,acc_L2,acc_L3,peak1,peak2,seconds,tf_acc")
        );
        assert_eq!(lines.count(), 2);
    }
}
