//! Auto-regressive transformer with attention capture, attention patching and
//! parameter freezing.
//!
//! Layers are numbered from 1 in every public interface (`layer1.*` parameter
//! names, [`PatchSpec::layer`], [`AttentionCapture::get`]); heads from 0.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::dataset::stream_rng;

pub const INIT_STD: f64 = 0.02;
pub const CHECKPOINT_MAGIC: &str = "iterhead-checkpoint/1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_positions = {max}")]
    Length { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid patch: {0}")]
    Patch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation `{other}` (gelu | relu)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "dims", rename_all = "snake_case")]
pub enum PositionalMode {
    Learned,
    /// Random position vectors that are never updated.
    FrozenRandom,
    /// Learned position vectors added to the first `k` coordinates only.
    Partial(usize),
}

impl fmt::Display for PositionalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PositionalMode::Learned => f.write_str("learned"),
            PositionalMode::FrozenRandom => f.write_str("frozen_random"),
            PositionalMode::Partial(k) => write!(f, "partial({k})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub max_positions: usize,
    /// Layer norm before attention, before the MLP and before the read-out.
    /// When off the blocks carry no normalization at all.
    pub pre_norm: bool,
    pub activation: Activation,
    pub positional: PositionalMode,
    pub tie_unembedding: bool,
}

impl ModelConfig {
    /// Two layers, one head, `4d` MLP, pre-norm, GELU, learned positions.
    pub fn new(vocab_size: usize, d: usize, max_positions: usize) -> Self {
        Self {
            vocab_size,
            d,
            n_layers: 2,
            n_heads: 1,
            mlp_hidden: 4 * d,
            max_positions,
            pre_norm: true,
            activation: Activation::Gelu,
            positional: PositionalMode::Learned,
            tie_unembedding: false,
        }
    }

    /// Position budget for sequences with up to `l_max` inputs in the CoT layout.
    pub fn positions_for(l_max: usize) -> usize {
        2 * l_max + 3
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 || self.d == 0 || self.n_layers == 0 || self.max_positions == 0 {
            return bad("vocab_size, d, n_layers and max_positions must be positive".into());
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!("d = {} not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive".into());
        }
        if let PositionalMode::Partial(k) = self.positional {
            if k == 0 || k > self.d {
                return bad(format!("partial position dims {k} not in 1..={}", self.d));
            }
        }
        Ok(())
    }

    /// Ordered parameter names and shapes.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, v) = (self.d, self.mlp_hidden, self.vocab_size);
        let mut out = vec![
            ("token_embedding".to_string(), vec![v, d]),
            ("position_embedding".to_string(), vec![self.max_positions, d]),
        ];
        for l in 1..=self.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            if self.pre_norm {
                out.push((p("norm1.gain"), vec![d]));
                out.push((p("norm1.bias"), vec![d]));
            }
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                out.push((p(w), vec![d, d]));
            }
            if self.pre_norm {
                out.push((p("norm2.gain"), vec![d]));
                out.push((p("norm2.bias"), vec![d]));
            }
            out.push((p("mlp_in.weight"), vec![d, h]));
            out.push((p("mlp_in.bias"), vec![h]));
            out.push((p("mlp_out.weight"), vec![h, d]));
            out.push((p("mlp_out.bias"), vec![d]));
        }
        if self.pre_norm {
            out.push(("final_norm.gain".into(), vec![d]));
            out.push(("final_norm.bias".into(), vec![d]));
        }
        if !self.tie_unembedding {
            out.push(("unembedding".into(), vec![d, v]));
        }
        out
    }

    /// Arrays that no optimizer may touch regardless of the freeze selector.
    pub fn always_frozen(&self, name: &str) -> bool {
        name == "position_embedding" && self.positional == PositionalMode::FrozenRandom
    }
}

/// Named dense arrays in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    /// Zero-filled arrays with the shapes of `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::from_entries(
            cfg.layout()
                .into_iter()
                .map(|(n, s)| {
                    let t = Tensor::zeros(&s);
                    (n, t)
                })
                .collect(),
        )
    }

    /// Weights and embeddings ~ N(0, 0.02^2), biases 0, norm gains 1. Each
    /// array draws from its own seeded stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut entries = Vec::new();
        for (i, (name, shape)) in cfg.layout().into_iter().enumerate() {
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let mut rng = stream_rng(seed, 0x1417, i as u64);
                let mut t = Tensor::randn(&shape, INIT_STD, &mut rng);
                if let (PositionalMode::Partial(k), "position_embedding") = (cfg.positional, name.as_str()) {
                    let d = shape[1];
                    for (j, v) in t.data_mut().iter_mut().enumerate() {
                        if j % d >= k {
                            *v = 0.0;
                        }
                    }
                }
                t
            };
            entries.push((name, t));
        }
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Shapes must follow `cfg.layout()` exactly.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = cfg.layout();
        if layout.len() != self.len() {
            return Err(ModelError::Config(format!(
                "expected {} arrays, found {}",
                layout.len(),
                self.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(self.iter()) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "array `{n}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `*` matches any run of characters; everything else is literal.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 {
            match rest.strip_prefix(part) {
                Some(r) => rest = r,
                None => return false,
            }
        } else if i == parts.len() - 1 {
            return rest.len() >= part.len() && rest.ends_with(part);
        } else {
            match rest.find(part) {
                Some(pos) => rest = &rest[pos + part.len()..],
                None => return false,
            }
        }
    }
    true
}

/// Which arrays the optimizer may update: those matched by at least one
/// pattern in `selector`. Patterns that match nothing, and patterns that name
/// an array the configuration keeps frozen, are rejected.
pub fn freeze_mask(cfg: &ModelConfig, params: &Params, selector: &[String]) -> Result<Vec<bool>> {
    let mut mask = vec![false; params.len()];
    for pattern in selector {
        let mut hit = false;
        for (i, name) in params.names().iter().enumerate() {
            if !glob_match(pattern, name) {
                continue;
            }
            if cfg.always_frozen(name) {
                if !pattern.contains('*') {
                    return Err(ModelError::Config(format!(
                        "`{name}` is frozen by positional mode {}",
                        cfg.positional
                    )));
                }
                continue;
            }
            mask[i] = true;
            hit = true;
        }
        if !hit {
            return Err(ModelError::Config(format!("freeze selector `{pattern}` matches no trainable array")));
        }
    }
    Ok(mask)
}

/// Row-stochastic causal attention maps per (layer, head) for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub n_layers: usize,
    pub n_heads: usize,
    maps: Vec<Tensor>,
}

impl AttentionCapture {
    /// `layer` counts from 1.
    pub fn get(&self, layer: usize, head: usize) -> Option<&Tensor> {
        if layer == 0 || layer > self.n_layers || head >= self.n_heads {
            return None;
        }
        self.maps.get((layer - 1) * self.n_heads + head)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &Tensor)> {
        let h = self.n_heads;
        self.maps.iter().enumerate().map(move |(i, t)| ((i / h + 1, i % h), t))
    }

    /// Writes one matrix as CSV rows (query index major).
    pub fn write_csv<W: Write>(&self, layer: usize, head: usize, mut out: W) -> std::io::Result<()> {
        let m = self
            .get(layer, head)
            .ok_or_else(|| std::io::Error::other(format!("no attention map for layer {layer} head {head}")))?;
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.9e}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdealPattern {
    /// Generation-region queries look at the end-of-input marker.
    First,
    /// The query at `L + t` looks at input position `t`.
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchMode {
    IdealFirst,
    IdealSecond,
    ZeroEoiFirst,
    ZeroPtSecond,
    Custom(Tensor),
}

impl FromStr for PatchMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ideal_first" => Ok(PatchMode::IdealFirst),
            "ideal_second" => Ok(PatchMode::IdealSecond),
            "zero_eoi_first" => Ok(PatchMode::ZeroEoiFirst),
            "zero_pt_second" => Ok(PatchMode::ZeroPtSecond),
            other => Err(format!(
                "unknown patch mode `{other}` (ideal_first | ideal_second | zero_eoi_first | zero_pt_second)"
            )),
        }
    }
}

/// An intervention on the softmax output of one head, built for sequences
/// with `input_len` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub layer: usize,
    pub head: usize,
    pub mode: PatchMode,
    pub input_len: usize,
}

impl PatchSpec {
    pub fn new(layer: usize, head: usize, mode: PatchMode, input_len: usize) -> Self {
        Self {
            layer,
            head,
            mode,
            input_len,
        }
    }

    fn check_target(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer == 0 || self.layer > cfg.n_layers || self.head >= cfg.n_heads {
            return Err(ModelError::Patch(format!(
                "no head {} in layer {} (model has {} layers x {} heads)",
                self.head, self.layer, cfg.n_layers, cfg.n_heads
            )));
        }
        Ok(())
    }

    /// Entries the zero modes remove, as a keep-mask over a `t x t` block.
    fn keep_mask(&self, t: usize) -> Option<Vec<bool>> {
        let l = self.input_len;
        let mut keep = vec![true; t * t];
        match self.mode {
            PatchMode::ZeroEoiFirst => {
                for q in (l + 1)..t {
                    keep[q * t + l + 1] = false;
                }
            }
            PatchMode::ZeroPtSecond => {
                for step in 1..=l {
                    let q = l + step;
                    if q < t {
                        keep[q * t + step] = false;
                    }
                }
            }
            _ => return None,
        }
        Some(keep)
    }

    fn replacement(&self, t: usize) -> Result<Option<Tensor>> {
        match &self.mode {
            PatchMode::IdealFirst => Ok(Some(ideal_attention(self.input_len, IdealPattern::First, t)?)),
            PatchMode::IdealSecond => Ok(Some(ideal_attention(self.input_len, IdealPattern::Second, t)?)),
            PatchMode::Custom(m) => {
                validate_attention_matrix(m, t)?;
                Ok(Some(m.clone()))
            }
            _ => Ok(None),
        }
    }
}

/// Checks that `m` is a `t x t` causal row-stochastic matrix.
pub fn validate_attention_matrix(m: &Tensor, t: usize) -> Result<()> {
    if m.shape() != [t, t] {
        return Err(ModelError::Patch(format!("custom matrix has shape {:?}, expected [{t}, {t}]", m.shape())));
    }
    for q in 0..t {
        let row = m.row(q);
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(ModelError::Patch(format!("row {q} has negative or non-finite entries")));
        }
        if row[q + 1..].iter().any(|&v| v != 0.0) {
            return Err(ModelError::Patch(format!("row {q} attends to future keys")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(ModelError::Patch(format!("row {q} sums to {s}")));
        }
    }
    Ok(())
}

/// The attention map an iteration head would produce for `input_len` inputs,
/// as a `t x t` matrix. Rows outside the pattern attend to themselves.
pub fn ideal_attention(input_len: usize, which: IdealPattern, t: usize) -> Result<Tensor> {
    let l = input_len;
    if t < l + 2 {
        return Err(ModelError::Patch(format!("{t} positions cannot hold {l} inputs and EoI")));
    }
    let mut m = Tensor::zeros(&[t, t]);
    let data = m.data_mut();
    for q in 0..t {
        let key = match which {
            IdealPattern::First if q > l => l + 1,
            IdealPattern::Second if q > l && q <= 2 * l => q - l,
            _ => q,
        };
        data[q * t + key] = 1.0;
    }
    Ok(m)
}

/// Handles for the parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Puts every array on the tape; `trainable[i]` decides whether gradients are
/// collected for array `i`.
pub fn bind(tape: &mut Tape, params: &Params, trainable: &[bool]) -> BoundParams {
    let vars = params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), trainable.get(i).copied().unwrap_or(false)))
        .collect();
    BoundParams { vars }
}

/// Output of a taped forward pass over a batch of equal-length sequences.
pub struct TapedForward {
    /// `[batch, seq, vocab]`
    pub logits: Var,
    /// `[batch, seq, seq]` per (layer, head), layer-major.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(cfg: ModelConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        params.check_against(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&cfg, seed)?;
        Self::new(cfg, params)
    }

    fn var(&self, bound: &BoundParams, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from a validated model"));
        bound.vars[idx]
    }

    /// Records the forward pass for `batch` (all the same length) on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &[&[u32]],
        patches: &[PatchSpec],
    ) -> Result<TapedForward> {
        let cfg = &self.cfg;
        let b = batch.len();
        let t = batch.first().map_or(0, |s| s.len());
        if b == 0 || t == 0 {
            return Err(ModelError::Config("empty batch".into()));
        }
        if let Some(s) = batch.iter().find(|s| s.len() != t) {
            return Err(ModelError::Config(format!(
                "batch mixes lengths {t} and {}",
                s.len()
            )));
        }
        if t > cfg.max_positions {
            return Err(ModelError::Length {
                len: t,
                max: cfg.max_positions,
            });
        }
        for p in patches {
            p.check_target(cfg)?;
        }
        let (d, nh, dh) = (cfg.d, cfg.n_heads, cfg.head_dim());

        let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&x| x as usize)).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok = tape.embedding(self.var(bound, "token_embedding"), &ids)?;
        let mut pos = tape.embedding(self.var(bound, "position_embedding"), &positions)?;
        if let PositionalMode::Partial(k) = cfg.positional {
            let mask = Tensor::new(vec![d], (0..d).map(|j| if j < k { 1.0 } else { 0.0 }).collect())?;
            let mask = tape.constant(mask);
            pos = tape.mul(pos, mask)?;
        }
        let x0 = tape.add(tok, pos)?;
        let mut x = tape.reshape(x0, &[b, t, d])?;

        let norm = |tape: &mut Tape, x: Var, prefix: &str| -> Result<Var> {
            if cfg.pre_norm {
                let g = self.var(bound, &format!("{prefix}.gain"));
                let bias = self.var(bound, &format!("{prefix}.bias"));
                Ok(tape.layer_norm(x, g, bias, LAYER_NORM_EPS)?)
            } else {
                Ok(x)
            }
        };

        let mut attention = Vec::with_capacity(cfg.n_layers * nh);
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in 1..=cfg.n_layers {
            let p = |s: &str| format!("layer{layer}.{s}");
            let h = norm(tape, x, &p("norm1"))?;
            let q = tape.matmul(h, self.var(bound, &p("attn.wq")))?;
            let k = tape.matmul(h, self.var(bound, &p("attn.wk")))?;
            let v = tape.matmul(h, self.var(bound, &p("attn.wv")))?;
            let mut heads = Vec::with_capacity(nh);
            for head in 0..nh {
                let (qh, kh, vh) = if nh == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, head * dh, dh)?,
                        tape.slice_cols(k, head * dh, dh)?,
                        tape.slice_cols(v, head * dh, dh)?,
                    )
                };
                let raw = tape.bmm(qh, kh, true)?;
                let scores = tape.scale(raw, scale);
                let mut att = tape.causal_softmax(scores)?;
                for patch in patches.iter().filter(|p| p.layer == layer && p.head == head) {
                    if let Some(keep) = patch.keep_mask(t) {
                        att = tape.mask_renormalize(att, &keep)?;
                    } else if let Some(m) = patch.replacement(t)? {
                        let mut tiled = Vec::with_capacity(b * t * t);
                        for _ in 0..b {
                            tiled.extend_from_slice(m.data());
                        }
                        att = tape.constant(Tensor::new(vec![b, t, t], tiled)?);
                    }
                }
                attention.push(att);
                heads.push(tape.bmm(att, vh, false)?);
            }
            let merged = if nh == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let out = tape.matmul(merged, self.var(bound, &p("attn.wo")))?;
            x = tape.add(x, out)?;

            let h = norm(tape, x, &p("norm2"))?;
            let pre = tape.matmul(h, self.var(bound, &p("mlp_in.weight")))?;
            let pre = tape.add(pre, self.var(bound, &p("mlp_in.bias")))?;
            let act = match cfg.activation {
                Activation::Gelu => tape.gelu(pre),
                Activation::Relu => tape.relu(pre),
            };
            let out = tape.matmul(act, self.var(bound, &p("mlp_out.weight")))?;
            let out = tape.add(out, self.var(bound, &p("mlp_out.bias")))?;
            x = tape.add(x, out)?;
        }
        let h = norm(tape, x, "final_norm")?;
        let unembed = if cfg.tie_unembedding {
            tape.transpose(self.var(bound, "token_embedding"))?
        } else {
            self.var(bound, "unembedding")
        };
        let logits = tape.matmul(h, unembed)?;
        Ok(TapedForward { logits, attention })
    }

    /// Inference over a batch of equal-length sequences. Returns logits
    /// `[batch, seq, vocab]` and, if asked, the attention maps per
    /// (layer, head), each `[batch, seq, seq]`.
    pub fn forward_batch(
        &self,
        batch: &[&[u32]],
        capture: bool,
        patches: &[PatchSpec],
    ) -> Result<(Tensor, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.params, &[]);
        let out = self.forward_on_tape(&mut tape, &bound, batch, patches)?;
        let attention = capture.then(|| out.attention.iter().map(|&v| tape.value(v).clone()).collect());
        Ok((tape.value(out.logits).clone(), attention))
    }

    /// Logits `[seq, vocab]` for a single sequence, plus its attention maps.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture: bool,
        patches: &[PatchSpec],
    ) -> Result<(Tensor, Option<AttentionCapture>)> {
        let (logits, maps) = self.forward_batch(&[tokens], capture, patches)?;
        let t = tokens.len();
        let logits = logits.reshaped(vec![t, self.cfg.vocab_size])?;
        let capture = match maps {
            Some(maps) => Some(AttentionCapture {
                n_layers: self.cfg.n_layers,
                n_heads: self.cfg.n_heads,
                maps: maps
                    .into_iter()
                    .map(|m| m.reshaped(vec![t, t]))
                    .collect::<std::result::Result<_, _>>()?,
            }),
            None => None,
        };
        Ok((logits, capture))
    }

    /// Appends arg-max tokens (lowest id on ties) until `stop` is produced or
    /// `max_new` tokens have been added.
    pub fn greedy_decode(&self, prompt: &[u32], max_new: usize, stop: u32, patches: &[PatchSpec]) -> Result<Vec<u32>> {
        let mut tokens = prompt.to_vec();
        for _ in 0..max_new {
            let (logits, _) = self.forward(&tokens, false, patches)?;
            let next = argmax(logits.row(tokens.len() - 1)) as u32;
            tokens.push(next);
            if next == stop {
                break;
            }
        }
        Ok(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            arrays: self
                .params
                .iter()
                .map(|(n, t)| ArrayEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = toml::to_string(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut bytes = format!("{CHECKPOINT_MAGIC} {}\n", text.len()).into_bytes();
        bytes.extend_from_slice(text.as_bytes());
        for t in self.params.tensors() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ModelError::Checkpoint("missing header line".into()))?;
        let first = std::str::from_utf8(&bytes[..nl]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut parts = first.split(' ');
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(ModelError::Checkpoint(format!("not a checkpoint: `{first}`")));
        }
        let len: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ModelError::Checkpoint("bad header length".into()))?;
        let body = &bytes[nl + 1..];
        if body.len() < len {
            return Err(ModelError::Checkpoint("truncated header".into()));
        }
        let text = std::str::from_utf8(&body[..len]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let header: CheckpointHeader = toml::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut raw = body[len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut entries = Vec::with_capacity(header.arrays.len());
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let data: Vec<f64> = raw.by_ref().take(n).collect();
            if data.len() != n {
                return Err(ModelError::Checkpoint(format!("truncated data for `{}`", a.name)));
            }
            entries.push((a.name.clone(), Tensor::new(a.shape.clone(), data)?));
        }
        if raw.next().is_some() {
            return Err(ModelError::Checkpoint("trailing data".into()));
        }
        Self::new(header.config, Params::from_entries(entries))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
