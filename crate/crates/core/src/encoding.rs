//! Token layout: `[Problem] x_1 .. x_L EoI s_1 .. s_L EoS`, 0-indexed, so the
//! end-of-input marker always sits at index `L + 1`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::{TaskError, TaskSpec};

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("unknown problem token for task `{0}`")]
    UnknownProblem(String),
    #[error("vocabulary holds {vocab} value tokens but the task needs {needed}")]
    VocabTooSmall { vocab: u32, needed: u32 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token ids: values `0..V`, then one problem token per task name, then EoI
/// and EoS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub value_tokens: u32,
    pub problems: Vec<String>,
}

impl Vocab {
    pub fn new(value_tokens: u32, problems: Vec<String>) -> Self {
        Self {
            value_tokens,
            problems,
        }
    }

    /// Eleven value tokens (enough for `F_11` and binary tasks) and one
    /// problem token for each of `copy`, `parity` and `poly`.
    pub fn standard() -> Self {
        Self::new(11, vec!["copy".into(), "parity".into(), "poly".into()])
    }

    pub fn problem_token(&self, name: &str) -> Option<u32> {
        self.problems
            .iter()
            .position(|p| p == name)
            .map(|i| self.value_tokens + i as u32)
    }

    pub fn eoi(&self) -> u32 {
        self.value_tokens + self.problems.len() as u32
    }

    pub fn eos(&self) -> u32 {
        self.eoi() + 1
    }

    pub fn total_size(&self) -> usize {
        self.eos() as usize + 1
    }

    pub fn is_value(&self, token: u32) -> bool {
        token < self.value_tokens
    }

    pub fn check_task(&self, task: &TaskSpec) -> Result<u32, EncodingError> {
        let needed = task.input_alphabet_size.max(task.state_alphabet_size);
        if needed > self.value_tokens {
            return Err(EncodingError::VocabTooSmall {
                vocab: self.value_tokens,
                needed,
            });
        }
        self.problem_token(&task.name)
            .ok_or_else(|| EncodingError::UnknownProblem(task.name.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Every intermediate state is written out.
    Cot,
    /// Only the final state follows EoI.
    FinalOnly,
}

impl Layout {
    pub fn seq_len(self, input_len: usize) -> usize {
        match self {
            Layout::Cot => 2 * input_len + 3,
            Layout::FinalOnly => input_len + 4,
        }
    }

    /// Number of state tokens between EoI and EoS.
    pub fn answer_len(self, input_len: usize) -> usize {
        match self {
            Layout::Cot => input_len,
            Layout::FinalOnly => 1,
        }
    }

    fn input_len_from(self, seq_len: usize) -> Option<usize> {
        match self {
            Layout::Cot if seq_len >= 5 && (seq_len - 3) % 2 == 0 => Some((seq_len - 3) / 2),
            Layout::FinalOnly if seq_len >= 5 => Some(seq_len - 4),
            _ => None,
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Cot => "cot",
            Layout::FinalOnly => "final_only",
        })
    }
}

impl FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cot" => Ok(Layout::Cot),
            "final_only" => Ok(Layout::FinalOnly),
            other => Err(format!("unknown layout `{other}` (cot | final_only)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    All,
    CompletionOnly,
}

impl FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(LossMode::All),
            "completion_only" => Ok(LossMode::CompletionOnly),
            other => Err(format!("unknown loss mode `{other}` (all | completion_only)")),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::All => "all",
            LossMode::CompletionOnly => "completion_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedSequence {
    pub tokens: Vec<u32>,
    pub input_len: usize,
    pub eoi_index: usize,
    pub layout: Layout,
}

impl EncodedSequence {
    /// Problem token, inputs and EoI.
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..=self.eoi_index]
    }

    pub fn inputs(&self) -> &[u32] {
        &self.tokens[1..=self.input_len]
    }

    /// Everything generated after EoI, including EoS.
    pub fn completion(&self) -> &[u32] {
        &self.tokens[self.eoi_index + 1..]
    }

    /// Rebuilds the bookkeeping for a token list read back from disk.
    pub fn from_tokens(tokens: Vec<u32>, layout: Layout) -> Option<Self> {
        let input_len = layout.input_len_from(tokens.len())?;
        Some(Self {
            tokens,
            input_len,
            eoi_index: input_len + 1,
            layout,
        })
    }
}

pub fn encode(
    vocab: &Vocab,
    task: &TaskSpec,
    xs: &[u32],
    layout: Layout,
) -> Result<EncodedSequence, EncodingError> {
    let problem = vocab.check_task(task)?;
    let states = task.unroll(xs)?;
    let l = xs.len();
    let mut tokens = Vec::with_capacity(layout.seq_len(l));
    tokens.push(problem);
    tokens.extend_from_slice(xs);
    tokens.push(vocab.eoi());
    match layout {
        Layout::Cot => tokens.extend_from_slice(&states),
        Layout::FinalOnly => tokens.push(states[l - 1]),
    }
    tokens.push(vocab.eos());
    Ok(EncodedSequence {
        tokens,
        input_len: l,
        eoi_index: l + 1,
        layout,
    })
}

/// Flags over next-token predictions: entry `i` covers predicting token
/// `i + 1` from the prefix ending at `i`.
pub fn loss_mask(seq: &EncodedSequence, mode: LossMode) -> Vec<bool> {
    let n = seq.tokens.len() - 1;
    match mode {
        LossMode::All => vec![true; n],
        LossMode::CompletionOnly => (0..n).map(|i| i + 1 > seq.eoi_index).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    States(Vec<u32>),
    Malformed(String),
}

impl Decoded {
    pub fn states(&self) -> Option<&[u32]> {
        match self {
            Decoded::States(s) => Some(s),
            Decoded::Malformed(_) => None,
        }
    }
}

/// Extracts the states between EoI and EoS of a generated sequence whose
/// prompt holds `input_len` inputs. Anything off-layout is reported as
/// malformed rather than as an error.
pub fn decode_states(vocab: &Vocab, tokens: &[u32], input_len: usize, layout: Layout) -> Decoded {
    let eoi_index = input_len + 1;
    if tokens.get(eoi_index) != Some(&vocab.eoi()) {
        return Decoded::Malformed(format!("no EoI at index {eoi_index}"));
    }
    let rest = &tokens[eoi_index + 1..];
    let Some(end) = rest.iter().position(|&t| t == vocab.eos()) else {
        return Decoded::Malformed("missing EoS".into());
    };
    if end + 1 != rest.len() {
        return Decoded::Malformed("tokens after EoS".into());
    }
    let body = &rest[..end];
    if let Some(bad) = body.iter().find(|&&t| !vocab.is_value(t)) {
        return Decoded::Malformed(format!("non-value token {bad} before EoS"));
    }
    let expected = layout.answer_len(input_len);
    if body.len() != expected {
        return Decoded::Malformed(format!("{} states, expected {expected}", body.len()));
    }
    Decoded::States(body.to_vec())
}

/// One sequence per line, token ids separated by single spaces.
pub fn write_sequences<W: Write>(mut out: W, seqs: &[EncodedSequence]) -> std::io::Result<()> {
    for s in seqs {
        let line: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_sequences<R: BufRead>(input: R, layout: Layout) -> Result<Vec<EncodedSequence>, EncodingError> {
    let mut seqs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tokens = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EncodingError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let n = tokens.len();
        let seq = EncodedSequence::from_tokens(tokens, layout).ok_or_else(|| EncodingError::Parse {
            line: i + 1,
            msg: format!("length {n} does not fit the {layout} layout"),
        })?;
        seqs.push(seq);
    }
    Ok(seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::standard()
    }

    #[test]
    fn vocab_ids_are_contiguous() {
        let v = vocab();
        assert_eq!(v.problem_token("copy"), Some(11));
        assert_eq!(v.problem_token("poly"), Some(13));
        assert_eq!((v.eoi(), v.eos(), v.total_size()), (14, 15, 16));
    }

    #[test]
    fn encode_examples() {
        let v = vocab();
        let (eoi, eos) = (v.eoi(), v.eos());
        let parity = encode(&v, &TaskSpec::parity(), &[1, 0], Layout::Cot).unwrap();
        assert_eq!(parity.tokens, vec![12, 1, 0, eoi, 1, 1, eos]);
        assert_eq!(parity.eoi_index, 3);
        let copy = encode(&v, &TaskSpec::copy(), &[0], Layout::Cot).unwrap();
        assert_eq!(copy.tokens, vec![11, 0, eoi, 0, eos]);
        let poly = encode(&v, &TaskSpec::xy_plus_one(11).unwrap(), &[3, 4], Layout::FinalOnly).unwrap();
        assert_eq!(poly.tokens, vec![13, 3, 4, eoi, 5, eos]);
        assert_eq!(poly.eoi_index, 3);
    }

    #[test]
    fn encode_rejects_small_vocab() {
        let v = Vocab::new(2, vec!["poly".into()]);
        let err = encode(&v, &TaskSpec::xy_plus_one(11).unwrap(), &[1], Layout::Cot).unwrap_err();
        assert!(matches!(err, EncodingError::VocabTooSmall { .. }));
    }

    #[test]
    fn loss_mask_counts() {
        let v = vocab();
        let cot = encode(&v, &TaskSpec::parity(), &[1, 0], Layout::Cot).unwrap();
        let count = |m: Vec<bool>| m.into_iter().filter(|&b| b).count();
        assert_eq!(count(loss_mask(&cot, LossMode::CompletionOnly)), 3);
        assert_eq!(count(loss_mask(&cot, LossMode::All)), 6);
        let fin = encode(&v, &TaskSpec::parity(), &[1, 0], Layout::FinalOnly).unwrap();
        assert_eq!(count(loss_mask(&fin, LossMode::CompletionOnly)), 2);
    }

    #[test]
    fn decode_examples() {
        let v = vocab();
        let (eoi, eos) = (v.eoi(), v.eos());
        assert_eq!(
            decode_states(&v, &[12, 1, 0, eoi, 1, 1, eos], 2, Layout::Cot),
            Decoded::States(vec![1, 1])
        );
        assert!(matches!(
            decode_states(&v, &[12, 1, 0, eoi, 1, eos], 2, Layout::Cot),
            Decoded::Malformed(_)
        ));
        assert!(matches!(
            decode_states(&v, &[12, 1, 0, eoi, 1, 1, 1, eos], 2, Layout::Cot),
            Decoded::Malformed(_)
        ));
        assert!(matches!(
            decode_states(&v, &[12, 1, 0, eoi, 1, 1], 2, Layout::Cot),
            Decoded::Malformed(_)
        ));
        assert!(matches!(
            decode_states(&v, &[12, 1, 0, eoi, 1, eoi, eos], 2, Layout::Cot),
            Decoded::Malformed(_)
        ));
    }

    #[test]
    fn round_trip_is_exhaustive_for_short_binary_inputs() {
        let v = vocab();
        for task in [TaskSpec::parity(), TaskSpec::copy()] {
            for len in 1..=8usize {
                for bits in 0..(1u32 << len) {
                    let xs: Vec<u32> = (0..len).map(|i| (bits >> i) & 1).collect();
                    let seq = encode(&v, &task, &xs, Layout::Cot).unwrap();
                    assert_eq!(seq.tokens.len(), 2 * len + 3);
                    assert_eq!(seq.eoi_index, len + 1);
                    let decoded = decode_states(&v, &seq.tokens, len, Layout::Cot);
                    assert_eq!(decoded.states().unwrap(), task.unroll(&xs).unwrap().as_slice());
                }
            }
        }
    }

    #[test]
    fn token_file_round_trip() {
        let v = vocab();
        let seqs: Vec<_> = [vec![1, 0, 1], vec![0]]
            .iter()
            .map(|xs| encode(&v, &TaskSpec::parity(), xs, Layout::Cot).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_sequences(&mut buf, &seqs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().next(), Some("12 1 0 1 14 1 1 0 15"));
        let back = read_sequences(buf.as_slice(), Layout::Cot).unwrap();
        assert_eq!(back, seqs);
        assert!(read_sequences("1 2 3 4".as_bytes(), Layout::Cot).is_err());
    }
}
