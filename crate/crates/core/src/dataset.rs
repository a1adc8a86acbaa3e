//! Train/test corpora for the iterative tasks, and their on-disk form
//! (`train.toks`, `test.toks`, `header.meta`).

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{self, EncodedSequence, EncodingError, Layout, Vocab};
use crate::tasks::TaskSpec;

/// Upper bound on the number of sequences an exhaustive scheme may enumerate.
pub const MAX_ENUMERATION: u64 = 1 << 24;

pub const HEADER_FORMAT: &str = "iterhead-dataset/1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Independent uniform draws per split and length; splits may overlap.
    IidUniform,
    /// Every sequence of every length, shuffled, then halved.
    ExhaustiveSplit,
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iid_uniform" => Ok(Scheme::IidUniform),
            "exhaustive_split" => Ok(Scheme::ExhaustiveSplit),
            other => Err(format!("unknown scheme `{other}` (iid_uniform | exhaustive_split)")),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::IidUniform => "iid_uniform",
            Scheme::ExhaustiveSplit => "exhaustive_split",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub task: TaskSpec,
    pub l_min: usize,
    pub l_max: usize,
    pub n_per_length: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub layout: Layout,
}

impl DatasetConfig {
    pub fn iid(task: TaskSpec, l_min: usize, l_max: usize, n_per_length: usize, seed: u64) -> Self {
        Self {
            task,
            l_min,
            l_max,
            n_per_length,
            seed,
            scheme: Scheme::IidUniform,
            layout: Layout::Cot,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.l_min == 0 || self.l_min > self.l_max {
            return Err(DatasetError::Config(format!(
                "need 1 <= l_min <= l_max, got {}..{}",
                self.l_min, self.l_max
            )));
        }
        if self.n_per_length == 0 && self.scheme == Scheme::IidUniform {
            return Err(DatasetError::Config("n_per_length must be >= 1".into()));
        }
        if self.scheme == Scheme::ExhaustiveSplit {
            let k = u64::from(self.task.input_alphabet_size);
            let mut total: u64 = 0;
            for l in self.l_min..=self.l_max {
                let count = u32::try_from(l)
                    .ok()
                    .and_then(|l| k.checked_pow(l))
                    .filter(|&c| c <= MAX_ENUMERATION);
                total = count
                    .and_then(|c| total.checked_add(c))
                    .filter(|&t| t <= MAX_ENUMERATION)
                    .ok_or_else(|| {
                        DatasetError::Config(format!(
                            "enumerating lengths {}..={} over {k} symbols exceeds {MAX_ENUMERATION} sequences",
                            self.l_min, self.l_max
                        ))
                    })?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<EncodedSequence>,
    pub test: Vec<EncodedSequence>,
}

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// A ChaCha8 stream keyed by (seed, purpose, index): identical on every
/// platform and independent of generation order.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | (index & 0xffff_ffff));
    rng
}

pub fn generate(vocab: &Vocab, cfg: &DatasetConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    vocab.check_task(&cfg.task)?;
    let k = cfg.task.input_alphabet_size;
    match cfg.scheme {
        Scheme::IidUniform => {
            let draw = |purpose: u64| -> Result<Vec<EncodedSequence>, DatasetError> {
                let mut out = Vec::with_capacity((cfg.l_max - cfg.l_min + 1) * cfg.n_per_length);
                for l in cfg.l_min..=cfg.l_max {
                    let mut rng = stream_rng(cfg.seed, purpose, l as u64);
                    for _ in 0..cfg.n_per_length {
                        let xs: Vec<u32> = (0..l).map(|_| rng.gen_range(0..k)).collect();
                        out.push(encoding::encode(vocab, &cfg.task, &xs, cfg.layout)?);
                    }
                }
                Ok(out)
            };
            Ok(Dataset {
                train: draw(TRAIN_STREAM)?,
                test: draw(TEST_STREAM)?,
            })
        }
        Scheme::ExhaustiveSplit => {
            let mut all = Vec::new();
            for l in cfg.l_min..=cfg.l_max {
                let count = u64::from(k).pow(l as u32);
                for code in 0..count {
                    let mut rest = code;
                    let xs: Vec<u32> = (0..l)
                        .map(|_| {
                            let x = (rest % u64::from(k)) as u32;
                            rest /= u64::from(k);
                            x
                        })
                        .collect();
                    all.push(encoding::encode(vocab, &cfg.task, &xs, cfg.layout)?);
                }
            }
            all.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM, 0));
            let test = all.split_off(all.len() / 2);
            Ok(Dataset { train: all, test })
        }
    }
}

/// Fraction of `test` sequences whose tokens also occur in `train`.
pub fn collision_rate(train: &[EncodedSequence], test: &[EncodedSequence]) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let seen: HashSet<&[u32]> = train.iter().map(|s| s.tokens.as_slice()).collect();
    let hits = test.iter().filter(|s| seen.contains(s.tokens.as_slice())).count();
    hits as f64 / test.len() as f64
}

/// Contents of `header.meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub vocab: VocabLayout,
    pub data: DatasetConfig,
    pub n_train: usize,
    pub n_test: usize,
}

/// Vocabulary as written to disk, with the derived ids spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub value_tokens: u32,
    pub problems: Vec<String>,
    pub eoi: u32,
    pub eos: u32,
    pub total_size: usize,
}

impl From<&Vocab> for VocabLayout {
    fn from(v: &Vocab) -> Self {
        Self {
            value_tokens: v.value_tokens,
            problems: v.problems.clone(),
            eoi: v.eoi(),
            eos: v.eos(),
            total_size: v.total_size(),
        }
    }
}

impl VocabLayout {
    pub fn to_vocab(&self) -> Result<Vocab, DatasetError> {
        let v = Vocab::new(self.value_tokens, self.problems.clone());
        if v.eoi() != self.eoi || v.eos() != self.eos || v.total_size() != self.total_size {
            return Err(DatasetError::Header("vocab ids are inconsistent".into()));
        }
        Ok(v)
    }
}

pub fn save(dir: &Path, vocab: &Vocab, cfg: &DatasetConfig, data: &Dataset) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    encoding::write_sequences(BufWriter::new(File::create(dir.join("train.toks"))?), &data.train)?;
    encoding::write_sequences(BufWriter::new(File::create(dir.join("test.toks"))?), &data.test)?;
    let header = DatasetHeader {
        format: HEADER_FORMAT.into(),
        vocab: vocab.into(),
        data: cfg.clone(),
        n_train: data.train.len(),
        n_test: data.test.len(),
    };
    let text = toml::to_string(&header).map_err(|e| DatasetError::Header(e.to_string()))?;
    fs::write(dir.join("header.meta"), text)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(Vocab, DatasetHeader, Dataset), DatasetError> {
    let text = fs::read_to_string(dir.join("header.meta"))?;
    let header: DatasetHeader = toml::from_str(&text).map_err(|e| DatasetError::Header(e.to_string()))?;
    if header.format != HEADER_FORMAT {
        return Err(DatasetError::Header(format!("unsupported format `{}`", header.format)));
    }
    let vocab = header.vocab.to_vocab()?;
    let layout = header.data.layout;
    let read = |name: &str| -> Result<Vec<EncodedSequence>, DatasetError> {
        Ok(encoding::read_sequences(BufReader::new(File::open(dir.join(name))?), layout)?)
    };
    let data = Dataset {
        train: read("train.toks")?,
        test: read("test.toks")?,
    };
    if data.train.len() != header.n_train || data.test.len() != header.n_test {
        return Err(DatasetError::Header("sequence counts disagree with header".into()));
    }
    Ok((vocab, header, data))
}
