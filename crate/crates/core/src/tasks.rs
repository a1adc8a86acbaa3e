//! Iterative tasks: an initial state folded over an input sequence with a
//! successor rule. These functions are also the label oracle for every
//! dataset and every evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Alphabets are checked exhaustively for closure, so they stay small.
pub const MAX_ALPHABET: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("{what} value {value} outside alphabet of size {size}")]
    OutOfAlphabet {
        what: &'static str,
        value: u32,
        size: u32,
    },
    #[error("input sequence is empty")]
    EmptySequence,
    #[error("invalid task: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// `F(s, x) = x`
    Copy,
    /// `F(s, x) = s + x mod p`
    Parity,
    /// `F(s, x) = sum_ij c[i][j] s^i x^j mod p`
    Polynomial { coeffs: Vec<Vec<u32>> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub input_alphabet_size: u32,
    pub state_alphabet_size: u32,
    pub init_state: u32,
    pub modulus: u32,
    pub rule: Rule,
}

fn is_prime(p: u32) -> bool {
    p >= 2 && (2..).take_while(|d| d * d <= p).all(|d| p % d != 0)
}

impl TaskSpec {
    /// Binary copy: the state is the last input.
    pub fn copy() -> Self {
        Self::copy_over(2).expect("binary copy is valid")
    }

    pub fn copy_over(alphabet: u32) -> Result<Self, TaskError> {
        Self {
            name: "copy".into(),
            input_alphabet_size: alphabet,
            state_alphabet_size: alphabet,
            init_state: 0,
            modulus: alphabet,
            rule: Rule::Copy,
        }
        .validated()
    }

    /// Running parity of a bit string.
    pub fn parity() -> Self {
        Self {
            name: "parity".into(),
            input_alphabet_size: 2,
            state_alphabet_size: 2,
            init_state: 0,
            modulus: 2,
            rule: Rule::Parity,
        }
        .validated()
        .expect("parity is valid")
    }

    /// Polynomial iteration in `F_p` with `coeffs[i][j]` multiplying `S^i X^j`.
    pub fn polynomial(p: u32, coeffs: Vec<Vec<u32>>) -> Result<Self, TaskError> {
        Self {
            name: "poly".into(),
            input_alphabet_size: p,
            state_alphabet_size: p,
            init_state: 0,
            modulus: p,
            rule: Rule::Polynomial { coeffs },
        }
        .validated()
    }

    /// `P(S, X) = S X + 1` over `F_p`.
    pub fn xy_plus_one(p: u32) -> Result<Self, TaskError> {
        Self::polynomial(p, vec![vec![1, 0], vec![0, 1]])
    }

    /// Builds a polynomial task from a row-major square coefficient list.
    pub fn polynomial_from_row_major(p: u32, flat: &[u32]) -> Result<Self, TaskError> {
        let n = (flat.len() as f64).sqrt().round() as usize;
        if n == 0 || n * n != flat.len() {
            return Err(TaskError::Invalid(format!(
                "coefficient list of length {} is not a square grid",
                flat.len()
            )));
        }
        Self::polynomial(p, flat.chunks(n).map(<[u32]>::to_vec).collect())
    }

    /// Row-major flattening of the coefficient grid (empty for other rules).
    pub fn coeffs_row_major(&self) -> Vec<u32> {
        match &self.rule {
            Rule::Polynomial { coeffs } => {
                let n = coeffs.iter().map(Vec::len).max().unwrap_or(0).max(coeffs.len());
                let mut flat = vec![0; n * n];
                for (i, row) in coeffs.iter().enumerate() {
                    for (j, &c) in row.iter().enumerate() {
                        flat[i * n + j] = c;
                    }
                }
                flat
            }
            _ => Vec::new(),
        }
    }

    /// Checks every invariant, including closure of the successor rule over
    /// the full alphabet product.
    pub fn validated(self) -> Result<Self, TaskError> {
        let invalid = |m: String| Err(TaskError::Invalid(m));
        if self.input_alphabet_size == 0 || self.state_alphabet_size == 0 {
            return invalid("alphabets must be non-empty".into());
        }
        if self.input_alphabet_size > MAX_ALPHABET || self.state_alphabet_size > MAX_ALPHABET {
            return invalid(format!("alphabets are limited to {MAX_ALPHABET} symbols"));
        }
        if self.init_state >= self.state_alphabet_size {
            return invalid(format!(
                "init state {} not below state alphabet size {}",
                self.init_state, self.state_alphabet_size
            ));
        }
        match &self.rule {
            Rule::Copy => {}
            Rule::Parity => {
                if !is_prime(self.modulus) {
                    return invalid(format!("modulus {} is not prime", self.modulus));
                }
            }
            Rule::Polynomial { coeffs } => {
                if !is_prime(self.modulus) {
                    return invalid(format!("modulus {} is not prime", self.modulus));
                }
                if self.input_alphabet_size != self.modulus || self.state_alphabet_size != self.modulus {
                    return invalid("polynomial alphabets must both equal p".into());
                }
                if coeffs.is_empty() {
                    return invalid("empty coefficient grid".into());
                }
                if let Some(c) = coeffs.iter().flatten().find(|&&c| c >= self.modulus) {
                    return invalid(format!("coefficient {c} not in [0, {})", self.modulus));
                }
            }
        }
        for s in 0..self.state_alphabet_size {
            for x in 0..self.input_alphabet_size {
                let next = self.apply(s, x);
                if next >= self.state_alphabet_size {
                    return invalid(format!("F({s}, {x}) = {next} leaves the state alphabet"));
                }
            }
        }
        Ok(self)
    }

    fn apply(&self, s: u32, x: u32) -> u32 {
        let p = u64::from(self.modulus);
        match &self.rule {
            Rule::Copy => x,
            Rule::Parity => ((u64::from(s) + u64::from(x)) % p) as u32,
            Rule::Polynomial { coeffs } => {
                let (s, x) = (u64::from(s) % p, u64::from(x) % p);
                let mut acc = 0u64;
                let mut s_pow = 1u64;
                for row in coeffs {
                    let mut x_pow = 1u64;
                    for &c in row {
                        acc = (acc + u64::from(c) * s_pow % p * x_pow) % p;
                        x_pow = x_pow * x % p;
                    }
                    s_pow = s_pow * s % p;
                }
                acc as u32
            }
        }
    }

    /// One application of the successor rule.
    pub fn step(&self, s: u32, x: u32) -> Result<u32, TaskError> {
        if s >= self.state_alphabet_size {
            return Err(TaskError::OutOfAlphabet {
                what: "state",
                value: s,
                size: self.state_alphabet_size,
            });
        }
        self.check_input(x)?;
        Ok(self.apply(s, x))
    }

    fn check_input(&self, x: u32) -> Result<(), TaskError> {
        if x >= self.input_alphabet_size {
            return Err(TaskError::OutOfAlphabet {
                what: "input",
                value: x,
                size: self.input_alphabet_size,
            });
        }
        Ok(())
    }

    /// States `s_1..s_L` with `s_0 = init` and `s_t = F(s_{t-1}, x_t)`.
    pub fn unroll(&self, xs: &[u32]) -> Result<Vec<u32>, TaskError> {
        if xs.is_empty() {
            return Err(TaskError::EmptySequence);
        }
        let mut s = self.init_state;
        xs.iter()
            .map(|&x| {
                self.check_input(x)?;
                s = self.apply(s, x);
                Ok(s)
            })
            .collect()
    }

    pub fn final_state(&self, xs: &[u32]) -> Result<u32, TaskError> {
        Ok(*self.unroll(xs)?.last().expect("unroll is non-empty"))
    }
}
