//! Hand-built two-layer iteration head.
//!
//! The residual stream is a direct sum of one-hot blocks. Layer 1 finds the
//! EoI token and copies its position. The first MLP turns the pair
//! (EoI position, own position) into the input index to fetch, with one AND
//! unit per pair. Layer 2 fetches that input token, and the second MLP is a
//! lookup table for the successor rule in which EoI stands for the initial
//! state.

use std::ops::Range;

use thiserror::Error;

use crate::encoding::{EncodingError, Vocab};
use crate::model::{Activation, Model, ModelConfig, ModelError, Params, PositionalMode};
use crate::tasks::TaskSpec;

pub const DEFAULT_BETA: f64 = 40.0;
pub const DEFAULT_GAIN: f64 = 10.0;
/// Largest attention mass the construction may leave off target.
pub const MAX_LEAKAGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error("layout needs d >= {needed}, got {d}")]
    Capacity { needed: usize, d: usize },
    #[error("beta = {beta} leaves up to {leak:.3e} attention mass off target over {keys} keys (limit {MAX_LEAKAGE})")]
    Saturation { beta: f64, keys: usize, leak: f64 },
    #[error("invalid circuit plan: {0}")]
    Invalid(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Coordinate ranges of the residual stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubspaceLayout {
    pub token: Range<usize>,
    pub constant: usize,
    pub position: Range<usize>,
    pub eoi_position: Range<usize>,
    /// Index `t` of the input to fetch, for `t` in `0..=L_max`.
    pub query: Range<usize>,
    pub retrieved: Range<usize>,
    pub next_state: Range<usize>,
    pub eos_flag: usize,
}

impl SubspaceLayout {
    fn new(vocab_size: usize, values: usize, positions: usize, l_max: usize) -> Self {
        let mut at = 0;
        let mut take = |w: usize| {
            let r = at..at + w;
            at += w;
            r
        };
        let token = take(vocab_size);
        let constant = take(1).start;
        let position = take(positions);
        let eoi_position = take(positions);
        let query = take(l_max + 1);
        let retrieved = take(values);
        let next_state = take(values);
        let eos_flag = take(1).start;
        Self {
            token,
            constant,
            position,
            eoi_position,
            query,
            retrieved,
            next_state,
            eos_flag,
        }
    }

    pub fn width(&self) -> usize {
        self.eos_flag + 1
    }
}

#[derive(Debug, Clone)]
pub struct CircuitPlan {
    pub vocab: Vocab,
    pub task: TaskSpec,
    pub l_max: usize,
    pub beta: f64,
    /// Logit scale of the read-out.
    pub gain: f64,
    /// Residual width; `None` uses exactly the layout width.
    pub d: Option<usize>,
}

impl CircuitPlan {
    pub fn new(vocab: Vocab, task: TaskSpec, l_max: usize) -> Self {
        Self {
            vocab,
            task,
            l_max,
            beta: DEFAULT_BETA,
            gain: DEFAULT_GAIN,
            d: None,
        }
    }

    pub fn positions(&self) -> usize {
        ModelConfig::positions_for(self.l_max)
    }

    pub fn layout(&self) -> SubspaceLayout {
        SubspaceLayout::new(
            self.vocab.total_size(),
            self.vocab.value_tokens as usize,
            self.positions(),
            self.l_max,
        )
    }

    fn hidden_layer1(&self) -> usize {
        // one unit per (L, t) with t in 1..=L, plus one EoS unit per L
        (1..=self.l_max).map(|l| l + 1).sum()
    }

    fn hidden_layer2(&self) -> usize {
        (self.task.state_alphabet_size as usize + 1) * self.task.input_alphabet_size as usize
    }

    pub fn model_config(&self) -> Result<ModelConfig, CircuitError> {
        let needed = self.layout().width();
        let d = self.d.unwrap_or(needed);
        if d < needed {
            return Err(CircuitError::Capacity { needed, d });
        }
        let mut cfg = ModelConfig::new(self.vocab.total_size(), d, self.positions());
        cfg.mlp_hidden = self.hidden_layer1().max(self.hidden_layer2());
        cfg.pre_norm = false;
        cfg.activation = Activation::Relu;
        cfg.positional = PositionalMode::Learned;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CircuitError> {
        if self.l_max == 0 {
            return Err(CircuitError::Invalid("L_max must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) || !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(CircuitError::Invalid("beta and gain must be positive and finite".into()));
        }
        self.vocab.check_task(&self.task)?;
        let keys = self.positions();
        let leak = (keys - 1) as f64 * (-self.beta).exp();
        if leak > MAX_LEAKAGE {
            return Err(CircuitError::Saturation {
                beta: self.beta,
                keys,
                leak,
            });
        }
        Ok(())
    }
}

/// Assigns every weight of the iteration head for `plan`.
pub fn build_iteration_head(plan: &CircuitPlan) -> Result<Model, CircuitError> {
    plan.check()?;
    let cfg = plan.model_config()?;
    let lay = plan.layout();
    let (d, h, v) = (cfg.d, cfg.mlp_hidden, cfg.vocab_size);
    let mut params = Params::zeros(&cfg);
    let eoi = plan.vocab.eoi() as usize;
    let eos = plan.vocab.eos() as usize;
    let values = plan.vocab.value_tokens as usize;
    let sqrt_d = (d as f64).sqrt();

    let mut set = |name: &str, r: usize, c: usize, val: f64| {
        let t = params.get_mut(name).unwrap_or_else(|| panic!("missing {name}"));
        let cols = t.cols();
        t.data_mut()[r * cols + c] = val;
    };

    for tok in 0..v {
        set("token_embedding", tok, lay.token.start + tok, 1.0);
        set("token_embedding", tok, lay.constant, 1.0);
    }
    for p in 0..plan.positions() {
        set("position_embedding", p, lay.position.start + p, 1.0);
    }

    // Layer 1 attention: every query asks "are you EoI?".
    set("layer1.attn.wq", lay.constant, 0, sqrt_d);
    set("layer1.attn.wk", lay.token.start + eoi, 0, plan.beta);
    for p in 0..plan.positions() {
        set("layer1.attn.wv", lay.position.start + p, lay.eoi_position.start + p, 1.0);
        set("layer1.attn.wo", lay.eoi_position.start + p, lay.eoi_position.start + p, 1.0);
    }

    // Layer 1 MLP: AND(EoI at L+1, here at L+t) -> fetch input t; at 2L+1 -> EoS.
    let mut unit = 0;
    for l in 1..=plan.l_max {
        for t in 1..=l + 1 {
            set("layer1.mlp_in.weight", lay.eoi_position.start + l + 1, unit, 1.0);
            set("layer1.mlp_in.weight", lay.position.start + l + t, unit, 1.0);
            set("layer1.mlp_in.bias", 0, unit, -1.0);
            if t <= l {
                set("layer1.mlp_out.weight", unit, lay.query.start + t, 1.0);
            } else {
                set("layer1.mlp_out.weight", unit, lay.eos_flag, 1.0);
            }
            unit += 1;
        }
    }

    // Layer 2 attention: "are you position t?", then copy the token there.
    for t in 0..lay.query.len() {
        set("layer2.attn.wq", lay.query.start + t, t, sqrt_d);
    }
    for p in 0..plan.positions() {
        set("layer2.attn.wk", lay.position.start + p, p, plan.beta);
    }
    for x in 0..values {
        set("layer2.attn.wv", lay.token.start + x, lay.retrieved.start + x, 1.0);
        set("layer2.attn.wo", lay.retrieved.start + x, lay.retrieved.start + x, 1.0);
    }

    // Layer 2 MLP: lookup of F over (current state token, retrieved input).
    let task = &plan.task;
    let states = (0..task.state_alphabet_size).map(|s| (s as usize, s)).chain([(eoi, task.init_state)]);
    let mut unit = 0;
    for (token, s) in states {
        for x in 0..task.input_alphabet_size {
            let next = task.step(s, x).expect("alphabets were validated") as usize;
            set("layer2.mlp_in.weight", lay.token.start + token, unit, 1.0);
            set("layer2.mlp_in.weight", lay.retrieved.start + x as usize, unit, 1.0);
            set("layer2.mlp_in.bias", 0, unit, -1.0);
            set("layer2.mlp_out.weight", unit, lay.next_state.start + next, 1.0);
            unit += 1;
        }
    }
    debug_assert!(unit <= h);

    for s in 0..values {
        set("unembedding", lay.next_state.start + s, s, plan.gain);
    }
    set("unembedding", lay.eos_flag, eos, 2.0 * plan.gain);

    Ok(Model::new(cfg, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{decode_states, encode, Layout};
    use crate::model::{ideal_attention, IdealPattern};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_inputs(len: usize, k: u32) -> Vec<Vec<u32>> {
        let total = (k as usize).pow(len as u32);
        (0..total)
            .map(|mut n| {
                (0..len)
                    .map(|_| {
                        let x = (n % k as usize) as u32;
                        n /= k as usize;
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn parity_prompt_decodes_to_oracle() {
        let vocab = Vocab::standard();
        let model = build_iteration_head(&CircuitPlan::new(vocab.clone(), TaskSpec::parity(), 8)).unwrap();
        let prompt = [12, 1, 0, 1, 14];
        let out = model.greedy_decode(&prompt, 20, vocab.eos(), &[]).unwrap();
        assert_eq!(out, [12, 1, 0, 1, 14, 1, 1, 0, 15]);
    }

    #[test]
    fn exact_on_every_short_copy_and_parity_input() {
        let vocab = Vocab::standard();
        for task in [TaskSpec::copy(), TaskSpec::parity()] {
            let model = build_iteration_head(&CircuitPlan::new(vocab.clone(), task.clone(), 5)).unwrap();
            for len in 1..=5 {
                for xs in all_inputs(len, 2) {
                    let seq = encode(&vocab, &task, &xs, Layout::Cot).unwrap();
                    let out = model.greedy_decode(seq.prompt(), 2 * len + 2, vocab.eos(), &[]).unwrap();
                    assert_eq!(out, seq.tokens, "{} {xs:?}", task.name);
                    let states = decode_states(&vocab, &out, len, Layout::Cot);
                    assert_eq!(states.states().unwrap(), task.unroll(&xs).unwrap());
                }
            }
        }
    }

    #[test]
    fn polynomial_circuit_on_random_inputs() {
        let vocab = Vocab::standard();
        let task = TaskSpec::xy_plus_one(11).unwrap();
        let model = build_iteration_head(&CircuitPlan::new(vocab.clone(), task.clone(), 6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for len in 1..=6 {
            for _ in 0..8 {
                let xs: Vec<u32> = (0..len).map(|_| rng.gen_range(0..11)).collect();
                let seq = encode(&vocab, &task, &xs, Layout::Cot).unwrap();
                let out = model.greedy_decode(seq.prompt(), 2 * len + 2, vocab.eos(), &[]).unwrap();
                assert_eq!(out, seq.tokens);
            }
        }
    }

    #[test]
    fn attention_is_the_ideal_pattern() {
        let vocab = Vocab::standard();
        let task = TaskSpec::parity();
        let model = build_iteration_head(&CircuitPlan::new(vocab.clone(), task.clone(), 4)).unwrap();
        for len in 1..=4 {
            let t = 2 * len + 3;
            let first = ideal_attention(len, IdealPattern::First, t).unwrap();
            let second = ideal_attention(len, IdealPattern::Second, t).unwrap();
            for xs in all_inputs(len, 2) {
                let seq = encode(&vocab, &task, &xs, Layout::Cot).unwrap();
                let (_, cap) = model.forward(&seq.tokens, true, &[]).unwrap();
                let cap = cap.unwrap();
                let (a1, a2) = (cap.get(1, 0).unwrap(), cap.get(2, 0).unwrap());
                for q in len + 1..=2 * len {
                    assert!(a1.at2(q, len + 1) >= 1.0 - 1e-6);
                    assert!((a1.at2(q, len + 1) - first.at2(q, len + 1)).abs() <= 1e-6);
                    assert!(a2.at2(q, q - len) >= 1.0 - 1e-6);
                    assert!((a2.at2(q, q - len) - second.at2(q, q - len)).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn swapping_second_mlp_turns_copy_into_parity() {
        let vocab = Vocab::standard();
        let copy = build_iteration_head(&CircuitPlan::new(vocab.clone(), TaskSpec::copy(), 6)).unwrap();
        let parity = build_iteration_head(&CircuitPlan::new(vocab.clone(), TaskSpec::parity(), 6)).unwrap();
        let mut swapped = copy.clone();
        let mut changed = Vec::new();
        for (name, t) in parity.params.iter() {
            if copy.params.get(name).unwrap() != t {
                changed.push(name.to_string());
            }
            if name.starts_with("layer2.mlp_") {
                *swapped.params.get_mut(name).unwrap() = t.clone();
            }
        }
        assert_eq!(changed, ["layer2.mlp_out.weight"]);
        let task = TaskSpec::parity();
        for xs in all_inputs(6, 2) {
            let seq = encode(&vocab, &task, &xs, Layout::Cot).unwrap();
            let out = swapped.greedy_decode(seq.prompt(), 14, vocab.eos(), &[]).unwrap();
            assert_eq!(out, seq.tokens);
        }
    }

    #[test]
    fn capacity_and_saturation_errors() {
        let mut plan = CircuitPlan::new(Vocab::standard(), TaskSpec::parity(), 4);
        let needed = plan.layout().width();
        plan.d = Some(needed - 1);
        assert!(matches!(
            build_iteration_head(&plan),
            Err(CircuitError::Capacity { needed: n, .. }) if n == needed
        ));
        plan.d = Some(needed + 5);
        let wide = build_iteration_head(&plan).unwrap();
        assert_eq!(wide.cfg.d, needed + 5);
        plan.d = None;
        plan.beta = 3.0;
        assert!(matches!(build_iteration_head(&plan), Err(CircuitError::Saturation { .. })));
        plan.beta = -1.0;
        assert!(build_iteration_head(&plan).is_err());
        let tiny = Vocab::new(2, vec!["poly".into()]);
        let plan = CircuitPlan::new(tiny, TaskSpec::xy_plus_one(11).unwrap(), 3);
        assert!(matches!(build_iteration_head(&plan), Err(CircuitError::Encoding(_))));
    }
}
