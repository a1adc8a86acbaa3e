//! Randomised finite-difference checks for every differentiable tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, Result, Tape, Tensor, Var, LAYER_NORM_EPS};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

pub const OPS: [&str; 17] = [
    "matmul",
    "bmm",
    "bmm_trans",
    "add",
    "mul",
    "scale",
    "relu",
    "gelu",
    "layer_norm",
    "causal_softmax",
    "mask_renormalize",
    "embedding",
    "cross_entropy",
    "reshape",
    "slice_cols",
    "concat_cols",
    "transpose",
];

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries bounded away from zero, so no difference quotient straddles the
/// ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Builds a random instance of `op` from `seed` and checks it.
pub fn check_op(op: &str, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (b, m, k, n) = (dim(1, 3), dim(1, 5), dim(1, 5), dim(1, 5));
    let t = dim(1, 5);
    let v = dim(2, 6);
    let rank3 = seed % 2 == 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lead: Vec<usize> = if rank3 { vec![b, m] } else { vec![m] };
    let with_last = |last: usize| {
        let mut s = lead.clone();
        s.push(last);
        s
    };
    match op {
        "matmul" => {
            let inputs = [randn(&mut rng, &with_last(k)), randn(&mut rng, &[k, n])];
            grad_check(|tape, x| tape.matmul(x[0], x[1]), &inputs, tol)
        }
        "bmm" => {
            let inputs = [randn(&mut rng, &[b, m, k]), randn(&mut rng, &[b, k, n])];
            grad_check(|tape, x| tape.bmm(x[0], x[1], false), &inputs, tol)
        }
        "bmm_trans" => {
            let inputs = [randn(&mut rng, &[b, m, k]), randn(&mut rng, &[b, n, k])];
            grad_check(|tape, x| tape.bmm(x[0], x[1], true), &inputs, tol)
        }
        "add" | "mul" => {
            let full = with_last(n);
            let other = if seed % 3 == 0 { full.clone() } else { vec![n] };
            let inputs = [randn(&mut rng, &full), randn(&mut rng, &other)];
            if op == "add" {
                grad_check(|tape, x| tape.add(x[0], x[1]), &inputs, tol)
            } else {
                grad_check(|tape, x| tape.mul(x[0], x[1]), &inputs, tol)
            }
        }
        "scale" => {
            let factor = rng.gen_range(-3.0..3.0);
            let inputs = [randn(&mut rng, &with_last(n))];
            grad_check(|tape, x| Ok(tape.scale(x[0], factor)), &inputs, tol)
        }
        "relu" => {
            let inputs = [off_zero(&mut rng, &with_last(n))];
            grad_check(|tape, x| Ok(tape.relu(x[0])), &inputs, tol)
        }
        "gelu" => {
            let inputs = [Tensor::randn(&with_last(n), 2.0, &mut rng)];
            grad_check(|tape, x| Ok(tape.gelu(x[0])), &inputs, tol)
        }
        "layer_norm" => {
            let d = n.max(2);
            let inputs = [
                randn(&mut rng, &with_last(d)),
                randn(&mut rng, &[d]),
                randn(&mut rng, &[d]),
            ];
            grad_check(|tape, x| tape.layer_norm(x[0], x[1], x[2], LAYER_NORM_EPS), &inputs, tol)
        }
        "causal_softmax" => {
            let shape = if rank3 { vec![b, t, t] } else { vec![t, t] };
            let inputs = [Tensor::randn(&shape, 2.0, &mut rng)];
            grad_check(|tape, x| tape.causal_softmax(x[0]), &inputs, tol)
        }
        "mask_renormalize" => {
            let keep: Vec<bool> = (0..t * t).map(|_| rng.gen_bool(0.7)).collect();
            let inputs = [Tensor::randn(&[b, t, t], 2.0, &mut rng)];
            grad_check(
                |tape, x| {
                    let a = tape.causal_softmax(x[0])?;
                    tape.mask_renormalize(a, &keep)
                },
                &inputs,
                tol,
            )
        }
        "embedding" => {
            let ids: Vec<usize> = (0..m * b).map(|_| rng.gen_range(0..v)).collect();
            let inputs = [randn(&mut rng, &[v, n])];
            grad_check(|tape, x| tape.embedding(x[0], &ids), &inputs, tol)
        }
        "cross_entropy" => {
            let rows: usize = lead.iter().product();
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..v)).collect();
            let mut mask: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
            mask[0] = true;
            let inputs = [Tensor::randn(&with_last(v), 2.0, &mut rng)];
            let inputs = [inputs[0].clone().reshaped(vec![rows, v])?];
            grad_check(|tape, x| tape.cross_entropy(x[0], &targets, &mask), &inputs, tol)
        }
        "reshape" => {
            let inputs = [randn(&mut rng, &[m, n * k])];
            grad_check(|tape, x| tape.reshape(x[0], &[n, m, k]), &inputs, tol)
        }
        "slice_cols" => {
            let width = n.max(2);
            let start = rng.gen_range(0..width);
            let len = rng.gen_range(1..=width - start);
            let inputs = [randn(&mut rng, &with_last(width))];
            grad_check(|tape, x| tape.slice_cols(x[0], start, len), &inputs, tol)
        }
        "concat_cols" => {
            let inputs = [
                randn(&mut rng, &with_last(n)),
                randn(&mut rng, &with_last(k)),
                randn(&mut rng, &with_last(1)),
            ];
            grad_check(|tape, x| tape.concat_cols(x), &inputs, tol)
        }
        "transpose" => {
            let inputs = [randn(&mut rng, &[m, n])];
            grad_check(|tape, x| tape.transpose(x[0]), &inputs, tol)
        }
        other => Err(crate::autodiff::AutodiffError::Invalid(format!("unknown op `{other}`"))),
    }
}

/// A small block stacking most ops, checked end to end.
pub fn check_composite(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d, v) = (4, 3, 5);
    let inputs = [
        randn(&mut rng, &[v, d]),
        randn(&mut rng, &[d, d]),
        randn(&mut rng, &[d]),
        randn(&mut rng, &[d]),
    ];
    let ids: Vec<usize> = (0..2 * t).map(|_| rng.gen_range(0..v)).collect();
    let targets: Vec<usize> = (0..2 * t).map(|_| rng.gen_range(0..v)).collect();
    grad_check(
        |tape: &mut Tape, x: &[Var]| {
            let e = tape.embedding(x[0], &ids)?;
            let e = tape.reshape(e, &[2, t, d])?;
            let h = tape.layer_norm(e, x[2], x[3], LAYER_NORM_EPS)?;
            let q = tape.matmul(h, x[1])?;
            let s = tape.bmm(q, h, true)?;
            let a = tape.causal_softmax(s)?;
            let o = tape.bmm(a, h, false)?;
            let o = tape.gelu(o);
            let u = tape.transpose(x[0])?;
            let logits = tape.matmul(o, u)?;
            let logits = tape.reshape(logits, &[2 * t, v])?;
            tape.cross_entropy(logits, &targets, &vec![true; 2 * t])
        },
        &inputs,
        tol,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpSummary {
    pub op: String,
    pub cases: usize,
    pub worst: f64,
    pub passed: bool,
}

/// Every op over seeds `0..seeds`.
pub fn run_suite(seeds: u64, tol: f64) -> Result<Vec<OpSummary>> {
    let mut out = Vec::new();
    for op in OPS.iter().copied().chain(["composite"]) {
        let mut worst = 0.0_f64;
        for seed in 0..seeds {
            let r = if op == "composite" {
                check_composite(seed, tol)?
            } else {
                check_op(op, seed, tol)?
            };
            worst = worst.max(r.max_rel_error);
        }
        out.push(OpSummary {
            op: op.to_string(),
            cases: seeds as usize,
            worst,
            passed: worst <= tol,
        });
    }
    Ok(out)
}
