//! Dense reverse-mode differentiation over small row-major `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute. Every node keeps its
//! forward value; [`Tape::backward`] walks the nodes in reverse creation order
//! (which is a topological order) and accumulates gradients for the leaves that
//! were registered with `requires_grad`.
//!
//! Tensors have rank at most 3. Linear maps treat every leading axis as a batch
//! of rows, attention works on `[batch, seq, seq]` score blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAX_RANK: usize = 3;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `sqrt(2 / pi)` for the tanh approximation of GELU.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `tanh` through one `exp_m1`, which is markedly cheaper than libm `tanh`.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    let e = (2.0 * u).exp_m1();
    e / (e + 2.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("rank {0} exceeds the supported maximum of 3")]
    Rank(usize),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("index {index} out of range ({bound})")]
    Index { index: usize, bound: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(AutodiffError::Rank(shape.len()));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} > 3", shape.len());
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Entries drawn from `Normal(0, std^2)` using Box-Muller over a ChaCha stream.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = std * standard_normal(rng);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        if shape.len() > MAX_RANK {
            return Err(AutodiffError::Rank(shape.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// C (m x n) = op(A) (m x k) * op(B) (k x n), optionally accumulating into C.
/// `ta` means A is stored as k x m, `tb` means B is stored as n x k.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access of the three operands.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
        /// `tanh` of the inner argument, kept for the backward pass.
        th: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalSoftmax {
        a: Var,
    },
    MaskRenorm {
        a: Var,
        keep: Vec<bool>,
        sums: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Reshape {
        a: Var,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Sum {
        a: Var,
    },
    Transpose {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Records operations for one forward pass. A tape is single-threaded;
/// independent tapes can be used from different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// `b` broadcasts over `a` when its shape equals a suffix of `a`'s shape.
fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b && !b.is_empty()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf. Gradients are only accumulated for leaves created
    /// with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// `a [.., K] x b [K, N] -> [.., N]`; leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape.len() != 2 || av.cols() != bv.shape[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &av.data, false, &bv.data, false, &mut out, false);
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b }, needs))
    }

    /// Batched product over rank-3 operands: `[B, M, K] x [B, K, N]`, or
    /// `[B, M, K] x [B, N, K]^T` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 3 || bv.shape.len() != 3 || av.shape[0] != bv.shape[0] {
            return Err(shape_err("bmm", av, bv));
        }
        let (batch, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
        let (kb, n) = if trans_b {
            (bv.shape[2], bv.shape[1])
        } else {
            (bv.shape[1], bv.shape[2])
        };
        if kb != k {
            return Err(shape_err("bmm", av, bv));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data[i * m * k..],
                false,
                &bv.data[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                false,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![batch, m, n],
                data: out,
            },
            Op::BatchMatMul { a, b, trans_b },
            needs,
        ))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcasts(&av.shape, &bv.shape) {
            return Err(shape_err("add", av, bv));
        }
        let mut data = Vec::with_capacity(av.numel());
        for chunk in av.data.chunks(bv.numel()) {
            data.extend(chunk.iter().zip(&bv.data).map(|(x, y)| x + y));
        }
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Add { a, b }, needs))
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcasts(&av.shape, &bv.shape) {
            return Err(shape_err("mul", av, bv));
        }
        let mut data = Vec::with_capacity(av.numel());
        for chunk in av.data.chunks(bv.numel()) {
            data.extend(chunk.iter().zip(&bv.data).map(|(x, y)| x * y));
        }
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|x| x * factor).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a);
        self.push(Tensor { shape, data }, Op::Scale { a, factor }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a);
        self.push(Tensor { shape, data }, Op::Relu { a }, needs)
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let th: Vec<f64> = av.data.iter().map(|&x| fast_tanh(GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x))).collect();
        let data = av.data.iter().zip(&th).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a);
        let th = if needs { th } else { Vec::new() };
        self.push(Tensor { shape, data }, Op::Gelu { a, th }, needs)
    }

    /// Normalizes every row of the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.shape != [d] || bv.shape != [d] {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut normed = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                normed[r * d + j] = h;
                out[r * d + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let shape = xv.shape.clone();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            needs,
        ))
    }

    /// Row-wise softmax over the last axis restricted to keys `j <= i`, where
    /// `i` is the row index within each trailing `[T, T]` block. Entries with
    /// `j > i` are exactly zero.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let sv = self.value(scores);
        let r = sv.shape.len();
        if r < 2 || sv.shape[r - 1] != sv.shape[r - 2] {
            return Err(shape_err("causal_softmax", sv, sv));
        }
        let t = sv.shape[r - 1];
        let mut out = vec![0.0; sv.numel()];
        for (row_idx, (src, dst)) in sv.data.chunks(t).zip(out.chunks_mut(t)).enumerate() {
            let q = row_idx % t;
            let max = src[..=q].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..=q {
                let e = (src[j] - max).exp();
                dst[j] = e;
                total += e;
            }
            for v in dst[..=q].iter_mut() {
                *v /= total;
            }
        }
        let shape = sv.shape.clone();
        let needs = self.needs(scores);
        Ok(self.push(Tensor { shape, data: out }, Op::CausalSoftmax { a: scores }, needs))
    }

    /// Zeroes the entries of each trailing `[T, T]` block where `keep` is false
    /// and rescales every row back to unit mass. A row whose kept mass is zero
    /// becomes uniform over the kept causal entries.
    pub fn mask_renormalize(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let av = self.value(a);
        let r = av.shape.len();
        if r < 2 || av.shape[r - 1] != av.shape[r - 2] {
            return Err(shape_err("mask_renormalize", av, av));
        }
        let t = av.shape[r - 1];
        if keep.len() != t * t {
            return Err(AutodiffError::Invalid(format!(
                "keep mask has {} entries, expected {}",
                keep.len(),
                t * t
            )));
        }
        let mut out = vec![0.0; av.numel()];
        let mut sums = vec![0.0; av.rows()];
        for (row_idx, (src, dst)) in av.data.chunks(t).zip(out.chunks_mut(t)).enumerate() {
            let q = row_idx % t;
            let mask = &keep[q * t..(q + 1) * t];
            let s: f64 = src.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
            sums[row_idx] = s;
            if s > 0.0 {
                for j in 0..t {
                    if mask[j] {
                        dst[j] = src[j] / s;
                    }
                }
            } else {
                let allowed: Vec<usize> = (0..=q).filter(|&j| mask[j]).collect();
                for &j in &allowed {
                    dst[j] = 1.0 / allowed.len() as f64;
                }
            }
        }
        let shape = av.shape.clone();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MaskRenorm {
                a,
                keep: keep.to_vec(),
                sums,
            },
            needs,
        ))
    }

    /// Gathers rows of a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape.len() != 2 {
            return Err(AutodiffError::Rank(tv.shape.len()));
        }
        let (v, d) = (tv.shape[0], tv.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::Index {
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv.data[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data: out,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over rows with `mask` set.
    /// Rows are all leading axes of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(AutodiffError::Invalid(format!(
                "cross_entropy: {rows} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::Invalid("cross_entropy: empty mask".into()));
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(AutodiffError::Index {
                    index: targets[r],
                    bound: v,
                });
            }
            let row = &lv.data[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape { a }, needs))
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let av = self.value(a);
        let d = av.cols();
        if start + width > d {
            return Err(AutodiffError::Index {
                index: start + width,
                bound: d,
            });
        }
        let mut out = Vec::with_capacity(av.rows() * width);
        for row in av.data.chunks(d) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = width;
        let needs = self.needs(a);
        Ok(self.push(Tensor { shape, data: out }, Op::SliceCols { a, start }, needs))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| AutodiffError::Invalid("concat of nothing".into()))?)
            .clone();
        let lead = &first.shape[..first.shape.len() - 1];
        let mut width = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape[..pv.shape.len() - 1] != *lead {
                return Err(shape_err("concat_cols", &first, pv));
            }
            width += pv.cols();
        }
        let rows = first.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = first.shape.clone();
        *shape.last_mut().unwrap() = width;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor { shape, data: out },
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum { a }, needs)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape.len() != 2 {
            return Err(AutodiffError::Rank(av.shape.len()));
        }
        let (r, c) = (av.shape[0], av.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose { a },
            needs,
        ))
    }

    /// Reverse pass from a scalar node. Returns gradients for every leaf that
    /// requires them; repeated uses of a node accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.needs_grad => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape[1]);
                self.accumulate(grads, *a, |ga| gemm(m, n, k, g, false, &bv.data, true, ga, true));
                self.accumulate(grads, *b, |gb| gemm(k, m, n, &av.data, true, g, false, gb, true));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
                let n = out.shape[2];
                self.accumulate(grads, *a, |ga| {
                    for i in 0..batch {
                        // dA = dC * op(B)^T
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &bv.data[i * k * n..],
                            !*trans_b,
                            &mut ga[i * m * k..],
                            true,
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..batch {
                        if *trans_b {
                            // B stored [N, K]: dB = dC^T * A
                            gemm(
                                n,
                                m,
                                k,
                                &g[i * m * n..],
                                true,
                                &av.data[i * m * k..],
                                false,
                                &mut gb[i * k * n..],
                                true,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data[i * m * k..],
                                true,
                                &g[i * m * n..],
                                false,
                                &mut gb[i * k * n..],
                                true,
                            );
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let bl = self.value(*b).numel();
                self.accumulate(grads, *b, |gb| {
                    for chunk in g.chunks(bl) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bl = bv.numel();
                self.accumulate(grads, *a, |ga| {
                    for (gac, gc) in ga.chunks_mut(bl).zip(g.chunks(bl)) {
                        for ((x, y), w) in gac.iter_mut().zip(gc).zip(&bv.data) {
                            *x += y * w;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (gc, ac) in g.chunks(bl).zip(av.data.chunks(bl)) {
                        for ((x, y), w) in gb.iter_mut().zip(gc).zip(ac) {
                            *x += y * w;
                        }
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor)
                });
            }
            Op::Relu { a } => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if av.data[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu { a, th } => {
                let av = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        let x = av.data[i];
                        let th = th[i];
                        let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                        ga[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = gv.numel();
                let rows = inv_std.len();
                self.accumulate(grads, *x, |gx| {
                    let mut dh = vec![0.0; d];
                    for r in 0..rows {
                        let off = r * d;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dh[j] = g[off + j] * gv.data[j];
                            s1 += dh[j];
                            s2 += dh[j] * normed[off + j];
                        }
                        let c = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[off + j] += c * (d as f64 * dh[j] - s1 - normed[off + j] * s2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (i, y) in g.iter().enumerate() {
                        gg[i % d] += y * normed[i];
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % d] += y;
                    }
                });
            }
            Op::CausalSoftmax { a } => {
                let t = out.cols();
                self.accumulate(grads, *a, |ga| {
                    for (row_idx, (y, dy)) in out.data.chunks(t).zip(g.chunks(t)).enumerate() {
                        let q = row_idx % t;
                        let dot: f64 = (0..=q).map(|j| y[j] * dy[j]).sum();
                        let dst = &mut ga[row_idx * t..(row_idx + 1) * t];
                        for j in 0..=q {
                            dst[j] += y[j] * (dy[j] - dot);
                        }
                    }
                });
            }
            Op::MaskRenorm { a, keep, sums } => {
                let t = out.cols();
                self.accumulate(grads, *a, |ga| {
                    for (row_idx, (y, dy)) in out.data.chunks(t).zip(g.chunks(t)).enumerate() {
                        let s = sums[row_idx];
                        if s <= 0.0 {
                            continue;
                        }
                        let q = row_idx % t;
                        let mask = &keep[q * t..(q + 1) * t];
                        let dot: f64 = (0..t).filter(|&j| mask[j]).map(|j| y[j] * dy[j]).sum();
                        let dst = &mut ga[row_idx * t..(row_idx + 1) * t];
                        for j in 0..t {
                            if mask[j] {
                                dst[j] += (dy[j] - dot) / s;
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for r in 0..targets.len() {
                        if !mask[r] {
                            continue;
                        }
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + targets[r]] -= scale;
                    }
                });
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::SliceCols { a, start } => {
                let d = self.value(*a).cols();
                let w = out.cols();
                self.accumulate(grads, *a, |ga| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            ga[r * d + start + j] += gr[j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for (r, gr) in g.chunks(total).enumerate() {
                            for j in 0..w {
                                gp[r * w + j] += gr[offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum { a } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Transpose { a } => {
                let (r, c) = (out.shape[1], out.shape[0]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
        }
    }
}

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the tape's gradients against central differences with step
/// `1e-5`. A non-scalar output is contracted with fixed pseudo-random weights
/// first, so any op can be checked as-is.
///
/// The per-entry error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
/// where `floor = 1e-3 * max(1, max |numeric|)`. The floor keeps entries whose
/// true gradient is (near) zero from turning difference-quotient round-off into
/// a spurious relative error.
pub fn grad_check<F>(op: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), want_grads)).collect();
        let out = op(&mut tape, &vars)?;
        let n = tape.value(out).numel();
        let scalar = if n == 1 {
            out
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wv = tape.constant(Tensor::new(tape.value(out).shape.clone(), w)?);
            let prod = tape.mul(out, wv)?;
            tape.sum(prod)
        };
        let value = tape.value(scalar).data[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(scalar)?;
        let gs = vars
            .iter()
            .zip(values)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(&t.shape)))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    let mut perturbed = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data[j];
            perturbed[i].data[j] = orig + GRAD_CHECK_STEP;
            let (up, _) = eval(&perturbed, false)?;
            perturbed[i].data[j] = orig - GRAD_CHECK_STEP;
            let (down, _) = eval(&perturbed, false)?;
            perturbed[i].data[j] = orig;
            col.push((up - down) / (2.0 * GRAD_CHECK_STEP));
        }
        numeric.push(col);
    }
    let scale = numeric
        .iter()
        .flatten()
        .fold(1.0_f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale;
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data.iter().zip(n) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        passed: worst <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_single_key() {
        let mut tape = Tape::new();
        let s = tape.constant(t(&[1, 1], &[3.7]));
        let y = tape.causal_softmax(s).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn softmax_rows_are_causal_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::randn(&[2, 5, 5], 3.0, &mut rng));
        let y = tape.causal_softmax(s).unwrap();
        let y = tape.value(y);
        for r in 0..10 {
            let row = y.row(r);
            let q = r % 5;
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row[q + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_v() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::full(&[3, 7], 0.25));
        let ce = tape.cross_entropy(l, &[0, 3, 6], &[true, true, true]).unwrap();
        assert!((tape.value(ce).data()[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -3.0]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(AutodiffError::Shape { .. })));
        assert!(matches!(tape.add(a, b), Err(AutodiffError::Shape { .. })));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.embedding(table, &[0, 3]).is_err());
    }

    #[test]
    fn matmul_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let r = grad_check(|tp, v| tp.matmul(v[0], v[1]), &[a, b], 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2, 1], &[0.5, -1.0]), true);
        let y = tape.matmul(a, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }
}
