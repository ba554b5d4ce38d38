//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients in that fixed order, which keeps repeated runs
//! bit-identical.

use rand::Rng;

use super::tensor::gemm;
use super::{DiffError, ParamGrads, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    EmbedTokens {
        x: Var,
        w: Var,
        b: Var,
        cls: Var,
        sep: Var,
        pos: Var,
    },
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(msg: impl Into<String>) -> DiffError {
    DiffError::ShapeMismatch(msg.into())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn is_row_vector(t: &Tensor, cols: usize) -> bool {
    t.len() == cols && t.rows() == 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64, DiffError> {
        self.value(v).item()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFiniteValue(format!("{op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push(t, Op::Input, false)
    }

    /// A differentiable leaf that is not tied to a parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push(t, Op::Input, true)
    }

    /// Binds a stored parameter. Frozen groups bind as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, DiffError> {
        let needs = !store.is_frozen(id);
        self.push(store.get(id).clone(), Op::Param(id), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(shape_err(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs)
    }

    /// `x·W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        if wv.rows() != k || !is_row_vector(bv, n) {
            return Err(shape_err(format!(
                "affine {:?} x {:?} + {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(m, k, n, xv.data(), false, wv.data(), false, &mut out, true);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::matrix(m, n, out)?, Op::Affine(x, w, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), needs)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if !is_row_vector(rv, c) {
            return Err(shape_err(format!("add_row {:?} + {:?}", av.shape(), rv.shape())));
        }
        let data = av
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(rv.data()).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(row);
        self.push(t, Op::AddRow(a, row), needs)
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("mul {:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), needs)
    }

    /// Multiplies every row of `a` element-wise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if !is_row_vector(rv, c) {
            return Err(shape_err(format!("mul_row {:?} * {:?}", av.shape(), rv.shape())));
        }
        let data = av
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(rv.data()).map(|(x, y)| x * y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(row);
        self.push(t, Op::MulRow(a, row), needs)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, DiffError> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * factor).collect())?;
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, factor), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x + c).collect())?;
        let needs = self.needs(a);
        self.push(t, Op::AddScalar(a), needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, DiffError> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())?;
        let needs = self.needs(a);
        self.push(t, op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; non-positive inputs are a [`DiffError::NonFiniteValue`].
    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `a^p` for non-negative `a`. `p = 0` yields ones with zero gradient.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var, DiffError> {
        if p == 0.0 {
            return self.unary(a, |_| 1.0, Op::Powf(a, p));
        }
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = vec![0.0; av.len()];
        for (src, dst) in av.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let needs = self.needs(a);
        self.push(t, Op::Softmax(a), needs)
    }

    /// Log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = vec![0.0; av.len()];
        for (src, dst) in av.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let needs = self.needs(a);
        self.push(t, Op::LogSoftmax(a), needs)
    }

    /// Normalises each row to zero mean and unit (population) variance,
    /// then applies the per-column `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, DiffError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if !is_row_vector(gv, c) || !is_row_vector(bv, c) {
            return Err(shape_err(format!(
                "layer_norm {:?} with gain {:?} bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let src = xv.row_slice(r);
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (src[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `(batch·seq) × H`; head `h` uses columns
    /// `h·H/heads .. (h+1)·H/heads`. The per-(sample, head) attention
    /// matrices are kept and available through [`Graph::attention_weights`].
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
    ) -> Result<Var, DiffError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        if kv.shape() != qv.shape()
            || vv.shape() != qv.shape()
            || seq == 0
            || heads == 0
            || width % heads != 0
            || qv.rows() % seq != 0
        {
            return Err(shape_err(format!(
                "attention q {:?} k {:?} v {:?} seq {} heads {}",
                qv.shape(),
                kv.shape(),
                vv.shape(),
                seq,
                heads
            )));
        }
        let batch = qv.rows() / seq;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; qv.len()];
        let mut scores = vec![0.0; seq];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let wbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qrow = &qd[(b * seq + i) * width + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(b * seq + j) * width + h * dh..][..dh];
                        *s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    let wrow = &mut weights[wbase + i * seq..][..seq];
                    softmax_row(&scores, wrow);
                    let orow = &mut out[(b * seq + i) * width + h * dh..][..dh];
                    for (j, &a) in wrow.iter().enumerate() {
                        let vrow = &vd[(b * seq + j) * width + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                weights,
            },
            needs,
        )
    }

    /// Attention matrices recorded by [`Graph::scaled_dot_attention`], laid
    /// out as `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(shape_err("mean of empty tensor"));
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// `Σ_j c_j · a_j` over all elements of `a`.
    pub fn weighted_sum(&mut self, a: Var, coeffs: Vec<f64>) -> Result<Var, DiffError> {
        let av = self.value(a);
        if coeffs.len() != av.len() {
            return Err(shape_err(format!(
                "weighted_sum of {:?} with {} coefficients",
                av.shape(),
                coeffs.len()
            )));
        }
        let s = av.data().iter().zip(&coeffs).map(|(x, c)| x * c).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, coeffs), needs)
    }

    /// Concatenates along the last axis; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| shape_err("concat of nothing"))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(shape_err("concat_cols row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Stacks parts vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| shape_err("concat of nothing"))?;
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(shape_err("concat_rows column counts differ"));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let rows = out.len() / cols.max(1);
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var, DiffError> {
        let av = self.value(a);
        let c = av.cols();
        if let Some(bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(shape_err(format!("row {bad} out of range for {:?}", av.shape())));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            out.extend_from_slice(av.row_slice(r));
        }
        let n = rows.len();
        let needs = self.needs(a);
        self.push(Tensor::matrix(n, c, out)?, Op::SelectRows(a, rows), needs)
    }

    /// Gathers one column per row: `out[r] = a[r, cols[r]]`, shape `n × 1`.
    pub fn pick_cols(&mut self, a: Var, cols: Vec<usize>) -> Result<Var, DiffError> {
        let av = self.value(a);
        if cols.len() != av.rows() || cols.iter().any(|&c| c >= av.cols()) {
            return Err(shape_err(format!(
                "pick_cols with {} indices on {:?}",
                cols.len(),
                av.shape()
            )));
        }
        let out = cols.iter().enumerate().map(|(r, &c)| av.at(r, c)).collect();
        let n = cols.len();
        let needs = self.needs(a);
        self.push(Tensor::matrix(n, 1, out)?, Op::PickCols(a, cols), needs)
    }

    /// Builds `[CLS], w_1·x_1 + b_1, …, w_F·x_F + b_F, [SEP]` for every row
    /// of `x` (`batch × F`) and adds position embeddings, giving a packed
    /// `(batch·(F+2)) × H` token matrix.
    pub fn embed_tokens(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        cls: Var,
        sep: Var,
        pos: Var,
    ) -> Result<Var, DiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (cv, sv, pv) = (self.value(cls), self.value(sep), self.value(pos));
        let f = xv.cols();
        let h = wv.cols();
        let seq = f + 2;
        if wv.rows() != f
            || bv.shape() != wv.shape()
            || !is_row_vector(cv, h)
            || !is_row_vector(sv, h)
            || pv.rows() != seq
            || pv.cols() != h
        {
            return Err(shape_err(format!(
                "embed_tokens x {:?} w {:?} b {:?} cls {:?} sep {:?} pos {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape(),
                cv.shape(),
                sv.shape(),
                pv.shape()
            )));
        }
        let batch = xv.rows();
        let mut out = vec![0.0; batch * seq * h];
        for s in 0..batch {
            let base = s * seq * h;
            for t in 0..seq {
                let row = &mut out[base + t * h..][..h];
                let p = pv.row_slice(t);
                if t == 0 {
                    for j in 0..h {
                        row[j] = cv.data()[j] + p[j];
                    }
                } else if t == seq - 1 {
                    for j in 0..h {
                        row[j] = sv.data()[j] + p[j];
                    }
                } else {
                    let i = t - 1;
                    let xi = xv.at(s, i);
                    let (wi, bi) = (wv.row_slice(i), bv.row_slice(i));
                    for j in 0..h {
                        row[j] = wi[j] * xi + bi[j] + p[j];
                    }
                }
            }
        }
        let needs = [x, w, b, cls, sep, pos].iter().any(|v| self.needs(*v));
        self.push(
            Tensor::matrix(batch * seq, h, out)?,
            Op::EmbedTokens {
                x,
                w,
                b,
                cls,
                sep,
                pos,
            },
            needs,
        )
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var, DiffError> {
        if !(0.0..1.0).contains(&p) {
            return Err(DiffError::InvalidHyperparameter(format!("dropout {p}")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let av = self.value(a);
        let mask: Vec<f64> = (0..av.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(t, Op::Dropout(a, mask), needs)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, shape_of: &Tensor, data: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        let t = Tensor::new(shape_of.shape().to_vec(), data).expect("gradient shape");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), DiffError> {
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, false);
                    self.accumulate(grads, *a, av, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    self.accumulate(grads, *b, bv, db);
                }
            }
            Op::Affine(x, w, b) => {
                let (xv, wv, bv) = (self.value(*x), self.value(*w), self.value(*b));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, wv.data(), true, &mut dx, false);
                    self.accumulate(grads, *x, xv, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, xv.data(), true, gd, false, &mut dw, false);
                    self.accumulate(grads, *w, wv, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, bv, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.value(*a), gd.to_vec());
                self.accumulate(grads, *b, self.value(*b), gd.to_vec());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, self.value(*a), gd.to_vec());
                if self.needs(*row) {
                    let c = out.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in gd.chunks(c) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, self.value(*row), dr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, av, da);
                }
                if self.needs(*b) {
                    let db = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, bv, db);
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let c = av.cols();
                if self.needs(*a) {
                    let da = gd
                        .chunks(c)
                        .flat_map(|gr| gr.iter().zip(rv.data()).map(|(g, r)| g * r))
                        .collect();
                    self.accumulate(grads, *a, av, da);
                }
                if self.needs(*row) {
                    let mut dr = vec![0.0; c];
                    for (gr, ar) in gd.chunks(c).zip(av.data().chunks(c)) {
                        for j in 0..c {
                            dr[j] += gr[j] * ar[j];
                        }
                    }
                    self.accumulate(grads, *row, rv, dr);
                }
            }
            Op::Scale(a, f) => {
                let da = gd.iter().map(|g| g * f).collect();
                self.accumulate(grads, *a, self.value(*a), da);
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, self.value(*a), gd.to_vec());
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let da = gd
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, av, da);
            }
            Op::Sigmoid(a) => {
                let da = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, self.value(*a), da);
            }
            Op::Exp(a) => {
                let da = gd.iter().zip(out.data()).map(|(g, e)| g * e).collect();
                self.accumulate(grads, *a, self.value(*a), da);
            }
            Op::Log(a) => {
                let av = self.value(*a);
                let da = gd.iter().zip(av.data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, av, da);
            }
            Op::Powf(a, p) => {
                let av = self.value(*a);
                let da = if *p == 0.0 {
                    vec![0.0; av.len()]
                } else {
                    gd.iter()
                        .zip(av.data())
                        .map(|(g, x)| g * p * x.powf(p - 1.0))
                        .collect()
                };
                self.accumulate(grads, *a, av, da);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                let da = gd
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| if x < lo || x > hi { 0.0 } else { *g })
                    .collect();
                self.accumulate(grads, *a, av, da);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut da = vec![0.0; out.len()];
                for ((s, gr), d) in out.data().chunks(c).zip(gd.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: f64 = s.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        d[j] = s[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, self.value(*a), da);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut da = vec![0.0; out.len()];
                for ((ls, gr), d) in out.data().chunks(c).zip(gd.chunks(c)).zip(da.chunks_mut(c)) {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        d[j] = gr[j] - ls[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, self.value(*a), da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let c = xv.cols();
                let n = c as f64;
                if self.needs(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    let mut dxh = vec![0.0; c];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &gd[r * c..][..c];
                        let hr = &xhat[r * c..][..c];
                        for j in 0..c {
                            dxh[j] = gr[j] * gv.data()[j];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] = inv / n * (n * dxh[j] - s1 - hr[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, xv, dx);
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    self.accumulate(grads, *gain, gv, dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for gr in gd.chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *bias, self.value(*bias), db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (seq, heads) = (*seq, *heads);
                let width = qv.cols();
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let batch = qv.rows() / seq;
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut da = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let wbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let w = &weights[wbase + i * seq..][..seq];
                            let go = &gd[(b * seq + i) * width + h * dh..][..dh];
                            for j in 0..seq {
                                let off = (b * seq + j) * width + h * dh;
                                let vrow = &vd[off..][..dh];
                                da[j] = go.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                for (d, g) in dv[off..][..dh].iter_mut().zip(go) {
                                    *d += w[j] * g;
                                }
                            }
                            let dot: f64 = w.iter().zip(&da).map(|(x, y)| x * y).sum();
                            let qoff = (b * seq + i) * width + h * dh;
                            for j in 0..seq {
                                let ds = w[j] * (da[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let koff = (b * seq + j) * width + h * dh;
                                for t in 0..dh {
                                    dq[qoff + t] += ds * kd[koff + t];
                                    dk[koff + t] += ds * qd[qoff + t];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, qv, dq);
                self.accumulate(grads, *k, kv, dk);
                self.accumulate(grads, *v, vv, dv);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, av, vec![gd[0]; av.len()]);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let n = av.len() as f64;
                self.accumulate(grads, *a, av, vec![gd[0] / n; av.len()]);
            }
            Op::WeightedSum(a, coeffs) => {
                let da = coeffs.iter().map(|c| c * gd[0]).collect();
                self.accumulate(grads, *a, self.value(*a), da);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let pc = pv.cols();
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            dp.extend_from_slice(&gd[r * total + offset..][..pc]);
                        }
                        self.accumulate(grads, *p, pv, dp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    self.accumulate(grads, *p, pv, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SelectRows(a, rows) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut da = vec![0.0; av.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        da[r * c + j] += gd[i * c + j];
                    }
                }
                self.accumulate(grads, *a, av, da);
            }
            Op::PickCols(a, cols) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut da = vec![0.0; av.len()];
                for (r, &col) in cols.iter().enumerate() {
                    da[r * c + col] += gd[r];
                }
                self.accumulate(grads, *a, av, da);
            }
            Op::EmbedTokens {
                x,
                w,
                b,
                cls,
                sep,
                pos,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let f = xv.cols();
                let h = wv.cols();
                let seq = f + 2;
                let batch = xv.rows();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; wv.len()];
                let mut dcls = vec![0.0; h];
                let mut dsep = vec![0.0; h];
                let mut dpos = vec![0.0; seq * h];
                for s in 0..batch {
                    for t in 0..seq {
                        let gr = &gd[(s * seq + t) * h..][..h];
                        for j in 0..h {
                            dpos[t * h + j] += gr[j];
                        }
                        if t == 0 {
                            for j in 0..h {
                                dcls[j] += gr[j];
                            }
                        } else if t == seq - 1 {
                            for j in 0..h {
                                dsep[j] += gr[j];
                            }
                        } else {
                            let i = t - 1;
                            let xi = xv.at(s, i);
                            let wi = wv.row_slice(i);
                            let mut acc = 0.0;
                            for j in 0..h {
                                dw[i * h + j] += gr[j] * xi;
                                db[i * h + j] += gr[j];
                                acc += gr[j] * wi[j];
                            }
                            dx[s * f + i] = acc;
                        }
                    }
                }
                self.accumulate(grads, *x, xv, dx);
                self.accumulate(grads, *w, wv, dw);
                self.accumulate(grads, *b, self.value(*b), db);
                self.accumulate(grads, *cls, self.value(*cls), dcls);
                self.accumulate(grads, *sep, self.value(*sep), dsep);
                self.accumulate(grads, *pos, self.value(*pos), dpos);
            }
            Op::Dropout(a, mask) => {
                let da = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *a, self.value(*a), da);
            }
        }
        Ok(())
    }

    /// Collects gradients for every trainable parameter in `store`.
    ///
    /// A trainable parameter that never reached the loss gets an all-zero
    /// gradient and a logged warning.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if !node.needs_grad {
                    continue;
                }
                if let Some(g) = &grads.grads[i] {
                    match out.get_mut(id) {
                        Some(acc) => acc.add_assign(g),
                        None => out.insert(id, g.clone()),
                    }
                }
            }
        }
        for id in store.ids() {
            if !store.is_frozen(id) && !out.contains(id) {
                log::warn!(
                    "{}",
                    DiffError::DisconnectedParameter(store.full_name(id))
                );
                out.insert(id, Tensor::zeros(store.get(id).shape()));
            }
        }
        out
    }
}
