//! Logic-tensor-network path: 16 learnable predicates, each gating the
//! feature vector with its own attention before a small MLP, aggregated into
//! a single satisfaction degree φ.

use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::flowdata::NUM_FEATURES;
use crate::model::{uniform_tensor, ModelError};

pub const NUM_PREDICATES: usize = 16;
pub const LTN_GROUP: &str = "ltn";
const HIDDEN: [usize; 2] = [32, 16];

#[derive(Clone, Debug)]
struct PredicateMlp {
    layers: [(ParamId, ParamId); 3],
}

/// Handles to the predicate parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct LtnParams {
    /// Raw attention logits `v`, `16 × 12`.
    pub attention: ParamId,
    /// Importance weights `w`, `16 × 1`.
    pub importance: ParamId,
    mlps: Vec<PredicateMlp>,
}

/// Graph handles from a batched LTN pass.
pub struct LtnVars {
    /// `batch × 1`.
    pub phi: Var,
    /// `batch × 16`.
    pub satisfactions: Var,
    /// `16 × 12`, row-stochastic.
    pub attention: Var,
}

impl LtnParams {
    /// `v = 0` (uniform gating), `w = 0` (φ starts at 0.5), MLP weights
    /// `U(±1/√fan_in)` with zero biases.
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R) -> Result<Self, ModelError> {
        let g = store.add_group(LTN_GROUP, 1e-3, 0.0)?;
        let attention = store.add_tensor(g, "attention", Tensor::zeros(&[NUM_PREDICATES, NUM_FEATURES]))?;
        let importance = store.add_tensor(g, "importance", Tensor::zeros(&[NUM_PREDICATES, 1]))?;
        let dims = [NUM_FEATURES, HIDDEN[0], HIDDEN[1], 1];
        let mut mlps = Vec::with_capacity(NUM_PREDICATES);
        for p in 0..NUM_PREDICATES {
            let mut layer = |i: usize| -> Result<(ParamId, ParamId), ModelError> {
                let (fi, fo) = (dims[i], dims[i + 1]);
                let w = store.add_tensor(g, &format!("p{p}.l{i}.w"), uniform_tensor(&[fi, fo], fi, rng))?;
                let b = store.add_tensor(g, &format!("p{p}.l{i}.b"), Tensor::zeros(&[1, fo]))?;
                Ok((w, b))
            };
            mlps.push(PredicateMlp {
                layers: [layer(0)?, layer(1)?, layer(2)?],
            });
        }
        Ok(Self {
            attention,
            importance,
            mlps,
        })
    }

    /// φ for a `batch × 12` input of normalised features.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<LtnVars, ModelError> {
        let v = g.param(store, self.attention)?;
        let a = g.softmax(v)?;
        let mut pis = Vec::with_capacity(NUM_PREDICATES);
        for (i, mlp) in self.mlps.iter().enumerate() {
            let ai = g.select_rows(a, vec![i])?;
            let mut h = g.mul_row(x, ai)?;
            for (l, (w, b)) in mlp.layers.iter().enumerate() {
                let w = g.param(store, *w)?;
                let b = g.param(store, *b)?;
                h = g.affine(h, w, b)?;
                h = if l < 2 { g.relu(h)? } else { g.sigmoid(h)? };
            }
            pis.push(h);
        }
        let satisfactions = g.concat_cols(&pis)?;
        let w = g.param(store, self.importance)?;
        let s = g.matmul(satisfactions, w)?;
        let phi = g.sigmoid(s)?;
        Ok(LtnVars {
            phi,
            satisfactions,
            attention: a,
        })
    }

    pub fn importance_weights(&self, store: &ParamStore) -> [f64; NUM_PREDICATES] {
        let mut w = [0.0; NUM_PREDICATES];
        w.copy_from_slice(store.get(self.importance).data());
        w
    }

    /// Satisfaction degree of predicate `i` for one input, evaluated directly.
    pub fn predicate_eval(&self, store: &ParamStore, i: usize, x: &[f64; NUM_FEATURES]) -> f64 {
        let a = predicate_attention(store.get(self.attention).row_slice(i));
        let mut h: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x * a).collect();
        for (l, (w, b)) in self.mlps[i].layers.iter().enumerate() {
            let (w, b) = (store.get(*w), store.get(*b));
            let mut out = b.data().to_vec();
            for (r, xv) in h.iter().enumerate() {
                for (o, wv) in out.iter_mut().zip(w.row_slice(r)) {
                    *o += xv * wv;
                }
            }
            h = if l < 2 {
                out.into_iter().map(|v| v.max(0.0)).collect()
            } else {
                out.into_iter().map(sigmoid).collect()
            };
        }
        h[0]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `softmax(v)` with max subtraction.
pub fn predicate_attention(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// The symbolic path's output for one flow.
#[derive(Clone, Debug, PartialEq)]
pub struct LtnOutput {
    pub phi: f64,
    pub satisfactions: [f64; NUM_PREDICATES],
    pub attentions: Vec<[f64; NUM_FEATURES]>,
    pub weights: [f64; NUM_PREDICATES],
    /// `w_i·π_i`.
    pub contributions: [f64; NUM_PREDICATES],
}

impl LtnOutput {
    pub fn new(
        satisfactions: [f64; NUM_PREDICATES],
        attentions: Vec<[f64; NUM_FEATURES]>,
        weights: [f64; NUM_PREDICATES],
        phi: f64,
    ) -> Self {
        let mut contributions = [0.0; NUM_PREDICATES];
        for (c, (w, p)) in contributions.iter_mut().zip(weights.iter().zip(&satisfactions)) {
            *c = w * p;
        }
        Self {
            phi,
            satisfactions,
            attentions,
            weights,
            contributions,
        }
    }

    /// φ rebuilt from the reported weights and satisfactions.
    pub fn recompute_phi(&self) -> f64 {
        sigmoid(self.weights.iter().zip(&self.satisfactions).map(|(w, p)| w * p).sum())
    }

    /// Index of the feature predicate `i` attends to most (first on ties).
    pub fn dominant_feature(&self, i: usize) -> usize {
        let row = &self.attentions[i];
        (0..NUM_FEATURES).fold(0, |best, j| if row[j] > row[best] { j } else { best })
    }
}

/// Predicates ordered by `|w_i·π_i|` descending, ties by ascending index.
pub fn rank_contributions(out: &LtnOutput) -> Vec<(usize, f64)> {
    let mut r: Vec<(usize, f64)> = out.contributions.iter().map(|c| c.abs()).enumerate().collect();
    r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    r
}
