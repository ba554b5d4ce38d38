//! The full neurosymbolic model: feature-token encoder and classification
//! heads on the neural path, predicate network on the symbolic path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DiffError, Graph, ParamStore, Tensor, Var};
use crate::encoder::{AttentionMaps, EncoderConfig, EncoderParams};
use crate::flowdata::{ClassLabel, Dataset, NUM_FEATURES};
use crate::heads::{self, Decision, HeadParams, NUM_STAGES};
use crate::ltn::{LtnOutput, LtnParams, NUM_PREDICATES};
use crate::preprocess::{Normalizer, PreprocessError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input in row {0}")]
    NonFiniteInput(usize),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// `U(−1/√fan_in, 1/√fan_in)` initialisation.
pub fn uniform_tensor<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Graph handles of one batched forward pass.
pub struct ForwardVars {
    pub binary_logits: Var,
    pub stage_logits: Var,
    pub phi: Var,
    pub satisfactions: Var,
    pub predicate_attention: Var,
    pub attention: Vec<Var>,
}

/// Neural-path outputs for one flow.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p_attack: f64,
    pub stage_probs: [f64; NUM_STAGES],
}

/// Everything computed for one flow, for explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrace {
    pub prediction: Prediction,
    pub attention: AttentionMaps,
    pub ltn: LtnOutput,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: EncoderConfig,
    pub store: ParamStore,
    encoder: EncoderParams,
    ltn: LtnParams,
    heads: HeadParams,
}

/// Rows per graph during inference.
const INFERENCE_BATCH: usize = 256;

impl Model {
    /// Freshly initialised model; parameter draws depend only on `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config, &mut rng)?;
        let heads = HeadParams::init(&mut store, config.hidden, &mut rng)?;
        let ltn = LtnParams::init(&mut store, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            ltn,
            heads,
        })
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn ltn(&self) -> &LtnParams {
        &self.ltn
    }

    /// Records both paths for a batch of normalised rows, reading
    /// parameters from `store` (which must share this model's layout).
    pub fn forward_with<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &[[f64; NUM_FEATURES]],
        dropout_rng: Option<&mut R>,
    ) -> Result<ForwardVars, ModelError> {
        if let Some(bad) = x.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(ModelError::NonFiniteInput(bad));
        }
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        let xv = g.input(Tensor::matrix(x.len(), NUM_FEATURES, flat)?)?;
        let tokens = self.encoder.embed(g, store, xv)?;
        let enc = self.encoder.encode(g, store, tokens, &self.config, dropout_rng)?;
        let binary_logits = self.heads.binary_logits(g, store, enc.cls)?;
        let stage_logits = self.heads.stage_logits(g, store, enc.cls)?;
        let ltn = self.ltn.forward(g, store, xv)?;
        Ok(ForwardVars {
            binary_logits,
            stage_logits,
            phi: ltn.phi,
            satisfactions: ltn.satisfactions,
            predicate_attention: ltn.attention,
            attention: enc.attention,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: &[[f64; NUM_FEATURES]]) -> Result<ForwardVars, ModelError> {
        self.forward_with::<ChaCha8Rng>(g, &self.store, x, None)
    }

    /// Attack probability and stage distribution for every row.
    pub fn predict(&self, x: &[[f64; NUM_FEATURES]]) -> Result<Vec<Prediction>, ModelError> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(INFERENCE_BATCH) {
            let mut g = Graph::new();
            let f = self.forward(&mut g, chunk)?;
            let bl = g.value(f.binary_logits);
            let sl = g.value(f.stage_logits);
            for r in 0..chunk.len() {
                let b = bl.row_slice(r);
                out.push(Prediction {
                    p_attack: heads::p_attack([b[0], b[1]]),
                    stage_probs: heads::stage_probs(sl.row_slice(r)),
                });
            }
        }
        Ok(out)
    }

    /// Full trace of one flow: prediction, attention maps and LTN internals.
    pub fn trace(&self, x: &[f64; NUM_FEATURES]) -> Result<FlowTrace, ModelError> {
        self.trace_batch(std::slice::from_ref(x)).map(|mut v| v.remove(0))
    }

    pub fn trace_batch(&self, x: &[[f64; NUM_FEATURES]]) -> Result<Vec<FlowTrace>, ModelError> {
        let mut out = Vec::with_capacity(x.len());
        let weights = self.ltn.importance_weights(&self.store);
        for chunk in x.chunks(INFERENCE_BATCH) {
            let mut g = Graph::new();
            let f = self.forward(&mut g, chunk)?;
            let a = g.value(f.predicate_attention);
            let attentions: Vec<[f64; NUM_FEATURES]> = (0..NUM_PREDICATES)
                .map(|i| std::array::from_fn(|j| a.at(i, j)))
                .collect();
            for r in 0..chunk.len() {
                let b = g.value(f.binary_logits).row_slice(r);
                let prediction = Prediction {
                    p_attack: heads::p_attack([b[0], b[1]]),
                    stage_probs: heads::stage_probs(g.value(f.stage_logits).row_slice(r)),
                };
                let pis = g.value(f.satisfactions).row_slice(r);
                let ltn = LtnOutput::new(
                    std::array::from_fn(|i| pis[i]),
                    attentions.clone(),
                    weights,
                    g.value(f.phi).data()[r],
                );
                let attention = AttentionMaps::from_graph(&g, &f.attention, self.config.heads, r)?;
                out.push(FlowTrace {
                    prediction,
                    attention,
                    ltn,
                });
            }
        }
        Ok(out)
    }
}

/// A trained model with its fitted normaliser and decision threshold,
/// operating on raw flow records.
#[derive(Clone, Debug)]
pub struct Detector {
    pub model: Model,
    pub normalizer: Normalizer,
    pub tau: f64,
}

impl Detector {
    pub fn normalize(&self, ds: &Dataset) -> Result<Vec<[f64; NUM_FEATURES]>, ModelError> {
        Ok(self.normalizer.transform(ds)?)
    }

    pub fn predict(&self, ds: &Dataset) -> Result<Vec<Prediction>, ModelError> {
        self.model.predict(&self.normalize(ds)?)
    }

    pub fn decide(&self, ds: &Dataset) -> Result<Vec<Decision>, ModelError> {
        Ok(self
            .predict(ds)?
            .into_iter()
            .map(|p| Decision::new(p.p_attack, p.stage_probs, self.tau))
            .collect())
    }

    pub fn classify(&self, ds: &Dataset) -> Result<Vec<ClassLabel>, ModelError> {
        Ok(self.decide(ds)?.into_iter().map(|d| d.final_label).collect())
    }
}
