//! Feature-token transformer encoder: each of the 12 features becomes its own
//! token `e_i = w_i·x_i + b_i`, framed by learned `[CLS]` and `[SEP]` tokens.

use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use crate::flowdata::NUM_FEATURES;
use crate::model::{uniform_tensor, ModelError};

/// Tokens per flow: `[CLS]`, 12 feature tokens, `[SEP]`.
pub const SEQ_LEN: usize = NUM_FEATURES + 2;

pub const FEATURE_ENCODER_GROUP: &str = "feature_encoder";
pub const ENCODER_NORM_GROUP: &str = "encoder.norm";

pub fn block_group(layer: usize) -> String {
    format!("encoder.block{layer}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub feedforward: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            feedforward: 256,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.hidden > 0
            && self.hidden % 2 == 0
            && self.layers > 0
            && self.heads > 0
            && self.hidden % self.heads == 0
            && self.feedforward > 0
            && (0.0..1.0).contains(&self.dropout);
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct TokenizerParams {
    pub w: ParamId,
    pub b: ParamId,
    pub cls: ParamId,
    pub sep: ParamId,
    pub pos: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub tokenizer: TokenizerParams,
    blocks: Vec<BlockParams>,
    final_norm: (ParamId, ParamId),
}

/// Graph handles produced by one encoder pass over a batch.
pub struct EncoderOutput {
    /// `batch × H` final hidden states at the `[CLS]` position.
    pub cls: Var,
    /// One attention node per layer; see [`Graph::attention_weights`].
    pub attention: Vec<Var>,
}

fn add_affine<R: Rng>(
    store: &mut ParamStore,
    group: usize,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId), ModelError> {
    let w = store.add_tensor(group, &format!("{name}.w"), uniform_tensor(&[fan_in, fan_out], fan_in, rng))?;
    let b = store.add_tensor(group, &format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
    Ok((w, b))
}

fn add_norm(store: &mut ParamStore, group: usize, name: &str, h: usize) -> Result<(ParamId, ParamId), ModelError> {
    let g = store.add_tensor(group, &format!("{name}.gain"), Tensor::full(&[1, h], 1.0))?;
    let b = store.add_tensor(group, &format!("{name}.bias"), Tensor::zeros(&[1, h]))?;
    Ok((g, b))
}

impl EncoderParams {
    /// Registers the encoder groups in `store`. Embedding tables are drawn
    /// from `U(-1, 1)`, projections from `U(±1/√fan_in)`, norms start at
    /// identity.
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let h = cfg.hidden;
        let fg = store.add_group(FEATURE_ENCODER_GROUP, 1e-3, 0.0)?;
        let tokenizer = TokenizerParams {
            w: store.add_tensor(fg, "token.w", uniform_tensor(&[NUM_FEATURES, h], 1, rng))?,
            b: store.add_tensor(fg, "token.b", uniform_tensor(&[NUM_FEATURES, h], 1, rng))?,
            cls: store.add_tensor(fg, "cls", uniform_tensor(&[1, h], 1, rng))?,
            sep: store.add_tensor(fg, "sep", uniform_tensor(&[1, h], 1, rng))?,
            pos: store.add_tensor(fg, "position", uniform_tensor(&[SEQ_LEN, h], 1, rng))?,
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let g = store.add_group(&block_group(l), 1e-3, 0.0)?;
            blocks.push(BlockParams {
                ln1: add_norm(store, g, "ln1", h)?,
                q: add_affine(store, g, "query", h, h, rng)?,
                k: add_affine(store, g, "key", h, h, rng)?,
                v: add_affine(store, g, "value", h, h, rng)?,
                o: add_affine(store, g, "output", h, h, rng)?,
                ln2: add_norm(store, g, "ln2", h)?,
                ff1: add_affine(store, g, "ff1", h, cfg.feedforward, rng)?,
                ff2: add_affine(store, g, "ff2", cfg.feedforward, h, rng)?,
            });
        }
        let ng = store.add_group(ENCODER_NORM_GROUP, 1e-3, 0.0)?;
        let final_norm = add_norm(store, ng, "final", h)?;
        Ok(Self {
            tokenizer,
            blocks,
            final_norm,
        })
    }

    /// Token matrix `(batch·14) × H` for a `batch × 12` input node.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let t = &self.tokenizer;
        let w = g.param(store, t.w)?;
        let b = g.param(store, t.b)?;
        let cls = g.param(store, t.cls)?;
        let sep = g.param(store, t.sep)?;
        let pos = g.param(store, t.pos)?;
        Ok(g.embed_tokens(x, w, b, cls, sep, pos)?)
    }

    /// Pre-norm transformer stack followed by a final layer norm.
    pub fn encode<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        cfg: &EncoderConfig,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<EncoderOutput, ModelError> {
        let rows = g.value(tokens).rows();
        if rows % SEQ_LEN != 0 || g.value(tokens).cols() != cfg.hidden {
            return Err(ModelError::ShapeMismatch(format!(
                "tokens {:?} for hidden {}",
                g.value(tokens).shape(),
                cfg.hidden
            )));
        }
        let affine = |g: &mut Graph, x: Var, p: (ParamId, ParamId)| -> Result<Var, ModelError> {
            let w = g.param(store, p.0)?;
            let b = g.param(store, p.1)?;
            Ok(g.affine(x, w, b)?)
        };
        let norm = |g: &mut Graph, x: Var, p: (ParamId, ParamId)| -> Result<Var, ModelError> {
            let gain = g.param(store, p.0)?;
            let bias = g.param(store, p.1)?;
            Ok(g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
        };
        let mut t = tokens;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = norm(g, t, blk.ln1)?;
            let q = affine(g, h, blk.q)?;
            let k = affine(g, h, blk.k)?;
            let v = affine(g, h, blk.v)?;
            let a = g.scaled_dot_attention(q, k, v, SEQ_LEN, cfg.heads)?;
            attention.push(a);
            let mut o = affine(g, a, blk.o)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                o = g.dropout(o, cfg.dropout, rng)?;
            }
            t = g.add(t, o)?;
            let h = norm(g, t, blk.ln2)?;
            let f = affine(g, h, blk.ff1)?;
            let f = g.relu(f)?;
            let mut f = affine(g, f, blk.ff2)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = g.dropout(f, cfg.dropout, rng)?;
            }
            t = g.add(t, f)?;
        }
        let out = norm(g, t, self.final_norm)?;
        let cls_rows = (0..rows / SEQ_LEN).map(|b| b * SEQ_LEN).collect();
        let cls = g.select_rows(out, cls_rows)?;
        Ok(EncoderOutput { cls, attention })
    }
}

/// Attention matrices of one flow: `layers × heads × 14 × 14`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub layers: usize,
    pub heads: usize,
    data: Vec<f64>,
}

impl AttentionMaps {
    pub fn new(layers: usize, heads: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != layers * heads * SEQ_LEN * SEQ_LEN {
            return Err(ModelError::ShapeMismatch(format!(
                "{} attention values for {layers} layers × {heads} heads",
                data.len()
            )));
        }
        Ok(Self { layers, heads, data })
    }

    /// Maps of sample `sample` from the per-layer attention nodes of a batch pass.
    pub fn from_graph(g: &Graph, attention: &[Var], heads: usize, sample: usize) -> Result<Self, ModelError> {
        let per = heads * SEQ_LEN * SEQ_LEN;
        let mut data = Vec::with_capacity(attention.len() * per);
        for a in attention {
            let w = g
                .attention_weights(*a)
                .ok_or_else(|| ModelError::ShapeMismatch("node is not an attention node".into()))?;
            data.extend_from_slice(&w[sample * per..(sample + 1) * per]);
        }
        Self::new(attention.len(), heads, data)
    }

    /// Row `query` of the attention matrix of `(layer, head)`.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let base = ((layer * self.heads + head) * SEQ_LEN + query) * SEQ_LEN;
        &self.data[base..base + SEQ_LEN]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-feature importance: `[CLS]`-row attention to the 12 feature tokens,
/// summed over every layer and head and renormalised to sum to 1.
pub fn aggregate_attention(maps: &AttentionMaps) -> [f64; NUM_FEATURES] {
    let mut imp = [0.0; NUM_FEATURES];
    for l in 0..maps.layers {
        for h in 0..maps.heads {
            let row = maps.row(l, h, 0);
            for (i, v) in imp.iter_mut().enumerate() {
                *v += row[i + 1];
            }
        }
    }
    let total: f64 = imp.iter().sum();
    if total > 0.0 {
        for v in &mut imp {
            *v /= total;
        }
    } else {
        imp = [1.0 / NUM_FEATURES as f64; NUM_FEATURES];
    }
    imp
}
