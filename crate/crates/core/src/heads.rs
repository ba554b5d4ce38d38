//! Two-stage classification heads and threshold routing.

use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::flowdata::ClassLabel;
use crate::model::{uniform_tensor, ModelError};

pub const BINARY_HEAD_GROUP: &str = "binary_head";
pub const ATTACK_HEAD_GROUP: &str = "attack_head";
pub const BINARY_HIDDEN: usize = 256;
pub const ATTACK_HIDDEN: usize = 384;
pub const NUM_STAGES: usize = 5;

/// Default stage-1 decision threshold.
pub const DEFAULT_TAU: f64 = 0.98;

#[derive(Clone, Debug)]
struct Mlp {
    hidden: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl Mlp {
    fn init<R: Rng>(store: &mut ParamStore, group: &str, dims: [usize; 3], rng: &mut R) -> Result<Self, ModelError> {
        let g = store.add_group(group, 1e-3, 0.0)?;
        let mut layer = |name: &str, fi: usize, fo: usize| -> Result<(ParamId, ParamId), ModelError> {
            let w = store.add_tensor(g, &format!("{name}.w"), uniform_tensor(&[fi, fo], fi, rng))?;
            let b = store.add_tensor(g, &format!("{name}.b"), Tensor::zeros(&[1, fo]))?;
            Ok((w, b))
        };
        Ok(Self {
            hidden: layer("hidden", dims[0], dims[1])?,
            out: layer("out", dims[1], dims[2])?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let w = g.param(store, self.hidden.0)?;
        let b = g.param(store, self.hidden.1)?;
        let h = g.affine(x, w, b)?;
        let h = g.relu(h)?;
        let w = g.param(store, self.out.0)?;
        let b = g.param(store, self.out.1)?;
        Ok(g.affine(h, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    binary: Mlp,
    attack: Mlp,
}

impl HeadParams {
    pub fn init<R: Rng>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Result<Self, ModelError> {
        Ok(Self {
            binary: Mlp::init(store, BINARY_HEAD_GROUP, [hidden, BINARY_HIDDEN, 2], rng)?,
            attack: Mlp::init(store, ATTACK_HEAD_GROUP, [hidden, ATTACK_HIDDEN, NUM_STAGES], rng)?,
        })
    }

    /// `batch × 2` logits (normal, attack).
    pub fn binary_logits(&self, g: &mut Graph, store: &ParamStore, h_cls: Var) -> Result<Var, ModelError> {
        self.binary.forward(g, store, h_cls)
    }

    /// `batch × 5` stage logits.
    pub fn stage_logits(&self, g: &mut Graph, store: &ParamStore, h_cls: Var) -> Result<Var, ModelError> {
        self.attack.forward(g, store, h_cls)
    }
}

/// Probability of the attack class from binary logits.
pub fn p_attack(logits: [f64; 2]) -> f64 {
    crate::ltn::sigmoid(logits[1] - logits[0])
}

pub fn stage_probs(logits: &[f64]) -> [f64; NUM_STAGES] {
    let p = crate::ltn::predicate_attention(logits);
    std::array::from_fn(|i| p[i])
}

/// Hierarchical decision for one flow.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub p_attack: f64,
    pub stage_probs: [f64; NUM_STAGES],
    pub final_label: ClassLabel,
    pub tau: f64,
}

impl Decision {
    pub fn new(p_attack: f64, stage_probs: [f64; NUM_STAGES], tau: f64) -> Self {
        Self {
            p_attack,
            stage_probs,
            final_label: route(p_attack, tau, &stage_probs),
            tau,
        }
    }
}

/// Index of the largest value; the first wins ties.
pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Normal when `p_attack < tau`; otherwise the most probable stage, ties
/// going to the earliest stage.
pub fn route(p_attack: f64, tau: f64, stage_probs: &[f64; NUM_STAGES]) -> ClassLabel {
    if p_attack < tau {
        ClassLabel::Normal
    } else {
        ClassLabel::from_stage_index(argmax(stage_probs)).expect("five stages")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_closed_forms() {
        assert_eq!(p_attack([0.0, 0.0]), 0.5);
        assert!((p_attack([0.0, 99f64.ln()]) - 0.99).abs() < 1e-12);
    }

    #[test]
    fn zero_params_give_uniform_outputs() {
        let mut s = ParamStore::new();
        let h = HeadParams::init(&mut s, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in s.ids().collect::<Vec<_>>() {
            s.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 8], 0.3)).unwrap();
        let b = h.binary_logits(&mut g, &s, x).unwrap();
        let a = h.stage_logits(&mut g, &s, x).unwrap();
        let bl = g.value(b).data();
        assert_eq!(p_attack([bl[0], bl[1]]), 0.5);
        assert!(stage_probs(g.value(a).data()).iter().all(|p| *p == 0.2));
    }

    #[test]
    fn attack_head_matches_hand_forward() {
        let mut s = ParamStore::new();
        let h = HeadParams::init(&mut s, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = [0.5, -1.0, 2.0, 0.25];
        let mut g = Graph::new();
        let xv = g.input(Tensor::matrix(1, 4, x.to_vec()).unwrap()).unwrap();
        let a = h.stage_logits(&mut g, &s, xv).unwrap();
        let got = stage_probs(g.value(a).data());

        let get = |name: &str| s.get(s.id(name).unwrap()).clone();
        let (w1, b1, w2, b2) = (get("attack_head/hidden.w"), get("attack_head/hidden.b"), get("attack_head/out.w"), get("attack_head/out.b"));
        let hidden: Vec<f64> = (0..ATTACK_HIDDEN)
            .map(|j| (b1.data()[j] + (0..4).map(|i| x[i] * w1.at(i, j)).sum::<f64>()).max(0.0))
            .collect();
        let logits: Vec<f64> = (0..NUM_STAGES)
            .map(|k| b2.data()[k] + (0..ATTACK_HIDDEN).map(|j| hidden[j] * w2.at(j, k)).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..NUM_STAGES {
            assert!((got[k] - logits[k].exp() / z).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_head_gradients() {
        let mut s = ParamStore::new();
        let h = HeadParams::init(&mut s, 6, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let f = |g: &mut Graph, s: &ParamStore| {
            let x = g.input(Tensor::matrix(2, 6, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?)?;
            let l = h.binary_logits(g, s, x).map_err(|e| match e {
                ModelError::Diff(d) => d,
                other => panic!("{other}"),
            })?;
            let ls = g.log_softmax(l)?;
            let picked = g.pick_cols(ls, vec![1, 0])?;
            g.sum(picked)
        };
        let r = grad_check(&mut s, f, &GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn routing_rules() {
        let mut sp = [0.1, 0.1, 0.1, 0.6, 0.1];
        assert_eq!(route(0.5, 0.98, &sp), ClassLabel::Normal);
        assert_eq!(route(0.99, 0.98, &sp), ClassLabel::Pivoting);
        assert_eq!(route(0.98, 0.98, &sp), ClassLabel::Pivoting);
        sp = [0.3, 0.3, 0.1, 0.2, 0.1];
        assert_eq!(route(1.0, 0.5, &sp), ClassLabel::InitialCompromise);
        let d = Decision::new(0.2, sp, 0.5);
        assert_eq!(d.final_label, ClassLabel::Normal);
    }
}
