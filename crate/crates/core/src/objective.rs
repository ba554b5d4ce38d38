//! Training objective: focal binary loss, stage-weighted cross-entropy on
//! true attacks, and a consistency term tying φ to the binary label.

use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::flowdata::ClassLabel;
use crate::heads::NUM_STAGES;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the focal binary term.
    pub alpha: f64,
    /// Weight of the stage cross-entropy term.
    pub beta: f64,
    /// Weight of the φ consistency term.
    pub gamma: f64,
    pub focal_gamma: f64,
    /// Binary class weights `[normal, attack]`.
    pub class_weights: [f64; 2],
    /// Per-stage weights in [`ClassLabel::STAGES`] order.
    pub stage_weights: [f64; NUM_STAGES],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.5,
            gamma: 0.2,
            focal_gamma: 2.0,
            class_weights: [1.0, 10.0],
            stage_weights: [6.0, 1.5, 1.2, 0.4, 0.8],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DiffError> {
        let positive = [self.alpha, self.beta, self.gamma]
            .iter()
            .chain(&self.class_weights)
            .chain(&self.stage_weights)
            .all(|w| *w > 0.0 && w.is_finite());
        if positive && self.focal_gamma >= 0.0 && self.focal_gamma.is_finite() {
            Ok(())
        } else {
            Err(DiffError::InvalidHyperparameter(format!("{self:?}")))
        }
    }
}

/// Mean of `−w(y)·(1 − p_t)^γ·log p_t` over the batch, `p_t` taken from a
/// log-softmax of the `batch × 2` logits.
pub fn focal_loss(g: &mut Graph, logits: Var, y: &[u8], w: &LossWeights) -> Result<Var, DiffError> {
    let n = y.len();
    let ls = g.log_softmax(logits)?;
    let log_pt = g.pick_cols(ls, y.iter().map(|&c| usize::from(c)).collect())?;
    let log_pt = g.clamp(log_pt, LOG_FLOOR.ln(), 0.0)?;
    let pt = g.exp(log_pt)?;
    let neg = g.scale(pt, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let one_minus = g.clamp(one_minus, 0.0, 1.0)?;
    let modulating = g.powf(one_minus, w.focal_gamma)?;
    let per = g.elementwise_mul(modulating, log_pt)?;
    let coeffs = y
        .iter()
        .map(|&c| -w.class_weights[usize::from(c)] / n as f64)
        .collect();
    g.weighted_sum(per, coeffs)
}

/// Mean over true-attack rows of `−w(stage)·log p_stage`; 0 when the batch
/// has no attacks. Normal rows receive no gradient.
pub fn weighted_ce(g: &mut Graph, stage_logits: Var, labels: &[ClassLabel], w: &LossWeights) -> Result<Var, DiffError> {
    let attack_rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_attack()).collect();
    if attack_rows.is_empty() {
        return g.input(Tensor::scalar(0.0));
    }
    let stages: Vec<usize> = attack_rows
        .iter()
        .map(|&i| labels[i].stage_index().expect("attack row"))
        .collect();
    let m = attack_rows.len() as f64;
    let sel = g.select_rows(stage_logits, attack_rows)?;
    let ls = g.log_softmax(sel)?;
    let lp = g.pick_cols(ls, stages.clone())?;
    let lp = g.clamp(lp, LOG_FLOOR.ln(), 0.0)?;
    let coeffs = stages.iter().map(|&s| -w.stage_weights[s] / m).collect();
    g.weighted_sum(lp, coeffs)
}

/// Mean binary cross-entropy of φ (`batch × 1`) against the binary label.
pub fn consistency_bce(g: &mut Graph, phi: Var, y: &[u8]) -> Result<Var, DiffError> {
    let n = y.len() as f64;
    let p = g.clamp(phi, LOG_FLOOR, 1.0 - LOG_FLOOR)?;
    let log_p = g.log(p)?;
    let neg = g.scale(p, -1.0)?;
    let q = g.add_scalar(neg, 1.0)?;
    let log_q = g.log(q)?;
    let both = g.concat_cols(&[log_p, log_q])?;
    let coeffs = y
        .iter()
        .flat_map(|&c| if c == 1 { [-1.0 / n, 0.0] } else { [0.0, -1.0 / n] })
        .collect();
    g.weighted_sum(both, coeffs)
}

/// `α·l_b + β·l_a + γ·l_l`.
pub fn total_loss(g: &mut Graph, l_b: Var, l_a: Var, l_l: Var, w: &LossWeights) -> Result<Var, DiffError> {
    let parts = g.concat_cols(&[l_b, l_a, l_l])?;
    g.weighted_sum(parts, vec![w.alpha, w.beta, w.gamma])
}

/// Scalar form of [`total_loss`].
pub fn combine(l_b: f64, l_a: f64, l_l: f64, w: &LossWeights) -> f64 {
    w.alpha * l_b + w.beta * l_a + w.gamma * l_l
}
