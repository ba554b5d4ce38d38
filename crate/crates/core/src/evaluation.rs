//! Confusion matrices, precision/recall/F1, false-positive rate and the
//! decision-threshold sweep.

use std::fmt::Write as _;

use crate::flowdata::ClassLabel;
use crate::heads::route;
use crate::model::Prediction;
use crate::trainer::combined_f1;

pub const DEFAULT_TAUS: [f64; 5] = [0.80, 0.85, 0.90, 0.95, 0.98];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("label {label} at position {index} outside 0..{k}")]
    LabelOutOfRange { index: usize, label: usize, k: usize },
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("expected a 2×2 matrix, got {0}×{0}")]
    NotBinary(usize),
    #[error("thresholds must be ascending in (0, 1): {0:?}")]
    InvalidThresholds(Vec<f64>),
}

/// `k × k` counts, rows are true classes and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.k).map(|j| self.get(truth, j)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, pred)).sum()
    }
}

pub fn confusion(pred: &[usize], truth: &[usize], k: usize) -> Result<ConfusionMatrix, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    let mut counts = vec![0; k * k];
    for (index, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        for label in [p, t] {
            if label >= k {
                return Err(EvalError::LabelOutOfRange { index, label, k });
            }
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prf1 {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and aggregate precision, recall and F1. Zero denominators give
/// 0; macro averages every class, weighted averages by support.
pub fn prf1(cm: &ConfusionMatrix) -> Prf1 {
    prf1_over(cm, &(0..cm.k).collect::<Vec<_>>())
}

/// [`prf1`] restricted to a subset of classes (the matrix is unchanged).
pub fn prf1_over(cm: &ConfusionMatrix, classes: &[usize]) -> Prf1 {
    let per_class: Vec<ClassMetrics> = classes
        .iter()
        .map(|&c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = ratio(2 * tp, cm.col_sum(c) + cm.row_sum(c));
            ClassMetrics {
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
            }
        })
        .collect();
    let n = per_class.len().max(1) as f64;
    let support: u64 = per_class.iter().map(|m| m.support).sum();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if support == 0 {
            0.0
        } else {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / support as f64
        }
    };
    Prf1 {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        per_class,
    }
}

/// `FP / (FP + TN)` of a binary matrix; 0 when there are no true negatives
/// or false positives.
pub fn fpr(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    if cm.k != 2 {
        return Err(EvalError::NotBinary(cm.k));
    }
    Ok(ratio(cm.get(0, 1), cm.get(0, 1) + cm.get(0, 0)))
}

fn indices(labels: &[ClassLabel]) -> Vec<usize> {
    labels.iter().map(|l| l.index()).collect()
}

fn binary(labels: &[ClassLabel]) -> Vec<usize> {
    labels.iter().map(|l| usize::from(l.binary())).collect()
}

pub fn binary_confusion(pred: &[ClassLabel], truth: &[ClassLabel]) -> Result<ConfusionMatrix, EvalError> {
    confusion(&binary(pred), &binary(truth), 2)
}

/// Macro F1 over {normal, attack}.
pub fn binary_macro_f1(pred: &[ClassLabel], truth: &[ClassLabel]) -> Result<f64, EvalError> {
    Ok(prf1(&binary_confusion(pred, truth)?).macro_f1)
}

/// Six-class matrix over the true-attack rows only.
pub fn attack_confusion(pred: &[ClassLabel], truth: &[ClassLabel]) -> Result<ConfusionMatrix, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    let (p, t): (Vec<usize>, Vec<usize>) = pred
        .iter()
        .zip(truth)
        .filter(|(_, t)| t.is_attack())
        .map(|(p, t)| (p.index(), t.index()))
        .unzip();
    confusion(&p, &t, 6)
}

/// Macro F1 over the five stages, computed on true-attack rows; a missed
/// attack (predicted Normal) counts as a false negative for its stage.
pub fn stage_macro_f1(pred: &[ClassLabel], truth: &[ClassLabel]) -> Result<f64, EvalError> {
    Ok(prf1_over(&attack_confusion(pred, truth)?, &[1, 2, 3, 4, 5]).macro_f1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub attack_f1: f64,
    pub binary_f1: f64,
    pub fpr: f64,
    pub combined_f1: f64,
    pub predicted_attacks: usize,
}

pub fn route_all(preds: &[Prediction], tau: f64) -> Vec<ClassLabel> {
    preds.iter().map(|p| route(p.p_attack, tau, &p.stage_probs)).collect()
}

pub fn threshold_sweep(preds: &[Prediction], truth: &[ClassLabel], taus: &[f64]) -> Result<Vec<SweepRow>, EvalError> {
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch(preds.len(), truth.len()));
    }
    let ascending = taus.windows(2).all(|w| w[0] < w[1]);
    if taus.is_empty() || !ascending || taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(EvalError::InvalidThresholds(taus.to_vec()));
    }
    taus.iter()
        .map(|&tau| {
            let routed = route_all(preds, tau);
            let bcm = binary_confusion(&routed, truth)?;
            let binary_f1 = prf1(&bcm).macro_f1;
            let attack_f1 = stage_macro_f1(&routed, truth)?;
            Ok(SweepRow {
                tau,
                attack_f1,
                binary_f1,
                fpr: fpr(&bcm)?,
                combined_f1: combined_f1(binary_f1, attack_f1),
                predicted_attacks: routed.iter().filter(|l| l.is_attack()).count(),
            })
        })
        .collect()
}

/// Metrics of the routed pipeline at one threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tau: f64,
    pub binary_cm: ConfusionMatrix,
    pub binary: Prf1,
    pub fpr: f64,
    /// Five-stage metrics on true-attack rows.
    pub stages: Prf1,
    pub six_class_cm: ConfusionMatrix,
    pub six_class: Prf1,
    pub sweep: Vec<SweepRow>,
}

pub fn evaluate(preds: &[Prediction], truth: &[ClassLabel], tau: f64, taus: &[f64]) -> Result<EvalReport, EvalError> {
    let routed = route_all(preds, tau);
    let binary_cm = binary_confusion(&routed, truth)?;
    let six_class_cm = confusion(&indices(&routed), &indices(truth), 6)?;
    Ok(EvalReport {
        tau,
        binary: prf1(&binary_cm),
        fpr: fpr(&binary_cm)?,
        stages: prf1_over(&attack_confusion(&routed, truth)?, &[1, 2, 3, 4, 5]),
        six_class: prf1(&six_class_cm),
        binary_cm,
        six_class_cm,
        sweep: threshold_sweep(preds, truth, taus)?,
    })
}

pub fn sweep_text(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>9}  {:>9}  {:>9}  {:>9}  {:>11}\n",
        "Threshold", "Attack F1", "Binary F1", "FP Rate", "Combined F1"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>9.2}  {:>9.4}  {:>9.4}  {:>9.4}  {:>11.4}",
            r.tau, r.attack_f1, r.binary_f1, r.fpr, r.combined_f1
        );
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("threshold,attack_f1,binary_f1,fp_rate,combined_f1\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.tau, r.attack_f1, r.binary_f1, r.fpr, r.combined_f1);
    }
    s
}

pub fn confusion_text(cm: &ConfusionMatrix, names: &[&str]) -> String {
    let w = names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:>w$}", "true\\pred");
    for n in names {
        let _ = write!(s, " {n:>w$}");
    }
    s.push('\n');
    for (i, n) in names.iter().enumerate() {
        let _ = write!(s, "{n:>w$}");
        for j in 0..cm.k {
            let _ = write!(s, " {:>w$}", cm.get(i, j));
        }
        s.push('\n');
    }
    s
}

pub fn confusion_csv(cm: &ConfusionMatrix, names: &[&str]) -> String {
    let mut s = format!("true,{}\n", names.join(","));
    for (i, n) in names.iter().enumerate() {
        let row: Vec<String> = (0..cm.k).map(|j| cm.get(i, j).to_string()).collect();
        let _ = writeln!(s, "{n},{}", row.join(","));
    }
    s
}

fn prf1_table(title: &str, names: &[&str], m: &Prf1) -> String {
    let mut s = format!("{title}\n{:<18} {:>9} {:>9} {:>9} {:>8}\n", "Class", "Precision", "Recall", "F1", "Support");
    for (n, c) in names.iter().zip(&m.per_class) {
        let _ = writeln!(s, "{n:<18} {:>9.4} {:>9.4} {:>9.4} {:>8}", c.precision, c.recall, c.f1, c.support);
    }
    let _ = writeln!(s, "{:<18} {:>9.4} {:>9.4} {:>9.4}", "macro", m.macro_precision, m.macro_recall, m.macro_f1);
    let _ = writeln!(s, "{:<18} {:>9.4} {:>9.4} {:>9.4}", "weighted", m.weighted_precision, m.weighted_recall, m.weighted_f1);
    s
}

pub fn report_text(r: &EvalReport) -> String {
    let stage_names: Vec<&str> = ClassLabel::STAGES.iter().map(|c| c.name()).collect();
    let all_names: Vec<&str> = ClassLabel::ALL.iter().map(|c| c.name()).collect();
    let mut s = format!("Decision threshold: {}\n\n", r.tau);
    s += &prf1_table("Binary classification", &["Normal", "Attack"], &r.binary);
    let _ = writeln!(s, "False positive rate: {:.4}\n", r.fpr);
    s += &prf1_table("Attack stage classification (true attacks)", &stage_names, &r.stages);
    s.push('\n');
    s += &prf1_table("Six-class", &all_names, &r.six_class);
    s += "\nConfusion matrix\n";
    s += &confusion_text(&r.six_class_cm, &all_names);
    s += "\nThreshold sweep\n";
    s += &sweep_text(&r.sweep);
    s
}
