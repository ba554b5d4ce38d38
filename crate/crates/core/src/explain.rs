//! Per-flow decision-pathway reports and the statistical validation of
//! attention-based feature importance.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::aggregate_attention;
use crate::flowdata::{ClassLabel, Dataset, FeatureSchema, FlowRecord, NUM_FEATURES};
use crate::heads::{Decision, NUM_STAGES};
use crate::ltn::{rank_contributions, LtnOutput};
use crate::model::{Detector, ModelError};
use crate::preprocess::{mean, sample_variance, t_two_sided_p, PreprocessError};

/// Group size used when none is given.
pub const DEFAULT_GROUP_SIZE: usize = 50;
pub const MIN_GROUP_SIZE: usize = 30;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("insufficient samples: {attacks} attack and {normals} normal flows, need {MIN_GROUP_SIZE} each")]
    InsufficientSamples { attacks: usize, normals: usize },
    #[error("unknown report format `{0}` (expected text, kv or csv)")]
    UnknownFormat(String),
    #[error("flow id {id} out of range ({len} flows)")]
    UnknownFlow { id: usize, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImportance {
    pub feature: String,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredicateSummary {
    pub index: usize,
    pub weight: f64,
    pub satisfaction: f64,
    /// `w_i·π_i`.
    pub contribution: f64,
    pub dominant_feature: String,
    /// `"high <feature>"`.
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationRecord {
    pub flow_id: usize,
    pub routed: ClassLabel,
    pub p_attack: f64,
    pub tau: f64,
    pub stage_probs: [f64; NUM_STAGES],
    pub importances: [f64; NUM_FEATURES],
    pub ltn: LtnOutput,
    pub top_features: Vec<FeatureImportance>,
    pub top_predicates: Vec<PredicateSummary>,
}

impl ExplanationRecord {
    /// The routed stage; `None` for flows routed Normal.
    pub fn stage(&self) -> Option<ClassLabel> {
        self.routed.is_attack().then_some(self.routed)
    }
}

fn check_schema(detector: &Detector, schema: &FeatureSchema) -> Result<(), ExplainError> {
    detector.normalizer.check_schema(schema).map_err(|e| match e {
        PreprocessError::SchemaMismatch(m) => ExplainError::SchemaMismatch(m),
        other => ExplainError::SchemaMismatch(other.to_string()),
    })
}

fn build_record(
    detector: &Detector,
    flow_id: usize,
    trace: crate::model::FlowTrace,
    top_k: usize,
) -> ExplanationRecord {
    let names = detector.normalizer.names.clone();
    let decision = Decision::new(trace.prediction.p_attack, trace.prediction.stage_probs, detector.tau);
    let importances = aggregate_attention(&trace.attention);

    let mut order: Vec<usize> = (0..NUM_FEATURES).collect();
    order.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    let top_features = order
        .iter()
        .take(top_k)
        .map(|&i| FeatureImportance {
            feature: names[i].clone(),
            importance: importances[i],
        })
        .collect();

    let top_predicates = rank_contributions(&trace.ltn)
        .into_iter()
        .take(top_k)
        .map(|(i, _)| {
            let feature = names[trace.ltn.dominant_feature(i)].clone();
            PredicateSummary {
                index: i,
                weight: trace.ltn.weights[i],
                satisfaction: trace.ltn.satisfactions[i],
                contribution: trace.ltn.contributions[i],
                label: format!("high {feature}"),
                dominant_feature: feature,
            }
        })
        .collect();

    ExplanationRecord {
        flow_id,
        routed: decision.final_label,
        p_attack: decision.p_attack,
        tau: decision.tau,
        stage_probs: decision.stage_probs,
        importances,
        ltn: trace.ltn,
        top_features,
        top_predicates,
    }
}

/// Runs both paths on one raw record and collects its decision pathway.
pub fn explain_flow(
    detector: &Detector,
    schema: &FeatureSchema,
    flow_id: usize,
    record: &FlowRecord,
    top_k: usize,
) -> Result<ExplanationRecord, ExplainError> {
    check_schema(detector, schema)?;
    let x = detector.normalizer.apply(record);
    let trace = detector.model.trace(&x)?;
    Ok(build_record(detector, flow_id, trace, top_k))
}

/// Explains the flow at position `flow_id` of `ds`.
pub fn explain_in(detector: &Detector, ds: &Dataset, flow_id: usize, top_k: usize) -> Result<ExplanationRecord, ExplainError> {
    let record = ds.records.get(flow_id).ok_or(ExplainError::UnknownFlow {
        id: flow_id,
        len: ds.len(),
    })?;
    explain_flow(detector, &ds.schema, flow_id, record, top_k)
}

/// Attention importances for a batch of raw records.
pub fn importances(detector: &Detector, records: &[FlowRecord]) -> Result<Vec<[f64; NUM_FEATURES]>, ExplainError> {
    let x: Vec<[f64; NUM_FEATURES]> = records.iter().map(|r| detector.normalizer.apply(r)).collect();
    Ok(detector
        .model
        .trace_batch(&x)?
        .iter()
        .map(|t| aggregate_attention(&t.attention))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureValidation {
    pub feature: String,
    pub mean_attack: f64,
    pub mean_normal: f64,
    pub sd_attack: f64,
    pub sd_normal: f64,
    pub t: f64,
    pub p: f64,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct XaiValidationReport {
    pub n_attack: usize,
    pub n_normal: usize,
    /// In schema order.
    pub features: Vec<FeatureValidation>,
    pub significant_05: usize,
    pub significant_001: usize,
    pub large_effect: usize,
    /// Mean over features and groups of the within-group standard deviation.
    pub consistency: f64,
}

impl XaiValidationReport {
    /// Features ordered by `|d|` descending, ties in schema order.
    pub fn by_effect(&self) -> Vec<&FeatureValidation> {
        let mut v: Vec<&FeatureValidation> = self.features.iter().collect();
        v.sort_by(|a, b| b.d.abs().total_cmp(&a.d.abs()));
        v
    }

    pub fn significant(&self, alpha: f64) -> Vec<&str> {
        self.features
            .iter()
            .filter(|f| f.p < alpha)
            .map(|f| f.feature.as_str())
            .collect()
    }
}

/// Welch t, two-sided p and Cohen's d, tolerating zero variances: two
/// constant groups give `p = 1, d = 0` when equal and `p = 0, d = ±∞`
/// otherwise.
pub fn group_statistics(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a), sample_variance(b));
    let diff = mean(a) - mean(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return if diff == 0.0 {
            (0.0, 1.0, 0.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0, diff.signum() * f64::INFINITY)
        };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    (t, t_two_sided_p(t, df), diff / pooled)
}

/// Compares attention importances between attack and normal flows, feature
/// by feature.
pub fn xai_validate(
    detector: &Detector,
    schema: &FeatureSchema,
    attacks: &[FlowRecord],
    normals: &[FlowRecord],
) -> Result<XaiValidationReport, ExplainError> {
    if attacks.len() < MIN_GROUP_SIZE || normals.len() < MIN_GROUP_SIZE {
        return Err(ExplainError::InsufficientSamples {
            attacks: attacks.len(),
            normals: normals.len(),
        });
    }
    check_schema(detector, schema)?;
    let ia = importances(detector, attacks)?;
    let inorm = importances(detector, normals)?;
    Ok(validate_importances(&detector.normalizer.names, &ia, &inorm))
}

/// The statistics of [`xai_validate`] on precomputed importance samples.
pub fn validate_importances(
    names: &[String],
    attacks: &[[f64; NUM_FEATURES]],
    normals: &[[f64; NUM_FEATURES]],
) -> XaiValidationReport {
    let mut features = Vec::with_capacity(NUM_FEATURES);
    for (j, name) in names.iter().enumerate().take(NUM_FEATURES) {
        let a: Vec<f64> = attacks.iter().map(|r| r[j]).collect();
        let b: Vec<f64> = normals.iter().map(|r| r[j]).collect();
        let (t, p, d) = group_statistics(&a, &b);
        features.push(FeatureValidation {
            feature: name.clone(),
            mean_attack: mean(&a),
            mean_normal: mean(&b),
            sd_attack: sample_variance(&a).sqrt(),
            sd_normal: sample_variance(&b).sqrt(),
            t,
            p,
            d,
        });
    }
    let count = |f: &dyn Fn(&FeatureValidation) -> bool| features.iter().filter(|v| f(v)).count();
    let consistency = features.iter().map(|f| f.sd_attack + f.sd_normal).sum::<f64>() / (2 * features.len()) as f64;
    XaiValidationReport {
        n_attack: attacks.len(),
        n_normal: normals.len(),
        significant_05: count(&|f| f.p < 0.05),
        significant_001: count(&|f| f.p < 0.001),
        large_effect: count(&|f| f.d.abs() > 0.8),
        consistency,
        features,
    }
}

/// Draws up to `n` attack and `n` normal records from `ds`, reproducibly.
pub fn sample_groups(ds: &Dataset, n: usize, seed: u64) -> (Vec<FlowRecord>, Vec<FlowRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |attack: bool| {
        let mut v: Vec<FlowRecord> = ds
            .records
            .iter()
            .filter(|r| r.label.is_attack() == attack)
            .cloned()
            .collect();
        v.shuffle(&mut rng);
        v.truncate(n);
        v
    };
    let attacks = pick(true);
    let normals = pick(false);
    (attacks, normals)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    KeyValue,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(Self::Text),
            "kv" | "key-value" | "keyvalue" => Ok(Self::KeyValue),
            "csv" => Ok(Self::Csv),
            _ => Err(ExplainError::UnknownFormat(s.to_string())),
        }
    }
}

/// `−log10(p)`; infinite for `p = 0`.
pub fn neg_log10(p: f64) -> f64 {
    -p.log10()
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

const VALIDATION_HEADER: [&str; 7] = ["Feature", "Attack mean", "Normal mean", "p-value", "-log10(p)", "Cohen's d", "|d|"];

/// Renders a validation report, features ordered by `|d|` descending.
pub fn emit_validation(report: &XaiValidationReport, format: ReportFormat) -> String {
    let rows = report.by_effect();
    match format {
        ReportFormat::Text => {
            let width = rows.iter().map(|f| f.feature.len()).max().unwrap_or(0).max(7);
            let mut s = format!(
                "{:<width$}  {:>11}  {:>11}  {:>10}  {:>9}  {:>9}\n",
                VALIDATION_HEADER[0], VALIDATION_HEADER[1], VALIDATION_HEADER[2], VALIDATION_HEADER[3], VALIDATION_HEADER[4], VALIDATION_HEADER[5]
            );
            for f in &rows {
                let _ = writeln!(
                    s,
                    "{:<width$}  {:>11.6}  {:>11.6}  {:>10.3e}  {:>9.3}  {:>9.3}",
                    f.feature,
                    f.mean_attack,
                    f.mean_normal,
                    f.p,
                    neg_log10(f.p),
                    f.d
                );
            }
            let _ = writeln!(s, "groups: {} attack, {} normal", report.n_attack, report.n_normal);
            let _ = writeln!(
                s,
                "significant: {} at p<0.05, {} at p<0.001; {} with |d|>0.8",
                report.significant_05, report.significant_001, report.large_effect
            );
            let _ = writeln!(s, "mean within-group sd: {:.6}", report.consistency);
            s
        }
        ReportFormat::KeyValue => {
            let mut s = String::new();
            let _ = writeln!(s, "n_attack = {}", report.n_attack);
            let _ = writeln!(s, "n_normal = {}", report.n_normal);
            let _ = writeln!(s, "significant_05 = {}", report.significant_05);
            let _ = writeln!(s, "significant_001 = {}", report.significant_001);
            let _ = writeln!(s, "large_effect = {}", report.large_effect);
            let _ = writeln!(s, "consistency = {}", report.consistency);
            for (rank, f) in rows.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "feature.{rank}: name = {}; mean_attack = {}; mean_normal = {}; p = {}; neg_log10_p = {}; d = {}",
                    f.feature,
                    f.mean_attack,
                    f.mean_normal,
                    f.p,
                    neg_log10(f.p),
                    f.d
                );
            }
            s
        }
        ReportFormat::Csv => csv_string(
            &VALIDATION_HEADER,
            rows.iter()
                .map(|f| {
                    vec![
                        f.feature.clone(),
                        f.mean_attack.to_string(),
                        f.mean_normal.to_string(),
                        f.p.to_string(),
                        neg_log10(f.p).to_string(),
                        f.d.to_string(),
                        f.d.abs().to_string(),
                    ]
                })
                .collect(),
        ),
    }
}

fn stage_text(r: &ExplanationRecord) -> String {
    r.stage().map(|s| s.name().to_string()).unwrap_or_default()
}

/// Renders per-flow explanations; an empty slice gives just the header.
pub fn emit_explanations(records: &[ExplanationRecord], format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => {
            let mut s = String::new();
            let _ = writeln!(s, "{:>8}  {:<22}  {:>9}  {:>9}  Top features", "Flow", "Decision", "P(attack)", "phi");
            for r in records {
                let top: Vec<String> = r
                    .top_features
                    .iter()
                    .map(|f| format!("{} ({:.3})", f.feature, f.importance))
                    .collect();
                let decision = match r.stage() {
                    Some(stage) => format!("Attack: {}", stage.name()),
                    None => "Normal".to_string(),
                };
                let _ = writeln!(
                    s,
                    "{:>8}  {:<22}  {:>9.6}  {:>9.6}  {}",
                    r.flow_id,
                    decision,
                    r.p_attack,
                    r.ltn.phi,
                    top.join(", ")
                );
                for p in &r.top_predicates {
                    let _ = writeln!(
                        s,
                        "{:>8}  predicate {:>2} {:<28} w={:+.4} pi={:.4} w*pi={:+.4}",
                        "",
                        p.index,
                        p.label,
                        p.weight,
                        p.satisfaction,
                        p.contribution
                    );
                }
            }
            s
        }
        ReportFormat::KeyValue => {
            let mut s = String::new();
            for r in records {
                let _ = writeln!(s, "flow.{}.decision = {}", r.flow_id, if r.routed.is_attack() { "attack" } else { "normal" });
                if let Some(stage) = r.stage() {
                    let _ = writeln!(s, "flow.{}.stage = {}", r.flow_id, stage.key());
                }
                let _ = writeln!(s, "flow.{}.p_attack = {}", r.flow_id, r.p_attack);
                let _ = writeln!(s, "flow.{}.tau = {}", r.flow_id, r.tau);
                let _ = writeln!(s, "flow.{}.phi = {}", r.flow_id, r.ltn.phi);
                for (k, f) in r.top_features.iter().enumerate() {
                    let _ = writeln!(s, "flow.{}.feature.{k} = {}; {}", r.flow_id, f.feature, f.importance);
                }
                for (k, p) in r.top_predicates.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "flow.{}.predicate.{k} = {}; {}; w = {}; pi = {}; contribution = {}",
                        r.flow_id, p.index, p.label, p.weight, p.satisfaction, p.contribution
                    );
                }
            }
            s
        }
        ReportFormat::Csv => csv_string(
            &["flow_id", "decision", "stage", "p_attack", "phi", "top_feature", "top_predicate"],
            records
                .iter()
                .map(|r| {
                    vec![
                        r.flow_id.to_string(),
                        if r.routed.is_attack() { "attack" } else { "normal" }.to_string(),
                        stage_text(r),
                        r.p_attack.to_string(),
                        r.ltn.phi.to_string(),
                        r.top_features.first().map(|f| f.feature.clone()).unwrap_or_default(),
                        r.top_predicates.first().map(|p| p.label.clone()).unwrap_or_default(),
                    ]
                })
                .collect(),
        ),
    }
}
