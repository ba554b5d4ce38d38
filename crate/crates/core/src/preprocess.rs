//! Normalisation, feature scoring, consensus ranking and two-sample
//! discrimination statistics.

use std::collections::BTreeMap;

use statrs::function::beta::beta_reg;

use crate::flowdata::{Dataset, FeatureSchema, FlowRecord, NormGroup, NUM_FEATURES};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PreprocessError {
    #[error("cannot fit on an empty dataset")]
    EmptyDataset,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("length mismatch: {0} values vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("degenerate groups: {0}")]
    DegenerateGroups(String),
    #[error("inconsistent feature sets: {0}")]
    InconsistentFeatureSets(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
}

/// Per-feature centring and scaling fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub names: Vec<String>,
    pub groups: Vec<NormGroup>,
    /// Mean (ZScore), median (Robust) or 0 (Passthrough).
    pub center: Vec<f64>,
    /// Population std (ZScore), IQR (Robust) or 1 (Passthrough).
    pub scale: Vec<f64>,
}

impl Normalizer {
    /// True where the fitted std or IQR is zero; such features are only centred.
    pub fn degenerate(&self) -> Vec<bool> {
        self.groups
            .iter()
            .zip(&self.scale)
            .map(|(g, s)| *g != NormGroup::Passthrough && *s == 0.0)
            .collect()
    }

    pub fn apply(&self, record: &FlowRecord) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.apply_one(i, record.features[i]);
        }
        out
    }

    pub fn apply_slice(&self, values: &[f64]) -> Result<Vec<f64>, PreprocessError> {
        if values.len() != self.groups.len() {
            return Err(PreprocessError::SchemaMismatch(format!(
                "{} values for {} features",
                values.len(),
                self.groups.len()
            )));
        }
        Ok(values.iter().enumerate().map(|(i, v)| self.apply_one(i, *v)).collect())
    }

    fn apply_one(&self, i: usize, x: f64) -> f64 {
        match self.groups[i] {
            NormGroup::Passthrough => x,
            _ => {
                let s = if self.scale[i] == 0.0 { 1.0 } else { self.scale[i] };
                (x - self.center[i]) / s
            }
        }
    }

    /// Normalised feature rows of a dataset with the same schema.
    pub fn transform(&self, ds: &Dataset) -> Result<Vec<[f64; NUM_FEATURES]>, PreprocessError> {
        self.check_schema(&ds.schema)?;
        Ok(ds.records.iter().map(|r| self.apply(r)).collect())
    }

    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<(), PreprocessError> {
        if schema.names() != self.names.as_slice() {
            return Err(PreprocessError::SchemaMismatch(format!(
                "normalizer fitted on {:?}, data has {:?}",
                self.names,
                schema.names()
            )));
        }
        Ok(())
    }
}

pub fn fit_normalizer(train: &Dataset) -> Result<Normalizer, PreprocessError> {
    if train.is_empty() {
        return Err(PreprocessError::EmptyDataset);
    }
    let mut center = Vec::with_capacity(NUM_FEATURES);
    let mut scale = Vec::with_capacity(NUM_FEATURES);
    for (i, group) in train.schema.groups().iter().enumerate() {
        let col = train.column(i);
        let (c, s) = match group {
            NormGroup::Passthrough => (0.0, 1.0),
            NormGroup::ZScore => {
                let m = mean(&col);
                let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
                (m, var.sqrt())
            }
            NormGroup::Robust => {
                let mut sorted = col;
                sorted.sort_by(f64::total_cmp);
                let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
                (quantile_sorted(&sorted, 0.5), iqr.max(0.0))
            }
        };
        center.push(c);
        scale.push(s);
    }
    Ok(Normalizer {
        names: train.schema.names().to_vec(),
        groups: train.schema.groups().to_vec(),
        center,
        scale,
    })
}

/// Quantile of sorted data with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with the `n − 1` divisor.
pub fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

pub const DEFAULT_MI_BINS: usize = 16;

/// Plug-in mutual information (nats) between an equal-frequency binned
/// feature and a binary label.
///
/// Bin edges are `e_k = sorted[⌊k·n/bins⌋]` for `k = 1..bins`, and a value
/// falls in bin `#{k : x ≥ e_k}`, so tied values always share a bin.
pub fn mutual_information(values: &[f64], labels: &[u8], bins: usize) -> Result<f64, PreprocessError> {
    if values.len() != labels.len() {
        return Err(PreprocessError::LengthMismatch(values.len(), labels.len()));
    }
    let n = values.len();
    if n < 10 || bins < 2 {
        return Err(PreprocessError::InsufficientSamples(format!(
            "{n} values with {bins} bins"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..bins).map(|k| sorted[k * n / bins]).collect();
    let mut joint = vec![[0usize; 2]; bins];
    for (v, y) in values.iter().zip(labels) {
        let b = edges.partition_point(|e| *e <= *v);
        joint[b][usize::from(*y != 0)] += 1;
    }
    let nf = n as f64;
    let py = [0, 1].map(|c| joint.iter().map(|j| j[c]).sum::<usize>() as f64 / nf);
    let mut mi = 0.0;
    for row in &joint {
        let px = (row[0] + row[1]) as f64 / nf;
        for c in 0..2 {
            if row[c] > 0 {
                let pxy = row[c] as f64 / nf;
                mi += pxy * (pxy / (px * py[c])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// One-way ANOVA F statistic for the two label groups.
pub fn f_test(values: &[f64], labels: &[u8]) -> Result<f64, PreprocessError> {
    if values.len() != labels.len() {
        return Err(PreprocessError::LengthMismatch(values.len(), labels.len()));
    }
    let (a, b): (Vec<(f64, u8)>, Vec<(f64, u8)>) =
        values.iter().copied().zip(labels.iter().copied()).partition(|(_, y)| *y == 0);
    let groups: [Vec<f64>; 2] = [a, b].map(|g| g.into_iter().map(|(v, _)| v).collect());
    if groups.iter().any(|g| g.len() < 2) {
        return Err(PreprocessError::DegenerateGroups(format!(
            "group sizes {} and {}",
            groups[0].len(),
            groups[1].len()
        )));
    }
    let n = values.len() as f64;
    let grand = mean(values);
    let between: f64 = groups.iter().map(|g| g.len() as f64 * (mean(g) - grand).powi(2)).sum();
    let within: f64 = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        })
        .sum();
    let ms_between = between / 1.0;
    let ms_within = within / (n - 2.0);
    if ms_within == 0.0 {
        if ms_between > 0.0 {
            return Err(PreprocessError::DegenerateGroups(
                "zero within-group variance with distinct means".into(),
            ));
        }
        return Ok(0.0);
    }
    Ok(ms_between / ms_within)
}

/// A per-feature relevance score; higher means more discriminative.
pub trait FeatureScorer {
    fn name(&self) -> &str;
    fn score(&self, values: &[f64], labels: &[u8]) -> Result<f64, PreprocessError>;
}

pub struct MutualInformation {
    pub bins: usize,
}

impl Default for MutualInformation {
    fn default() -> Self {
        Self { bins: DEFAULT_MI_BINS }
    }
}

impl FeatureScorer for MutualInformation {
    fn name(&self) -> &str {
        "mutual_information"
    }

    fn score(&self, values: &[f64], labels: &[u8]) -> Result<f64, PreprocessError> {
        mutual_information(values, labels, self.bins)
    }
}

pub struct FTest;

impl FeatureScorer for FTest {
    fn name(&self) -> &str {
        "f_test"
    }

    fn score(&self, values: &[f64], labels: &[u8]) -> Result<f64, PreprocessError> {
        match f_test(values, labels) {
            Err(PreprocessError::DegenerateGroups(_)) if values.len() == labels.len() => {
                Ok(f64::INFINITY)
            }
            other => other,
        }
    }
}

/// Method → feature → score.
pub type ScoreTable = BTreeMap<String, BTreeMap<String, f64>>;

/// Scores every schema feature of `ds` against the binary label with each scorer.
pub fn score_features(ds: &Dataset, scorers: &[&dyn FeatureScorer]) -> Result<ScoreTable, PreprocessError> {
    let labels: Vec<u8> = ds.records.iter().map(|r| r.label.binary()).collect();
    let mut table = ScoreTable::new();
    for s in scorers {
        let mut per = BTreeMap::new();
        for (i, name) in ds.schema.names().iter().enumerate() {
            per.insert(name.clone(), s.score(&ds.column(i), &labels)?);
        }
        table.insert(s.name().to_string(), per);
    }
    Ok(table)
}

/// Mean-rank consensus over scoring methods. Ranks are 1 for the best score
/// with average ranks for ties; the result is ordered by ascending mean
/// rank, ties broken by feature name.
pub fn consensus_rank(scores: &ScoreTable) -> Result<Vec<(String, f64)>, PreprocessError> {
    if scores.len() < 2 {
        return Err(PreprocessError::InconsistentFeatureSets(format!(
            "need at least 2 methods, got {}",
            scores.len()
        )));
    }
    let mut methods = scores.iter();
    let (first_name, first) = methods.next().expect("checked length");
    for (name, per) in methods {
        if per.keys().ne(first.keys()) {
            return Err(PreprocessError::InconsistentFeatureSets(format!(
                "{name} and {first_name} score different features"
            )));
        }
    }
    let mut total: BTreeMap<&str, f64> = first.keys().map(|k| (k.as_str(), 0.0)).collect();
    for per in scores.values() {
        for (feature, rank) in average_ranks(per) {
            *total.get_mut(feature).expect("same key set") += rank;
        }
    }
    let m = scores.len() as f64;
    let mut out: Vec<(String, f64)> = total.into_iter().map(|(k, v)| (k.to_string(), v / m)).collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

fn average_ranks(per: &BTreeMap<String, f64>) -> Vec<(&str, f64)> {
    let mut items: Vec<(&str, f64)> = per.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut out = Vec::with_capacity(items.len());
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j + 1 < items.len() && items[j + 1].1 == items[i].1 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        out.extend(items[i..=j].iter().map(|(k, _)| (*k, rank)));
        i = j + 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchResult, PreprocessError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(PreprocessError::InsufficientSamples(format!(
            "group sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (va, vb) = (sample_variance(a), sample_variance(b));
    if va == 0.0 || vb == 0.0 {
        return Err(PreprocessError::DegenerateVariance(format!(
            "group variances {va} and {vb}"
        )));
    }
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2
        / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    Ok(WelchResult { t, df, p: t_two_sided_p(t, df) })
}

/// Two-sided Student-t tail probability, `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Cohen's d with the `(n − 1)`-weighted pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, PreprocessError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(PreprocessError::InsufficientSamples(format!(
            "group sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(PreprocessError::DegenerateVariance("pooled sd is 0".into()));
    }
    Ok((mean(a) - mean(b)) / pooled)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminationResult {
    pub feature: String,
    pub t: f64,
    pub p: f64,
    pub d: f64,
}

pub fn discriminate(feature: &str, a: &[f64], b: &[f64]) -> Result<DiscriminationResult, PreprocessError> {
    let w = welch_t(a, b)?;
    Ok(DiscriminationResult {
        feature: feature.to_string(),
        t: w.t,
        p: w.p,
        d: cohens_d(a, b)?,
    })
}
