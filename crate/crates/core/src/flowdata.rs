//! Flow data model, CSV ingestion, synthetic traffic generation and
//! stratified splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Number of features per flow.
pub const NUM_FEATURES: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("column {0:?} missing from CSV header")]
    MissingColumn(String),
    #[error("row {row}, column {column:?}: cannot parse {value:?}")]
    UnparseableValue {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: unknown label {label:?}")]
    UnknownLabel { row: usize, label: String },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("class {class} has {count} records, fewer than {splits} splits")]
    TooFewSamples {
        class: ClassLabel,
        count: usize,
        splits: usize,
    },
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Six-way flow label: benign traffic plus five APT stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    Normal,
    InitialCompromise,
    Reconnaissance,
    LateralMovement,
    Pivoting,
    DataExfiltration,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 6] = [
        ClassLabel::Normal,
        ClassLabel::InitialCompromise,
        ClassLabel::Reconnaissance,
        ClassLabel::LateralMovement,
        ClassLabel::Pivoting,
        ClassLabel::DataExfiltration,
    ];

    pub const STAGES: [ClassLabel; 5] = [
        ClassLabel::InitialCompromise,
        ClassLabel::Reconnaissance,
        ClassLabel::LateralMovement,
        ClassLabel::Pivoting,
        ClassLabel::DataExfiltration,
    ];

    /// 0 for Normal, 1..=5 for the attack stages.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Binary projection: 0 for Normal, 1 for any attack stage.
    pub fn binary(self) -> u8 {
        u8::from(self != ClassLabel::Normal)
    }

    pub fn is_attack(self) -> bool {
        self != ClassLabel::Normal
    }

    /// Position among the five attack stages, `None` for Normal.
    pub fn stage_index(self) -> Option<usize> {
        self.index().checked_sub(1)
    }

    pub fn from_stage_index(i: usize) -> Option<Self> {
        Self::STAGES.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "Normal",
            ClassLabel::InitialCompromise => "InitialCompromise",
            ClassLabel::Reconnaissance => "Reconnaissance",
            ClassLabel::LateralMovement => "LateralMovement",
            ClassLabel::Pivoting => "Pivoting",
            ClassLabel::DataExfiltration => "DataExfiltration",
        }
    }

    /// snake_case key used in configuration files.
    pub fn key(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::InitialCompromise => "initial_compromise",
            ClassLabel::Reconnaissance => "reconnaissance",
            ClassLabel::LateralMovement => "lateral_movement",
            ClassLabel::Pivoting => "pivoting",
            ClassLabel::DataExfiltration => "data_exfiltration",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = ();

    /// Accepts the label spellings seen in APT flow datasets, ignoring case,
    /// spaces, underscores and hyphens.
    fn from_str(s: &str) -> Result<Self, ()> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, ' ' | '_' | '-'))
            .flat_map(char::to_lowercase)
            .collect();
        Ok(match norm.as_str() {
            "normal" | "normaltraffic" | "benign" => ClassLabel::Normal,
            "initialcompromise" => ClassLabel::InitialCompromise,
            "reconnaissance" => ClassLabel::Reconnaissance,
            "lateralmovement" => ClassLabel::LateralMovement,
            "pivoting" => ClassLabel::Pivoting,
            "dataexfiltration" => ClassLabel::DataExfiltration,
            _ => return Err(()),
        })
    }
}

/// Normalisation group of a feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormGroup {
    /// Flags and identifiers kept on their original scale.
    Passthrough,
    /// Median centring and interquartile-range scaling.
    Robust,
    /// Zero mean, unit variance.
    ZScore,
}

impl NormGroup {
    pub fn code(self) -> u8 {
        match self {
            NormGroup::Passthrough => 0,
            NormGroup::Robust => 1,
            NormGroup::ZScore => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(NormGroup::Passthrough),
            1 => Some(NormGroup::Robust),
            2 => Some(NormGroup::ZScore),
            _ => None,
        }
    }
}

/// Default placeholders for the two feature slots without a fixed name.
pub const DEFAULT_PLACEHOLDERS: [&str; 2] = ["Bwd IAT Mean", "Fwd IAT Total"];

const NAMED_FEATURES: [&str; 10] = [
    "Subflow Bwd Bytes",
    "Src Port",
    "Bwd IAT Total",
    "Bwd Packet Length Min",
    "ACK Flag Count",
    "PSH Flag Count",
    "Bwd Packet Length Mean",
    "Total Length of Fwd Packet",
    "Fwd Packet Length Max",
    "Total Backward Packets",
];

/// Ordered 12-feature schema with a normalisation group per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSchema {
    names: Vec<String>,
    groups: Vec<NormGroup>,
}

impl FeatureSchema {
    pub fn new(names: Vec<String>, groups: Vec<NormGroup>) -> Result<Self, DataError> {
        if names.len() != NUM_FEATURES || groups.len() != NUM_FEATURES {
            return Err(DataError::InvalidSchema(format!(
                "expected {NUM_FEATURES} features, got {} names and {} groups",
                names.len(),
                groups.len()
            )));
        }
        let unique: HashSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(DataError::InvalidSchema("feature names must be unique".into()));
        }
        Ok(Self { names, groups })
    }

    /// The default schema with custom names for the two placeholder slots.
    pub fn with_placeholders(first: &str, second: &str) -> Result<Self, DataError> {
        let names: Vec<String> = NAMED_FEATURES
            .iter()
            .copied()
            .chain([first, second])
            .map(String::from)
            .collect();
        let groups = names.iter().map(|n| default_group(n)).collect();
        Self::new(names, groups)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[NormGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::with_placeholders(DEFAULT_PLACEHOLDERS[0], DEFAULT_PLACEHOLDERS[1])
            .expect("default schema is valid")
    }
}

fn default_group(name: &str) -> NormGroup {
    match name {
        "Src Port" | "ACK Flag Count" | "PSH Flag Count" => NormGroup::Passthrough,
        n if is_rate_feature(n) || n.contains("IAT") => NormGroup::Robust,
        _ => NormGroup::ZScore,
    }
}

/// Rate-type features follow the flow-meter `.../s` naming convention.
pub fn is_rate_feature(name: &str) -> bool {
    name.trim_end().ends_with("/s")
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowRecord {
    pub features: [f64; NUM_FEATURES],
    pub label: ClassLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Loaded,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<FlowRecord>,
    pub split: Option<SplitTag>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.label).or_insert(0) += 1;
        }
        counts
    }

    /// Values of one feature across all records.
    pub fn column(&self, feature: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.features[feature]).collect()
    }

    /// Writes the dataset as CSV with the schema names and a `Label` column.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.schema.names().iter().map(String::as_str).collect();
        header.push("Label");
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.features.iter().map(|v| format!("{v:?}")).collect();
            row.push(r.label.name().to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| DataError::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Column holding the flow duration used by the missing-rate policy.
pub const FLOW_DURATION_COLUMN: &str = "Flow Duration";

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim().to_ascii_lowercase().as_str(),
        "" | "nan" | "inf" | "-inf" | "infinity" | "-infinity"
    )
}

/// Loads a flow CSV.
///
/// Exact duplicate rows are dropped (first occurrence kept, order
/// preserved). A missing or non-finite cell in a rate-type feature becomes 0
/// when the row's flow duration is 0; any other unparseable cell is an error.
pub fn load_csv(path: &Path, schema: &FeatureSchema, label_column: &str) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_csv(file, schema, label_column)
}

pub fn read_csv<R: std::io::Read>(
    input: R,
    schema: &FeatureSchema,
    label_column: &str,
) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feature_cols = schema
        .names()
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>, _>>()?;
    let label_col = find(label_column)?;
    let duration_col = header.iter().position(|h| h == FLOW_DURATION_COLUMN);

    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let cells: Vec<String> = row.iter().map(str::to_string).collect();
        if !seen.insert(cells.clone()) {
            continue;
        }
        let zero_duration = duration_col
            .and_then(|c| cells.get(c))
            .and_then(|v| v.trim().parse::<f64>().ok())
            .is_some_and(|d| d == 0.0);
        let mut features = [0.0; NUM_FEATURES];
        for (slot, (&col, name)) in feature_cols.iter().zip(schema.names()).enumerate() {
            let cell = cells.get(col).map(String::as_str).unwrap_or("");
            let parsed = cell.trim().parse::<f64>().ok().filter(|v| v.is_finite());
            features[slot] = match parsed {
                Some(v) => v,
                None if is_missing(cell) && is_rate_feature(name) && zero_duration => 0.0,
                None => {
                    return Err(DataError::UnparseableValue {
                        row: line,
                        column: name.clone(),
                        value: cell.to_string(),
                    })
                }
            };
        }
        let raw_label = cells.get(label_col).map(String::as_str).unwrap_or("");
        let label = raw_label.parse().map_err(|_| DataError::UnknownLabel {
            row: line,
            label: raw_label.to_string(),
        })?;
        records.push(FlowRecord { features, label });
    }
    Ok(Dataset {
        schema: schema.clone(),
        records,
        split: None,
        provenance: Provenance::Loaded,
    })
}

/// Class shares of the reference APT dataset, in percent.
pub const REFERENCE_PROPORTIONS: [(ClassLabel, f64); 6] = [
    (ClassLabel::Normal, 98.35),
    (ClassLabel::InitialCompromise, 0.03),
    (ClassLabel::Reconnaissance, 0.32),
    (ClassLabel::LateralMovement, 0.28),
    (ClassLabel::Pivoting, 0.82),
    (ClassLabel::DataExfiltration, 0.20),
];

/// A planted mean shift of `d` standard deviations on one feature of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedShift {
    pub class: ClassLabel,
    pub feature: usize,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub total: usize,
    pub class_proportions: BTreeMap<ClassLabel, f64>,
    pub planted_shifts: Vec<PlantedShift>,
    pub noise_seed: u64,
}

impl SynthConfig {
    /// Reference class proportions, no planted signal.
    pub fn reference(total: usize, noise_seed: u64) -> Self {
        Self {
            total,
            class_proportions: REFERENCE_PROPORTIONS
                .iter()
                .map(|&(c, p)| (c, p / 100.0))
                .collect(),
            planted_shifts: Vec::new(),
            noise_seed,
        }
    }

    /// Reference proportions with the staged attack signature preset.
    pub fn staged(total: usize, noise_seed: u64) -> Self {
        Self {
            planted_shifts: staged_shifts(),
            ..Self::reference(total, noise_seed)
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.total < 100 {
            return Err(DataError::InvalidConfig(format!("total {} < 100", self.total)));
        }
        let sum: f64 = self.class_proportions.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidConfig(format!("proportions sum to {sum}")));
        }
        if let Some((c, p)) = self
            .class_proportions
            .iter()
            .find(|(_, p)| !(**p >= 0.0) || !p.is_finite())
        {
            return Err(DataError::InvalidConfig(format!("proportion for {c} is {p}")));
        }
        if let Some(s) = self
            .planted_shifts
            .iter()
            .find(|s| s.feature >= NUM_FEATURES || !s.d.is_finite())
        {
            return Err(DataError::InvalidConfig(format!("bad planted shift {s:?}")));
        }
        Ok(())
    }

    /// Per-class record counts: rounded shares with largest-remainder
    /// correction so they sum to `total`.
    pub fn class_counts(&self) -> BTreeMap<ClassLabel, usize> {
        let weights: Vec<(ClassLabel, f64)> =
            self.class_proportions.iter().map(|(c, p)| (*c, *p)).collect();
        let counts = largest_remainder(self.total, &weights.iter().map(|w| w.1).collect::<Vec<_>>());
        weights.iter().map(|w| w.0).zip(counts).collect()
    }
}

/// Apportions `total` items by `shares` (summing to 1): floors first, then
/// one extra item to each of the largest fractional remainders, ties going
/// to the earlier share.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Staged attack signatures: every stage shifts eleven of the twelve
/// features by 1.3 sd and omits a different feature. Sign reversals sit on
/// the rarer stages so that every feature keeps a clear net shift between
/// pooled attacks and normal traffic; Pivoting keeps all shifts positive.
pub fn staged_shifts() -> Vec<PlantedShift> {
    const D: f64 = 1.3;
    let plan: [(ClassLabel, usize, &[usize]); 5] = [
        (ClassLabel::InitialCompromise, 11, &[0, 1]),
        (ClassLabel::Reconnaissance, 9, &[5, 11]),
        (ClassLabel::LateralMovement, 7, &[5, 10]),
        (ClassLabel::Pivoting, 5, &[]),
        (ClassLabel::DataExfiltration, 3, &[5, 8]),
    ];
    let mut out = Vec::new();
    for (class, omitted, negative) in plan {
        for feature in (0..NUM_FEATURES).filter(|f| *f != omitted) {
            let d = if negative.contains(&feature) { -D } else { D };
            out.push(PlantedShift { class, feature, d });
        }
    }
    out
}

/// Draws a synthetic dataset: standard-normal features per class with the
/// planted mean shifts, records shuffled under the config seed.
pub fn generate_synthetic(config: &SynthConfig, schema: &FeatureSchema) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
    let mut shift = [[0.0; NUM_FEATURES]; 6];
    for s in &config.planted_shifts {
        shift[s.class.index()][s.feature] += s.d;
    }
    let mut records = Vec::with_capacity(config.total);
    for (class, count) in config.class_counts() {
        for _ in 0..count {
            let mut features = [0.0; NUM_FEATURES];
            for (f, v) in features.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z + shift[class.index()][f];
            }
            records.push(FlowRecord { features, label: class });
        }
    }
    records.shuffle(&mut rng);
    Ok(Dataset {
        schema: schema.clone(),
        records,
        split: None,
        provenance: Provenance::Synthetic,
    })
}

/// Splits per class with largest-remainder apportioning, so every class
/// keeps its share in each split to within one record. Records keep their
/// original relative order inside each split.
pub fn stratified_split(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let shares = [fractions.0, fractions.1, fractions.2];
    if shares.iter().any(|f| !(*f > 0.0)) || (shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(format!("{fractions:?}")));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0u8; ds.len()];
    for (class, mut idx) in by_class {
        if idx.len() < shares.len() {
            return Err(DataError::TooFewSamples {
                class,
                count: idx.len(),
                splits: shares.len(),
            });
        }
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), &shares);
        let mut start = 0;
        for (split, n) in counts.iter().enumerate() {
            for &i in &idx[start..start + n] {
                assignment[i] = split as u8;
            }
            start += n;
        }
    }
    let part = |which: u8, tag: SplitTag| Dataset {
        schema: ds.schema.clone(),
        records: ds
            .records
            .iter()
            .zip(&assignment)
            .filter(|(_, a)| **a == which)
            .map(|(r, _)| r.clone())
            .collect(),
        split: Some(tag),
        provenance: ds.provenance,
    };
    Ok((part(0, SplitTag::Train), part(1, SplitTag::Val), part(2, SplitTag::Test)))
}
