//! Run configuration as a flat `section.key = value` document.
//!
//! Lines starting with `#` and blank lines are ignored; every other line
//! must be a known key. `data.shift` may repeat; every other key may appear
//! at most once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::evaluation::DEFAULT_TAUS;
use crate::explain::{DEFAULT_GROUP_SIZE, DEFAULT_TOP_K};
use crate::flowdata::{
    staged_shifts, ClassLabel, FeatureSchema, PlantedShift, SynthConfig, DEFAULT_PLACEHOLDERS, REFERENCE_PROPORTIONS,
};
use crate::objective::LossWeights;
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { key: String, line: usize },
    #[error("line {line}: invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        line: usize,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which planted-shift preset the generator starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftPreset {
    None,
    Staged,
}

impl ShiftPreset {
    fn as_str(self) -> &'static str {
        match self {
            ShiftPreset::None => "none",
            ShiftPreset::Staged => "staged",
        }
    }
}

/// An extra planted shift, naming its feature.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub class: ClassLabel,
    pub feature: String,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub total: usize,
    pub data_seed: u64,
    /// Class shares in percent.
    pub proportions: BTreeMap<ClassLabel, f64>,
    pub shift_preset: ShiftPreset,
    pub extra_shifts: Vec<ShiftSpec>,
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub placeholders: [String; 2],
    pub label_column: String,
    pub encoder: EncoderConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Thresholds for the sweep; the routing threshold is `train.tau`
    /// (key `eval.tau`).
    pub taus: Vec<f64>,
    pub xai_group_size: usize,
    pub xai_seed: u64,
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total: 20_000,
            data_seed: 42,
            proportions: REFERENCE_PROPORTIONS.iter().copied().collect(),
            shift_preset: ShiftPreset::Staged,
            extra_shifts: Vec::new(),
            split: (0.7, 0.15, 0.15),
            split_seed: 42,
            placeholders: DEFAULT_PLACEHOLDERS.map(String::from),
            label_column: "Label".to_string(),
            encoder: EncoderConfig::default(),
            model_seed: 42,
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            taus: DEFAULT_TAUS.to_vec(),
            xai_group_size: DEFAULT_GROUP_SIZE,
            xai_seed: 0,
            top_k: DEFAULT_TOP_K,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|s| parse::<f64>(s.trim())).collect()
}

fn parse_shift(v: &str) -> Result<ShiftSpec, String> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    let [class, feature, d] = parts[..] else {
        return Err("expected `class:feature:d`".into());
    };
    let class = class.parse::<ClassLabel>().map_err(|_| format!("unknown class `{class}`"))?;
    Ok(ShiftSpec {
        class,
        feature: feature.to_string(),
        d: parse(d)?,
    })
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        let t = &mut self.train;
        let lr = &mut t.learning_rates;
        let l = &mut self.loss;
        match key {
            "data.total" => self.total = parse(v)?,
            "data.seed" => self.data_seed = parse(v)?,
            "data.shifts" => {
                self.shift_preset = match v {
                    "none" => ShiftPreset::None,
                    "staged" => ShiftPreset::Staged,
                    _ => return Err("expected `none` or `staged`".into()),
                }
            }
            "data.shift" => self.extra_shifts.push(parse_shift(v)?),
            "split.train" => self.split.0 = parse(v)?,
            "split.val" => self.split.1 = parse(v)?,
            "split.test" => self.split.2 = parse(v)?,
            "split.seed" => self.split_seed = parse(v)?,
            "schema.placeholder_a" => self.placeholders[0] = v.to_string(),
            "schema.placeholder_b" => self.placeholders[1] = v.to_string(),
            "schema.label_column" => self.label_column = v.to_string(),
            "model.hidden" => self.encoder.hidden = parse(v)?,
            "model.layers" => self.encoder.layers = parse(v)?,
            "model.heads" => self.encoder.heads = parse(v)?,
            "model.feedforward" => self.encoder.feedforward = parse(v)?,
            "model.dropout" => self.encoder.dropout = parse(v)?,
            "model.seed" => self.model_seed = parse(v)?,
            "train.max_epochs" => t.max_epochs = parse(v)?,
            "train.batch_size" => t.batch_size = parse(v)?,
            "train.val_batch_size" => t.val_batch_size = parse(v)?,
            "train.lr.encoder" => lr.encoder = parse(v)?,
            "train.lr.feature_encoder" => lr.feature_encoder = parse(v)?,
            "train.lr.binary_head" => lr.binary_head = parse(v)?,
            "train.lr.attack_head" => lr.attack_head = parse(v)?,
            "train.lr.ltn" => lr.ltn = parse(v)?,
            "train.encoder_weight_decay" => t.encoder_weight_decay = parse(v)?,
            "train.weight_decay" => t.weight_decay = parse(v)?,
            "train.clip_norm" => t.clip_norm = parse(v)?,
            "train.patience" => t.patience = parse(v)?,
            "train.unfreeze_epoch" => t.unfreeze_epoch = parse(v)?,
            "train.unfrozen_encoder_lr" => t.unfrozen_encoder_lr = parse(v)?,
            "train.seed" => t.seed = parse(v)?,
            "loss.alpha" => l.alpha = parse(v)?,
            "loss.beta" => l.beta = parse(v)?,
            "loss.gamma" => l.gamma = parse(v)?,
            "loss.focal_gamma" => l.focal_gamma = parse(v)?,
            "loss.class_weight.normal" => l.class_weights[0] = parse(v)?,
            "loss.class_weight.attack" => l.class_weights[1] = parse(v)?,
            "eval.tau" => t.tau = parse(v)?,
            "eval.taus" => self.taus = parse_list(v)?,
            "xai.group_size" => self.xai_group_size = parse(v)?,
            "xai.seed" => self.xai_seed = parse(v)?,
            "xai.top_k" => self.top_k = parse(v)?,
            _ => {
                if let Some(class) = key.strip_prefix("data.proportion.") {
                    match ClassLabel::ALL.iter().find(|c| c.key() == class) {
                        Some(c) => {
                            self.proportions.insert(*c, parse(v)?);
                        }
                        None => return Ok(false),
                    }
                } else if let Some(stage) = key.strip_prefix("loss.stage_weight.") {
                    match ClassLabel::STAGES.iter().position(|c| c.key() == stage) {
                        Some(i) => l.stage_weights[i] = parse(v)?,
                        None => return Ok(false),
                    }
                } else {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let Some((k, v)) = s.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: s.to_string(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k != "data.shift" && seen.insert(k.to_string(), line).is_some() {
                return Err(ConfigError::DuplicateKey { key: k.to_string(), line });
            }
            match cfg.set(k, v) {
                Ok(true) => {}
                Ok(false) => return Err(ConfigError::UnknownKey { key: k.to_string(), line }),
                Err(reason) => {
                    return Err(ConfigError::InvalidValue {
                        key: k.to_string(),
                        line,
                        value: v.to_string(),
                        reason,
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let lr = &t.learning_rates;
        let l = &self.loss;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data.total", self.total.to_string());
        kv("data.seed", self.data_seed.to_string());
        for (c, p) in &self.proportions {
            kv(&format!("data.proportion.{}", c.key()), p.to_string());
        }
        kv("data.shifts", self.shift_preset.as_str().to_string());
        for sh in &self.extra_shifts {
            kv("data.shift", format!("{}:{}:{}", sh.class.key(), sh.feature, sh.d));
        }
        kv("split.train", self.split.0.to_string());
        kv("split.val", self.split.1.to_string());
        kv("split.test", self.split.2.to_string());
        kv("split.seed", self.split_seed.to_string());
        kv("schema.placeholder_a", self.placeholders[0].clone());
        kv("schema.placeholder_b", self.placeholders[1].clone());
        kv("schema.label_column", self.label_column.clone());
        kv("model.hidden", self.encoder.hidden.to_string());
        kv("model.layers", self.encoder.layers.to_string());
        kv("model.heads", self.encoder.heads.to_string());
        kv("model.feedforward", self.encoder.feedforward.to_string());
        kv("model.dropout", self.encoder.dropout.to_string());
        kv("model.seed", self.model_seed.to_string());
        kv("train.max_epochs", t.max_epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.val_batch_size", t.val_batch_size.to_string());
        kv("train.lr.encoder", lr.encoder.to_string());
        kv("train.lr.feature_encoder", lr.feature_encoder.to_string());
        kv("train.lr.binary_head", lr.binary_head.to_string());
        kv("train.lr.attack_head", lr.attack_head.to_string());
        kv("train.lr.ltn", lr.ltn.to_string());
        kv("train.encoder_weight_decay", t.encoder_weight_decay.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.clip_norm", t.clip_norm.to_string());
        kv("train.patience", t.patience.to_string());
        kv("train.unfreeze_epoch", t.unfreeze_epoch.to_string());
        kv("train.unfrozen_encoder_lr", t.unfrozen_encoder_lr.to_string());
        kv("train.seed", t.seed.to_string());
        kv("loss.alpha", l.alpha.to_string());
        kv("loss.beta", l.beta.to_string());
        kv("loss.gamma", l.gamma.to_string());
        kv("loss.focal_gamma", l.focal_gamma.to_string());
        kv("loss.class_weight.normal", l.class_weights[0].to_string());
        kv("loss.class_weight.attack", l.class_weights[1].to_string());
        for (c, w) in ClassLabel::STAGES.iter().zip(&l.stage_weights) {
            kv(&format!("loss.stage_weight.{}", c.key()), w.to_string());
        }
        kv("eval.tau", t.tau.to_string());
        kv("eval.taus", join(&self.taus));
        kv("xai.group_size", self.xai_group_size.to_string());
        kv("xai.seed", self.xai_seed.to_string());
        kv("xai.top_k", self.top_k.to_string());
        s
    }

    pub fn tau(&self) -> f64 {
        self.train.tau
    }

    pub fn schema(&self) -> Result<FeatureSchema, ConfigError> {
        FeatureSchema::with_placeholders(&self.placeholders[0], &self.placeholders[1])
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn synth(&self) -> Result<SynthConfig, ConfigError> {
        let schema = self.schema()?;
        let mut planted_shifts = match self.shift_preset {
            ShiftPreset::None => Vec::new(),
            ShiftPreset::Staged => staged_shifts(),
        };
        for sh in &self.extra_shifts {
            let feature = schema
                .position(&sh.feature)
                .ok_or_else(|| ConfigError::Invalid(format!("shift names unknown feature `{}`", sh.feature)))?;
            planted_shifts.push(PlantedShift {
                class: sh.class,
                feature,
                d: sh.d,
            });
        }
        Ok(SynthConfig {
            total: self.total,
            class_proportions: self.proportions.iter().map(|(c, p)| (*c, p / 100.0)).collect(),
            planted_shifts,
            noise_seed: self.data_seed,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.encoder.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.loss.validate().map_err(|e| invalid(&e))?;
        self.synth()?.validate().map_err(|e| invalid(&e))?;
        if self.taus.is_empty()
            || self.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || self.taus.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(ConfigError::Invalid(format!(
                "eval.taus must be strictly increasing in (0, 1): {:?}",
                self.taus
            )));
        }
        if self.xai_group_size == 0 || self.top_k == 0 {
            return Err(ConfigError::Invalid("xai.group_size and xai.top_k must be positive".into()));
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|f| !(*f > 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!("split fractions {a}, {b}, {c} must be positive and sum to 1")));
        }
        Ok(())
    }
}
