//! Binary checkpoint: config snapshot, named parameter arrays, normaliser
//! statistics and a training summary.
//!
//! Layout (all integers little-endian):
//! `"NSFLOW"`, `u32` version, config text, array count, then per array its
//! name, rank, `u64` dims and `f64` values; normaliser entries; summary.
//! Strings are a `u64` byte length followed by UTF-8 bytes.

use std::path::{Path, PathBuf};

use crate::config::{ConfigError, RunConfig};
use crate::diffcore::Tensor;
use crate::flowdata::NormGroup;
use crate::model::{Detector, Model, ModelError};
use crate::preprocess::Normalizer;
use crate::trainer::TrainHistory;

pub const MAGIC: &[u8; 6] = b"NSFLOW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a supported checkpoint: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model layout: {0}")]
    LayoutMismatch(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Outcome of the training run that produced a checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistorySummary {
    pub epochs_run: u64,
    /// 0 when no epoch improved.
    pub best_epoch: u64,
    pub best_f1_b: f64,
    pub best_f1_a: f64,
    pub best_f1_c: f64,
}

impl HistorySummary {
    pub fn from_history(h: &TrainHistory) -> Self {
        let best = h.best();
        Self {
            epochs_run: h.epochs.len() as u64,
            best_epoch: h.best_epoch.unwrap_or(0) as u64,
            best_f1_b: best.map_or(0.0, |r| r.f1_b),
            best_f1_a: best.map_or(0.0, |r| r.f1_a),
            best_f1_c: best.map_or(0.0, |r| r.f1_c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub arrays: Vec<(String, Tensor)>,
    pub normalizer: Normalizer,
    pub history: HistorySummary,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let n = self.u64(what)?;
        let left = (self.buf.len() - self.pos) as u64;
        if n > left {
            return Err(CheckpointError::Corrupt(format!("{what} length {n} exceeds remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.len(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(detector: &Detector, config_text: &str, history: HistorySummary) -> Self {
        Self {
            config_text: config_text.to_string(),
            arrays: detector
                .model
                .store
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            normalizer: detector.normalizer.clone(),
            history,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.str(&self.config_text);
        w.u64(self.arrays.len() as u64);
        for (name, t) in &self.arrays {
            w.str(name);
            w.u64(t.shape().len() as u64);
            for d in t.shape() {
                w.u64(*d as u64);
            }
            for v in t.data() {
                w.f64(*v);
            }
        }
        let n = &self.normalizer;
        w.u64(n.names.len() as u64);
        for i in 0..n.names.len() {
            w.str(&n.names[i]);
            w.0.push(n.groups[i].code());
            w.f64(n.center[i]);
            w.f64(n.scale[i]);
        }
        let h = &self.history;
        w.u64(h.epochs_run);
        w.u64(h.best_epoch);
        w.f64(h.best_f1_b);
        w.f64(h.best_f1_a);
        w.f64(h.best_f1_c);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        if buf.len() < MAGIC.len() + 4 || &buf[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::VersionMismatch("missing NSFLOW magic".into()));
        }
        let version = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut r = Reader { buf, pos: 10 };
        let config_text = r.str("config")?;
        let count = r.len("array count")?;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str("array name")?;
            let rank = r.len("array rank")?;
            let shape = (0..rank)
                .map(|_| r.len("array dim"))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n.checked_mul(8).unwrap_or(usize::MAX), &name)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            arrays.push((name, t));
        }
        let features = r.len("normalizer size")?;
        let mut normalizer = Normalizer {
            names: Vec::with_capacity(features),
            groups: Vec::with_capacity(features),
            center: Vec::with_capacity(features),
            scale: Vec::with_capacity(features),
        };
        for _ in 0..features {
            normalizer.names.push(r.str("feature name")?);
            let code = r.take(1, "norm group")?[0];
            normalizer
                .groups
                .push(NormGroup::from_code(code).ok_or_else(|| CheckpointError::Corrupt(format!("norm group {code}")))?);
            normalizer.center.push(r.f64("center")?);
            normalizer.scale.push(r.f64("scale")?);
        }
        let history = HistorySummary {
            epochs_run: r.u64("history")?,
            best_epoch: r.u64("history")?,
            best_f1_b: r.f64("history")?,
            best_f1_a: r.f64("history")?,
            best_f1_c: r.f64("history")?,
        };
        if r.pos != buf.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config_text,
            arrays,
            normalizer,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&buf)
    }

    pub fn config(&self) -> Result<RunConfig, CheckpointError> {
        Ok(RunConfig::parse(&self.config_text)?)
    }

    /// Rebuilds the detector; every stored array must match the layout the
    /// config describes, by name and shape.
    pub fn detector(&self) -> Result<(RunConfig, Detector), CheckpointError> {
        let cfg = self.config()?;
        let mut model = Model::new(cfg.encoder.clone(), cfg.model_seed)?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != self.arrays.len() {
            return Err(CheckpointError::LayoutMismatch(format!(
                "{} arrays stored, model has {}",
                self.arrays.len(),
                ids.len()
            )));
        }
        for (id, (name, t)) in ids.into_iter().zip(&self.arrays) {
            let expected = model.store.full_name(id);
            let slot = model.store.get_mut(id);
            if &expected != name || slot.shape() != t.shape() {
                return Err(CheckpointError::LayoutMismatch(format!(
                    "stored {name} {:?}, expected {expected} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        let detector = Detector {
            model,
            normalizer: self.normalizer.clone(),
            tau: cfg.tau(),
        };
        Ok((cfg, detector))
    }
}
