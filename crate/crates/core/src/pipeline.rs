//! End-to-end glue: data preparation, training into a [`Detector`].

use std::path::Path;

use crate::config::RunConfig;
use crate::flowdata::{generate_synthetic, load_csv, stratified_split, DataError, Dataset};
use crate::model::{Detector, Model, ModelError};
use crate::preprocess::{fit_normalizer, PreprocessError};
use crate::trainer::{train, EpochRecord, LabeledRows, TrainError, TrainHistory};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Validation and test flows together, for analyses that need more
    /// held-out samples than either split has alone.
    pub fn held_out(&self) -> Dataset {
        let mut ds = self.test.clone();
        ds.split = None;
        ds.records.extend(self.val.records.iter().cloned());
        ds
    }
}

/// The dataset a config describes: `data` if given, else synthetic flows.
pub fn load_or_generate(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset, PipelineError> {
    let schema = cfg.schema()?;
    Ok(match data {
        Some(p) => load_csv(p, &schema, &cfg.label_column)?,
        None => generate_synthetic(&cfg.synth()?, &schema)?,
    })
}

pub fn split(cfg: &RunConfig, ds: &Dataset) -> Result<Splits, PipelineError> {
    let (train, val, test) = stratified_split(ds, cfg.split, cfg.split_seed)?;
    Ok(Splits { train, val, test })
}

/// Fits the normaliser on `train`, trains a fresh model and returns it at
/// its best validation epoch.
pub fn fit(
    cfg: &RunConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Detector, TrainHistory), PipelineError> {
    let normalizer = fit_normalizer(train_ds)?;
    let tx = normalizer.transform(train_ds)?;
    let vx = normalizer.transform(val_ds)?;
    let (ty, vy) = (train_ds.labels(), val_ds.labels());
    let mut model = Model::new(cfg.encoder.clone(), cfg.model_seed)?;
    let history = train(
        &mut model,
        &LabeledRows { x: &tx, y: &ty },
        &LabeledRows { x: &vx, y: &vy },
        &cfg.train,
        &cfg.loss,
        on_epoch,
    )?;
    let detector = Detector {
        model,
        normalizer,
        tau: cfg.tau(),
    };
    Ok((detector, history))
}
