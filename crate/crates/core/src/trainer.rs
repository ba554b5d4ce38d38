//! Training loop: inverse-frequency sampling, per-group AdamW with global
//! norm clipping, staged encoder unfreezing and early stopping on the
//! combined validation F1.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DiffError, Graph, ParamGrads, ParamId, ParamStore};
use crate::encoder::{block_group, ENCODER_NORM_GROUP, FEATURE_ENCODER_GROUP};
use crate::evaluation::{binary_macro_f1, route_all, stage_macro_f1, EvalError};
use crate::flowdata::{ClassLabel, NUM_FEATURES};
use crate::heads::{argmax, ATTACK_HEAD_GROUP, BINARY_HEAD_GROUP};
use crate::ltn::LTN_GROUP;
use crate::model::{Model, ModelError};
use crate::objective::{consistency_bce, focal_loss, total_loss, weighted_ce, LossWeights};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRates {
    pub encoder: f64,
    pub feature_encoder: f64,
    pub binary_head: f64,
    pub attack_head: f64,
    pub ltn: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub val_batch_size: usize,
    pub learning_rates: GroupRates,
    pub encoder_weight_decay: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub patience: usize,
    /// First epoch (1-based) in which the top encoder blocks train.
    pub unfreeze_epoch: usize,
    pub unfrozen_encoder_lr: f64,
    /// Threshold used for the validation binary F1.
    pub tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 25,
            batch_size: 32,
            val_batch_size: 64,
            learning_rates: GroupRates {
                encoder: 1e-5,
                feature_encoder: 8e-5,
                binary_head: 8e-5,
                attack_head: 2e-4,
                ltn: 3e-4,
            },
            encoder_weight_decay: 1e-2,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            patience: 8,
            unfreeze_epoch: 3,
            unfrozen_encoder_lr: 5e-6,
            tau: crate::heads::DEFAULT_TAU,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let r = &self.learning_rates;
        let rates = [r.encoder, r.feature_encoder, r.binary_head, r.attack_head, r.ltn, self.unfrozen_encoder_lr];
        let ok = rates.iter().all(|v| *v > 0.0 && v.is_finite())
            && self.encoder_weight_decay >= 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && self.patience >= 1
            && self.max_epochs >= 1
            && self.batch_size >= 1
            && self.val_batch_size >= 1
            && self.unfreeze_epoch <= self.max_epochs
            && self.tau > 0.0
            && self.tau < 1.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// `0.6·F1_b + 0.4·F1_a`.
pub fn combined_f1(f1_b: f64, f1_a: f64) -> f64 {
    0.6 * f1_b + 0.4 * f1_a
}

/// Draws sample indices with replacement, each sample weighted by the
/// inverse count of its class.
pub struct WeightedSampler {
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

pub fn make_sampler(labels: &[ClassLabel], seed: u64) -> Result<WeightedSampler, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyDataset("sampler labels"));
    }
    let mut counts: BTreeMap<ClassLabel, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0) += 1;
    }
    let weights: Vec<f64> = labels.iter().map(|l| 1.0 / counts[l] as f64).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    Ok(WeightedSampler {
        weights,
        dist,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl WeightedSampler {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.dist.sample(&mut self.rng)).collect()
    }
}

/// Learning-rate, decay and freeze state of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSetting {
    pub name: String,
    pub frozen: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

/// Per-group settings for a 1-based epoch. The top `min(2, layers)` encoder
/// blocks are frozen before `unfreeze_epoch` and train at the reduced rate
/// from then on; lower blocks train at the encoder rate throughout.
pub fn unfreeze_schedule(epoch: usize, cfg: &TrainConfig, layers: usize) -> Vec<GroupSetting> {
    let r = &cfg.learning_rates;
    let set = |name: String, lr: f64, wd: f64, frozen: bool| GroupSetting {
        name,
        frozen,
        learning_rate: lr,
        weight_decay: wd,
    };
    let top = layers - layers.min(2);
    let mut out = vec![set(FEATURE_ENCODER_GROUP.into(), r.feature_encoder, cfg.weight_decay, false)];
    for l in 0..layers {
        let setting = if l < top {
            set(block_group(l), r.encoder, cfg.encoder_weight_decay, false)
        } else if epoch < cfg.unfreeze_epoch {
            set(block_group(l), r.encoder, cfg.encoder_weight_decay, true)
        } else {
            set(block_group(l), cfg.unfrozen_encoder_lr, cfg.encoder_weight_decay, false)
        };
        out.push(setting);
    }
    out.push(set(ENCODER_NORM_GROUP.into(), r.encoder, cfg.encoder_weight_decay, false));
    out.push(set(BINARY_HEAD_GROUP.into(), r.binary_head, cfg.weight_decay, false));
    out.push(set(ATTACK_HEAD_GROUP.into(), r.attack_head, cfg.weight_decay, false));
    out.push(set(LTN_GROUP.into(), r.ltn, cfg.weight_decay, false));
    out
}

pub fn apply_schedule(store: &mut ParamStore, settings: &[GroupSetting]) {
    for s in settings {
        if let Some(g) = store.group_mut(&s.name) {
            g.frozen = s.frozen;
            g.learning_rate = s.learning_rate;
            g.weight_decay = s.weight_decay;
        }
    }
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// AdamW with decoupled weight decay and per-parameter bias correction.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    state: BTreeMap<ParamId, Moments>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clips `grads` to global norm `clip_norm`, then updates every
    /// non-frozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut ParamGrads, clip_norm: f64) -> Result<StepStats, TrainError> {
        if !grads.is_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
        let grad_norm = grads.global_norm();
        if grad_norm > clip_norm {
            grads.scale(clip_norm / grad_norm);
        }
        let clipped_norm = grads.global_norm();
        let (b1, b2) = ADAM_BETAS;
        for (id, g) in grads.iter() {
            if store.is_frozen(id) {
                continue;
            }
            let group = &store.groups()[id.group];
            let (lr, wd) = (group.learning_rate, group.weight_decay);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t);
            let c2 = 1.0 - b2.powi(st.t);
            let theta = store.get_mut(id).data_mut();
            for (((w, gi), m), v) in theta.iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w *= 1.0 - lr * wd;
                *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(StepStats { grad_norm, clipped_norm })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_focal: f64,
    pub loss_stage: f64,
    pub loss_consistency: f64,
    pub f1_b: f64,
    pub f1_a: f64,
    pub f1_c: f64,
    pub best: bool,
}

impl EpochRecord {
    /// One structured log line.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={:.6} focal={:.6} stage={:.6} consistency={:.6} f1_b={:.4} f1_a={:.4} f1_c={:.4}{}",
            self.epoch,
            self.loss_total,
            self.loss_focal,
            self.loss_stage,
            self.loss_consistency,
            self.f1_b,
            self.f1_a,
            self.f1_c,
            if self.best { " best" } else { "" }
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        let e = self.best_epoch?;
        self.epochs.iter().find(|r| r.epoch == e)
    }
}

/// Normalised rows with their labels.
pub struct LabeledRows<'a> {
    pub x: &'a [[f64; NUM_FEATURES]],
    pub y: &'a [ClassLabel],
}

/// Validation F1s: binary macro at `tau` and teacher-forced five-stage
/// macro on true attacks.
pub fn validation_scores(model: &Model, val: &LabeledRows, cfg: &TrainConfig) -> Result<(f64, f64), TrainError> {
    let mut preds = Vec::with_capacity(val.x.len());
    for chunk in val.x.chunks(cfg.val_batch_size) {
        preds.extend(model.predict(chunk)?);
    }
    let routed = route_all(&preds, cfg.tau);
    let f1_b = binary_macro_f1(&routed, val.y)?;
    let forced: Vec<ClassLabel> = preds
        .iter()
        .zip(val.y)
        .map(|(p, t)| {
            if t.is_attack() {
                ClassLabel::from_stage_index(argmax(&p.stage_probs)).expect("five stages")
            } else {
                ClassLabel::Normal
            }
        })
        .collect();
    let f1_a = stage_macro_f1(&forced, val.y)?;
    Ok((f1_b, f1_a))
}

fn non_finite(epoch: usize, batch: usize, e: impl std::fmt::Display) -> TrainError {
    TrainError::NonFiniteLoss {
        epoch,
        batch,
        detail: e.to_string(),
    }
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the highest validation F1_c. `on_epoch` sees every record as
/// it is produced.
pub fn train(
    model: &mut Model,
    train: &LabeledRows,
    val: &LabeledRows,
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    weights.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    if train.x.is_empty() {
        return Err(TrainError::EmptyDataset("training split"));
    }
    if val.x.is_empty() {
        return Err(TrainError::EmptyDataset("validation split"));
    }
    let mut sampler = make_sampler(train.y, cfg.seed)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = AdamW::new();
    let steps = train.x.len().div_ceil(cfg.batch_size);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        apply_schedule(&mut model.store, &unfreeze_schedule(epoch, cfg, model.config.layers));
        let mut sums = [0.0; 4];
        for batch in 0..steps {
            let idx = sampler.batch(cfg.batch_size);
            let x: Vec<[f64; NUM_FEATURES]> = idx.iter().map(|&i| train.x[i]).collect();
            let y: Vec<ClassLabel> = idx.iter().map(|&i| train.y[i]).collect();
            let yb: Vec<u8> = y.iter().map(|l| l.binary()).collect();

            let mut g = Graph::new();
            let rng = (model.config.dropout > 0.0).then_some(&mut dropout_rng);
            let fw = model.forward_with(&mut g, &model.store, &x, rng).map_err(|e| match e {
                ModelError::Diff(d @ DiffError::NonFiniteValue(_)) => non_finite(epoch, batch, d),
                other => other.into(),
            })?;
            let build = |g: &mut Graph| -> Result<_, DiffError> {
                let lb = focal_loss(g, fw.binary_logits, &yb, weights)?;
                let la = weighted_ce(g, fw.stage_logits, &y, weights)?;
                let ll = consistency_bce(g, fw.phi, &yb)?;
                let total = total_loss(g, lb, la, ll, weights)?;
                Ok((lb, la, ll, total))
            };
            let (lb, la, ll, total) = build(&mut g).map_err(|e| non_finite(epoch, batch, e))?;
            let vals = [total, lb, la, ll].map(|v| g.value(v).data()[0]);
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(non_finite(epoch, batch, format!("{vals:?}")));
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            let grads = g.backward(total).map_err(|e| non_finite(epoch, batch, e))?;
            let mut pg = g.param_grads(&grads, &model.store);
            opt.step(&mut model.store, &mut pg, cfg.clip_norm)?;
        }

        let (f1_b, f1_a) = validation_scores(model, val, cfg)?;
        let f1_c = combined_f1(f1_b, f1_a);
        let improved = best.as_ref().is_none_or(|(b, _)| f1_c > *b);
        if improved {
            best = Some((f1_c, model.store.clone()));
            history.best_epoch = Some(epoch);
            for r in &mut history.epochs {
                r.best = false;
            }
            since_best = 0;
        } else {
            since_best += 1;
        }
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            loss_total: sums[0] / n,
            loss_focal: sums[1] / n,
            loss_stage: sums[2] / n,
            loss_consistency: sums[3] / n,
            f1_b,
            f1_a,
            f1_c,
            best: improved,
        };
        log::info!("{}", record.log_line());
        on_epoch(&record);
        history.epochs.push(record);
        if since_best >= cfg.patience {
            break;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::encoder::EncoderConfig;

    #[test]
    fn combined_f1_cases() {
        assert!((combined_f1(0.95275, 0.7213) - 0.86017).abs() < 1e-9);
        assert_eq!(combined_f1(1.0, 1.0), 1.0);
        assert!((combined_f1(0.0, 1.0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn sampler_balances_two_classes() {
        let labels: Vec<ClassLabel> = (0..100)
            .map(|i| if i < 90 { ClassLabel::Normal } else { ClassLabel::Pivoting })
            .collect();
        let mut s = make_sampler(&labels, 1).unwrap();
        let draws = s.batch(100_000);
        let b = draws.iter().filter(|&&i| i >= 90).count() as f64 / 1e5;
        assert!((b - 0.5).abs() < 0.02, "{b}");
        assert!((s.weights()[0] - 1.0 / 90.0).abs() < 1e-15);
    }

    #[test]
    fn sampler_single_class_is_uniform_and_deterministic() {
        let labels = vec![ClassLabel::Normal; 10];
        let mut a = make_sampler(&labels, 5).unwrap();
        let mut b = make_sampler(&labels, 5).unwrap();
        let da = a.batch(50_000);
        assert_eq!(da, b.batch(50_000));
        let mut counts = [0usize; 10];
        for i in da {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|c| (*c as f64 / 5000.0 - 1.0).abs() < 0.1));
        assert!(make_sampler(&[], 0).is_err());
    }

    fn one_param_store(w: f64, wd: f64, lr: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let g = s.add_group("g", lr, wd).unwrap();
        let id = s.add_tensor(g, "w", Tensor::scalar(w)).unwrap();
        (s, id)
    }

    #[test]
    fn adamw_first_step() {
        let (mut s, id) = one_param_store(0.5, 0.0, 1e-3);
        let mut g = ParamGrads::new();
        g.insert(id, Tensor::scalar(1.0));
        AdamW::new().step(&mut s, &mut g, 10.0).unwrap();
        let dw = s.get(id).data()[0] - 0.5;
        assert!((dw + 1e-3).abs() < 1e-9, "{dw}");
    }

    #[test]
    fn adamw_zero_gradient_is_a_no_op() {
        let (mut s, id) = one_param_store(0.5, 0.0, 1e-3);
        let mut g = ParamGrads::new();
        g.insert(id, Tensor::scalar(0.0));
        AdamW::new().step(&mut s, &mut g, 1.0).unwrap();
        assert_eq!(s.get(id).data()[0], 0.5);
    }

    #[test]
    fn clipping_scales_to_unit_norm() {
        let mut s = ParamStore::new();
        let gi = s.add_group("g", 1e-3, 0.0).unwrap();
        let id = s.add_tensor(gi, "w", Tensor::row(vec![0.0, 0.0])).unwrap();
        let mut g = ParamGrads::new();
        g.insert(id, Tensor::row(vec![6.0, 8.0]));
        let st = AdamW::new().step(&mut s, &mut g, 1.0).unwrap();
        assert_eq!(st.grad_norm, 10.0);
        assert!((st.clipped_norm - 1.0).abs() < 1e-12);
        assert!((g.get(id).unwrap().data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn frozen_groups_are_untouched_and_nan_is_rejected() {
        let (mut s, id) = one_param_store(0.5, 0.1, 1e-3);
        s.group_at_mut(0).frozen = true;
        let mut g = ParamGrads::new();
        g.insert(id, Tensor::scalar(3.0));
        AdamW::new().step(&mut s, &mut g, 1.0).unwrap();
        assert_eq!(s.get(id).data()[0], 0.5);
        let mut bad = ParamGrads::new();
        bad.insert(id, Tensor::scalar(f64::NAN));
        assert!(matches!(AdamW::new().step(&mut s, &mut bad, 1.0), Err(TrainError::NonFiniteGradient)));
    }

    #[test]
    fn schedule_freezes_top_blocks_until_unfreeze_epoch() {
        let cfg = TrainConfig::default();
        let find = |v: &[GroupSetting], n: &str| v.iter().find(|s| s.name == n).cloned().unwrap();
        let e1 = unfreeze_schedule(1, &cfg, 2);
        assert!(find(&e1, "encoder.block0").frozen && find(&e1, "encoder.block1").frozen);
        assert!(!find(&e1, FEATURE_ENCODER_GROUP).frozen);
        let e3 = unfreeze_schedule(3, &cfg, 2);
        let b = find(&e3, "encoder.block1");
        assert!(!b.frozen && b.learning_rate == 5e-6);
        let single = unfreeze_schedule(1, &cfg, 1);
        assert!(find(&single, "encoder.block0").frozen);
        let deep = unfreeze_schedule(1, &cfg, 4);
        assert!(!find(&deep, "encoder.block1").frozen && find(&deep, "encoder.block2").frozen);
    }

    fn separable(n: usize, seed: u64) -> (Vec<[f64; NUM_FEATURES]>, Vec<ClassLabel>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let attack = i % 4 == 0;
                let mut x: [f64; NUM_FEATURES] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                x[0] = if attack { 2.0 } else { -2.0 } + rng.random_range(-0.5..0.5);
                (x, if attack { ClassLabel::Reconnaissance } else { ClassLabel::Normal })
            })
            .unzip()
    }

    fn small_model() -> Model {
        Model::new(
            EncoderConfig {
                hidden: 16,
                layers: 1,
                heads: 2,
                feedforward: 32,
                dropout: 0.0,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn separable_data_is_learned_and_runs_are_identical() {
        let (tx, ty) = separable(200, 1);
        let (vx, vy) = separable(100, 2);
        // 70 steps in total, so the rates are raised well above the defaults.
        let cfg = TrainConfig {
            max_epochs: 10,
            tau: 0.5,
            learning_rates: GroupRates {
                encoder: 1e-3,
                feature_encoder: 3e-3,
                binary_head: 3e-3,
                attack_head: 3e-3,
                ltn: 3e-3,
            },
            unfrozen_encoder_lr: 1e-3,
            ..Default::default()
        };
        let run = || {
            let mut m = small_model();
            let h = train(
                &mut m,
                &LabeledRows { x: &tx, y: &ty },
                &LabeledRows { x: &vx, y: &vy },
                &cfg,
                &LossWeights::default(),
                |_| {},
            )
            .unwrap();
            (m, h)
        };
        let (m, h) = run();
        let best = h.best().unwrap();
        assert!(best.f1_b >= 0.95, "{:?}", h.epochs.iter().map(|e| e.f1_b).collect::<Vec<_>>());
        assert!(h.epochs.iter().all(|e| e.f1_c <= best.f1_c));
        let (vb, _) = validation_scores(&m, &LabeledRows { x: &vx, y: &vy }, &cfg).unwrap();
        assert_eq!(vb, best.f1_b);
        let (_, h2) = run();
        assert_eq!(h, h2);
    }

    #[test]
    fn flat_validation_stops_early() {
        let (tx, ty) = separable(64, 3);
        let vx = tx.clone();
        let vy = vec![ClassLabel::Normal; vx.len()];
        let cfg = TrainConfig {
            tau: 0.999_999,
            ..Default::default()
        };
        let mut m = small_model();
        let h = train(
            &mut m,
            &LabeledRows { x: &tx, y: &ty },
            &LabeledRows { x: &vx, y: &vy },
            &cfg,
            &LossWeights::default(),
            |_| {},
        )
        .unwrap();
        // Epoch 1 sets the best score; eight flat epochs follow.
        assert_eq!(h.epochs.len(), 9);
    }
}
