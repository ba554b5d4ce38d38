//! Acceptance suite: one pass/fail line per criterion.

#[path = "fixtures/welch_cases.rs"]
mod welch_cases;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use nsflow::checkpoint::{Checkpoint, HistorySummary};
use nsflow::config::RunConfig;
use nsflow::diffcore::{grad_check, DiffError, GradCheckConfig, Graph, ParamStore, Tensor, Var, LAYER_NORM_EPS};
use nsflow::encoder::EncoderConfig;
use nsflow::evaluation::{confusion, fpr, prf1, threshold_sweep, SweepRow, DEFAULT_TAUS};
use nsflow::explain::{explain_in, sample_groups, validate_importances, xai_validate, DEFAULT_TOP_K};
use nsflow::flowdata::{generate_synthetic, ClassLabel, FeatureSchema, SynthConfig, NUM_FEATURES};
use nsflow::model::{Detector, Model, ModelError, Prediction};
use nsflow::objective::{combine, consistency_bce, focal_loss, total_loss, weighted_ce, LossWeights};
use nsflow::pipeline;
use nsflow::preprocess::{cohens_d, fit_normalizer, welch_t};
use nsflow::trainer::{combined_f1, make_sampler};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget_s: f64, out: Outcome) -> Outcome {
    let s = elapsed.as_secs_f64();
    match out {
        Ok(d) if s < budget_s => Ok(format!("{d}; {s:.1}s < {budget_s}s")),
        Ok(d) => Err(format!("{d}; runtime {s:.1}s exceeds {budget_s}s")),
        Err(d) => Err(format!("{d}; {s:.1}s")),
    }
}

fn diff(e: ModelError) -> DiffError {
    match e {
        ModelError::Diff(d) => d,
        other => DiffError::InvalidHyperparameter(other.to_string()),
    }
}

// 1. Gradient integrity.

fn primitive_checks() -> Result<Vec<(&'static str, f64)>, String> {
    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>>;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut rand_t = |r: usize, c: usize, lo: f64, hi: f64| {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    };
    let cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![rand_t(3, 4, -1.0, 1.0), rand_t(4, 2, -1.0, 1.0)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        (
            "affine",
            vec![rand_t(3, 4, -1.0, 1.0), rand_t(4, 5, -1.0, 1.0), rand_t(1, 5, -1.0, 1.0)],
            Box::new(|g, v| g.affine(v[0], v[1], v[2])),
        ),
        ("add", vec![rand_t(2, 3, -1.0, 1.0), rand_t(2, 3, -1.0, 1.0)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("add_row", vec![rand_t(3, 3, -1.0, 1.0), rand_t(1, 3, -1.0, 1.0)], Box::new(|g, v| g.add_row(v[0], v[1]))),
        (
            "elementwise_mul",
            vec![rand_t(2, 4, -1.0, 1.0), rand_t(2, 4, -1.0, 1.0)],
            Box::new(|g, v| g.elementwise_mul(v[0], v[1])),
        ),
        ("mul_row", vec![rand_t(3, 2, -1.0, 1.0), rand_t(1, 2, -1.0, 1.0)], Box::new(|g, v| g.mul_row(v[0], v[1]))),
        ("scale", vec![rand_t(2, 3, -1.0, 1.0)], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("add_scalar", vec![rand_t(2, 3, -1.0, 1.0)], Box::new(|g, v| g.add_scalar(v[0], 0.3))),
        ("relu", vec![rand_t(3, 4, 0.05, 1.0)], Box::new(|g, v| {
            let n = g.scale(v[0], -1.0)?;
            let both = g.concat_cols(&[v[0], n])?;
            g.relu(both)
        })),
        ("sigmoid", vec![rand_t(3, 4, -3.0, 3.0)], Box::new(|g, v| g.sigmoid(v[0]))),
        ("exp", vec![rand_t(3, 4, -2.0, 2.0)], Box::new(|g, v| g.exp(v[0]))),
        ("log", vec![rand_t(3, 4, 0.2, 3.0)], Box::new(|g, v| g.log(v[0]))),
        ("powf", vec![rand_t(3, 4, 0.2, 2.0)], Box::new(|g, v| g.powf(v[0], 2.5))),
        ("clamp", vec![rand_t(3, 4, 0.1, 0.9)], Box::new(|g, v| g.clamp(v[0], 0.0, 1.0))),
        ("softmax", vec![rand_t(3, 5, -2.0, 2.0)], Box::new(|g, v| g.softmax(v[0]))),
        ("log_softmax", vec![rand_t(3, 5, -2.0, 2.0)], Box::new(|g, v| g.log_softmax(v[0]))),
        (
            "layer_norm",
            vec![rand_t(4, 6, -2.0, 2.0), rand_t(1, 6, 0.5, 1.5), rand_t(1, 6, -0.5, 0.5)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        ),
        (
            "scaled_dot_attention",
            vec![rand_t(6, 4, -1.0, 1.0), rand_t(6, 4, -1.0, 1.0), rand_t(6, 4, -1.0, 1.0)],
            Box::new(|g, v| g.scaled_dot_attention(v[0], v[1], v[2], 3, 2)),
        ),
        ("sum", vec![rand_t(2, 3, -1.0, 1.0)], Box::new(|g, v| g.sum(v[0]))),
        ("mean", vec![rand_t(2, 3, -1.0, 1.0)], Box::new(|g, v| g.mean(v[0]))),
        (
            "concat_rows",
            vec![rand_t(2, 3, -1.0, 1.0), rand_t(1, 3, -1.0, 1.0)],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        ("select_rows", vec![rand_t(4, 3, -1.0, 1.0)], Box::new(|g, v| g.select_rows(v[0], vec![3, 0, 3]))),
        ("pick_cols", vec![rand_t(3, 4, -1.0, 1.0)], Box::new(|g, v| g.pick_cols(v[0], vec![2, 0, 3]))),
        (
            "embed_tokens",
            vec![
                rand_t(2, 3, -1.0, 1.0),
                rand_t(3, 4, -1.0, 1.0),
                rand_t(3, 4, -1.0, 1.0),
                rand_t(1, 4, -1.0, 1.0),
                rand_t(1, 4, -1.0, 1.0),
                rand_t(5, 4, -1.0, 1.0),
            ],
            Box::new(|g, v| g.embed_tokens(v[0], v[1], v[2], v[3], v[4], v[5])),
        ),
    ];
    let mut out = Vec::new();
    for (name, tensors, build) in cases {
        let mut store = ParamStore::new();
        let grp = store.add_group("p", 1.0, 0.0).map_err(|e| e.to_string())?;
        let ids: Vec<_> = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.add_tensor(grp, &format!("t{i}"), t).unwrap())
            .collect();
        let f = |g: &mut Graph, s: &ParamStore| {
            let vars = ids.iter().map(|&id| g.param(s, id)).collect::<Result<Vec<_>, _>>()?;
            let y = build(g, &vars)?;
            let n = g.value(y).len();
            g.weighted_sum(y, (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect())
        };
        let r = grad_check(&mut store, f, &GradCheckConfig::default()).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, r.max_rel_error));
    }
    Ok(out)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let prims = primitive_checks()?;
    let (worst_name, worst_prim) = prims
        .iter()
        .copied()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });

    let cfg = EncoderConfig {
        hidden: 16,
        layers: 1,
        heads: 4,
        feedforward: 32,
        dropout: 0.0,
    };
    let mut model = Model::new(cfg, 9).map_err(|e| e.to_string())?;
    // Move the predicate layer off its symmetric start so every path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for name in ["ltn/attention", "ltn/importance"] {
        let id = model.store.id(name).ok_or(format!("missing {name}"))?;
        for v in model.store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let x: Vec<[f64; NUM_FEATURES]> = (0..4)
        .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
        .collect();
    let labels = [
        ClassLabel::Normal,
        ClassLabel::InitialCompromise,
        ClassLabel::Normal,
        ClassLabel::DataExfiltration,
    ];
    let y: Vec<u8> = labels.iter().map(|l| l.binary()).collect();
    let w = LossWeights::default();
    let mut store = model.store.clone();
    let model = &model;
    let f = |g: &mut Graph, s: &ParamStore| {
        let fv = model.forward_with::<ChaCha8Rng>(g, s, &x, None).map_err(diff)?;
        let lb = focal_loss(g, fv.binary_logits, &y, &w)?;
        let la = weighted_ce(g, fv.stage_logits, &labels, &w)?;
        let ll = consistency_bce(g, fv.phi, &y)?;
        total_loss(g, lb, la, ll, &w)
    };
    let gc = GradCheckConfig {
        coordinates: 1000,
        seed: 3,
        ..Default::default()
    };
    let r = grad_check(&mut store, f, &gc).map_err(|e| e.to_string())?;
    let ok = r.max_rel_error < 1e-5 && worst_prim < 1e-5;
    within(
        t0.elapsed(),
        60.0,
        check(
            ok,
            format!(
                "full model max rel error {:.2e}, {} of {} coords at or above 1e-5 (worst {:?}); {} primitives, worst {worst_name} {:.2e}",
                r.max_rel_error,
                r.failed,
                r.checked,
                r.worst,
                prims.len(),
                worst_prim
            ),
        ),
    )
}

// 2. Metric oracle equivalence.

fn oracle_counts(pred: &[usize], truth: &[usize], c: usize) -> (u64, u64, u64) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fnn = 0;
    for i in 0..pred.len() {
        match (pred[i] == c, truth[i] == c) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    (tp, fp, fnn)
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 1000;
    let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
    let cm = confusion(&pred, &truth, 6).map_err(|e| e.to_string())?;
    for t in 0..6 {
        for p in 0..6 {
            let count = (0..n).filter(|&i| truth[i] == t && pred[i] == p).count() as u64;
            if cm.get(t, p) != count {
                return Err(format!("count mismatch at ({t}, {p})"));
            }
        }
    }
    let m = prf1(&cm);
    let mut worst: f64 = 0.0;
    let (mut mp, mut mr, mut mf, mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for c in 0..6 {
        let (tp, fp, fnn) = oracle_counts(&pred, &truth, c);
        let p = safe_div(tp as f64, (tp + fp) as f64);
        let r = safe_div(tp as f64, (tp + fnn) as f64);
        let f = safe_div(2.0 * p * r, p + r);
        let support = (tp + fnn) as f64;
        let got = &m.per_class[c];
        if got.support != tp + fnn {
            return Err(format!("support mismatch for class {c}"));
        }
        worst = worst.max((got.precision - p).abs()).max((got.recall - r).abs()).max((got.f1 - f).abs());
        mp += p / 6.0;
        mr += r / 6.0;
        mf += f / 6.0;
        wp += p * support / n as f64;
        wr += r * support / n as f64;
        wf += f * support / n as f64;
    }
    for (a, b) in [
        (m.macro_precision, mp),
        (m.macro_recall, mr),
        (m.macro_f1, mf),
        (m.weighted_precision, wp),
        (m.weighted_recall, wr),
        (m.weighted_f1, wf),
    ] {
        worst = worst.max((a - b).abs());
    }
    let bp: Vec<usize> = pred.iter().map(|&p| usize::from(p > 0)).collect();
    let bt: Vec<usize> = truth.iter().map(|&t| usize::from(t > 0)).collect();
    let bcm = confusion(&bp, &bt, 2).map_err(|e| e.to_string())?;
    let fp = (0..n).filter(|&i| bp[i] == 1 && bt[i] == 0).count() as f64;
    let tn = (0..n).filter(|&i| bp[i] == 0 && bt[i] == 0).count() as f64;
    worst = worst.max((fpr(&bcm).map_err(|e| e.to_string())? - fp / (fp + tn)).abs());
    within(t0.elapsed(), 5.0, check(worst <= 1e-12, format!("36 exact counts; max ratio deviation {worst:.1e}")))
}

// 3. Reference aggregate arithmetic.

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let binary = [0.9985, 0.9070];
    let stages = [0.8097, 0.7630, 0.7600, 0.4086, 0.8652];
    let f1_b = mean(&binary);
    let f1_a = mean(&stages);
    let six: Vec<f64> = binary[..1].iter().chain(&stages).copied().collect();
    let six_macro = mean(&six);
    let cf = combined_f1(f1_b, f1_a);
    // Normal recall 0.9986 as a confusion matrix.
    let truth = vec![0usize; 10_000];
    let pred: Vec<usize> = (0..10_000).map(|i| usize::from(i < 14)).collect();
    let cm = confusion(&pred, &truth, 2).map_err(|e| e.to_string())?;
    let rate = fpr(&cm).map_err(|e| e.to_string())?;
    let checks = [
        ("binary macro", f1_b, 0.9527),
        ("stage macro", f1_a, 0.7213),
        ("combined", cf, 0.8602),
        ("six-class macro", six_macro, 0.7675),
        ("fpr", rate, 0.0014),
    ];
    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-4)
        .map(|(n, got, want)| format!("{n} {got} vs {want}"))
        .collect();
    let exact = (f1_b - 0.95275).abs() < 1e-12;
    within(
        t0.elapsed(),
        1.0,
        check(
            bad.is_empty() && exact,
            if bad.is_empty() {
                format!("binary {f1_b:.5}, stage {f1_a:.4}, combined {cf:.4}, six-class {six_macro:.4}, fpr {rate:.4}")
            } else {
                bad.join("; ")
            },
        ),
    )
}

// 4. Statistics oracles and null calibration.

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let (mut worst_p, mut worst_d): (f64, f64) = (0.0, 0.0);
    for c in welch_cases::CASES {
        let w = welch_t(c.a, c.b).map_err(|e| e.to_string())?;
        let d = cohens_d(c.a, c.b).map_err(|e| e.to_string())?;
        worst_p = worst_p.max((w.p - c.p).abs()).max((w.t - c.t).abs());
        worst_d = worst_d.max((d - c.d).abs());
    }

    let ds = generate_synthetic(&SynthConfig::reference(6000, 4), &FeatureSchema::default()).map_err(|e| e.to_string())?;
    let normals: Vec<_> = ds.records.iter().filter(|r| !r.label.is_attack()).cloned().collect();
    let detector = Detector {
        model: Model::new(
            EncoderConfig {
                hidden: 16,
                layers: 1,
                heads: 2,
                feedforward: 32,
                dropout: 0.0,
            },
            4,
        )
        .map_err(|e| e.to_string())?,
        normalizer: fit_normalizer(&ds).map_err(|e| e.to_string())?,
        tau: 0.98,
    };
    let pool = nsflow::explain::importances(&detector, &normals).map_err(|e| e.to_string())?;
    let names = detector.normalizer.names.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let trials = 200;
    let mut calibrated = 0;
    let mut total_sig = 0;
    for _ in 0..trials {
        let idx = rand::seq::index::sample(&mut rng, pool.len(), 100).into_vec();
        let a: Vec<_> = idx[..50].iter().map(|&i| pool[i]).collect();
        let b: Vec<_> = idx[50..].iter().map(|&i| pool[i]).collect();
        let r = validate_importances(&names, &a, &b);
        total_sig += r.significant_05;
        if r.significant_05 <= 3 {
            calibrated += 1;
        }
    }
    let ok = worst_p <= 1e-6 && worst_d <= 1e-9 && calibrated * 100 >= 95 * trials;
    within(
        t0.elapsed(),
        30.0,
        check(
            ok,
            format!(
                "20 cases: max |Δt|,|Δp| {worst_p:.1e}, max |Δd| {worst_d:.1e}; null: {calibrated}/{trials} trials with ≤3 significant (mean {:.2})",
                total_sig as f64 / trials as f64
            ),
        ),
    )
}

// 5. Sampler balance.

fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let table = [
        (ClassLabel::Normal, 254_836),
        (ClassLabel::Pivoting, 2_122),
        (ClassLabel::Reconnaissance, 833),
        (ClassLabel::LateralMovement, 729),
        (ClassLabel::DataExfiltration, 527),
        (ClassLabel::InitialCompromise, 73),
    ];
    let labels: Vec<ClassLabel> = table.iter().flat_map(|&(c, n)| std::iter::repeat_n(c, n)).collect();
    let mut sampler = make_sampler(&labels, 5).map_err(|e| e.to_string())?;
    let draws = 100_000;
    let mut counts = [0u64; 6];
    for i in sampler.batch(draws) {
        counts[labels[i].index()] += 1;
    }
    let expected = draws as f64 / 6.0;
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let max_dev = freqs.iter().map(|f| (f - 1.0 / 6.0).abs()).fold(0.0, f64::max);
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(5.0).map_err(|e| e.to_string())?.cdf(chi2);
    within(
        t0.elapsed(),
        10.0,
        check(
            max_dev <= 0.02 && p > 0.001,
            format!("max |freq - 1/6| {max_dev:.4}; chi-square {chi2:.2}, p {p:.3}"),
        ),
    )
}

// 6. Threshold monotonicity.

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 5000;
    let preds: Vec<Prediction> = (0..n)
        .map(|_| {
            let raw: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let s: f64 = raw.iter().sum();
            Prediction {
                p_attack: rng.random_range(0.0..1.0f64).powf(0.3),
                stage_probs: raw.map(|v| v / s),
            }
        })
        .collect();
    let truth: Vec<ClassLabel> = (0..n)
        .map(|_| ClassLabel::from_index(rng.random_range(0..6)).expect("six classes"))
        .collect();
    let rows = threshold_sweep(&preds, &truth, &DEFAULT_TAUS).map_err(|e| e.to_string())?;
    let ok = rows
        .windows(2)
        .all(|w| w[1].predicted_attacks <= w[0].predicted_attacks && w[1].fpr <= w[0].fpr);
    let counts: Vec<usize> = rows.iter().map(|r| r.predicted_attacks).collect();
    let fprs: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.fpr)).collect();
    within(
        t0.elapsed(),
        5.0,
        check(ok, format!("predicted attacks {counts:?}; FPR [{}]", fprs.join(", "))),
    )
}

// 7 and 8. End-to-end run and explanation validation on its model.

struct Trained {
    cfg: RunConfig,
    splits: pipeline::Splits,
    detector: Detector,
}

fn best_row(rows: &[SweepRow]) -> &SweepRow {
    rows.iter()
        .fold(&rows[0], |b, r| if r.combined_f1 > b.combined_f1 { r } else { b })
}

fn criterion_7() -> (Outcome, Option<Trained>) {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let run = || -> Result<(Trained, usize, Vec<SweepRow>), String> {
        let ds = pipeline::load_or_generate(&cfg, None).map_err(|e| e.to_string())?;
        let splits = pipeline::split(&cfg, &ds).map_err(|e| e.to_string())?;
        let (detector, history) =
            pipeline::fit(&cfg, &splits.train, &splits.val, |_| {}).map_err(|e| e.to_string())?;
        let preds = detector.predict(&splits.test).map_err(|e| e.to_string())?;
        let rows = threshold_sweep(&preds, &splits.test.labels(), &cfg.taus).map_err(|e| e.to_string())?;
        let trained = Trained {
            cfg: cfg.clone(),
            splits,
            detector,
        };
        Ok((trained, history.epochs.len(), rows))
    };
    match run() {
        Err(e) => (Err(e), None),
        Ok((trained, epochs, rows)) => {
            let b = best_row(&rows);
            let ok = epochs <= 25 && b.binary_f1 >= 0.85 && b.fpr <= 0.01 && b.attack_f1 >= 0.60;
            let detail = format!(
                "{} flows, H={} L={} heads={}, {epochs} epochs; best τ={} binary F1 {:.4}, FPR {:.4}, stage F1 {:.4}",
                trained.cfg.total,
                trained.cfg.encoder.hidden,
                trained.cfg.encoder.layers,
                trained.cfg.encoder.heads,
                b.tau,
                b.binary_f1,
                b.fpr,
                b.attack_f1
            );
            (within(t0.elapsed(), 900.0, check(ok, detail)), Some(trained))
        }
    }
}

fn criterion_8(trained: Option<&Trained>) -> Outcome {
    let Some(t) = trained else {
        return Err("no model from criterion 7".into());
    };
    let t0 = Instant::now();
    let held = t.splits.held_out();
    let (attacks, normals) = sample_groups(&held, 50, t.cfg.xai_seed);
    if attacks.len() < 50 || normals.len() < 50 {
        return Err(format!("only {} attack / {} normal held-out flows", attacks.len(), normals.len()));
    }
    let report = xai_validate(&t.detector, &held.schema, &attacks, &normals).map_err(|e| e.to_string())?;
    let synth = t.cfg.synth().map_err(|e| e.to_string())?;
    let mut planted: Vec<usize> = synth.planted_shifts.iter().map(|s| s.feature).collect();
    planted.sort_unstable();
    planted.dedup();
    let recovered = planted.iter().filter(|&&f| report.features[f].p < 0.05).count();
    let needed = (planted.len() * 3).div_ceil(4);

    let mut deterministic = true;
    let mut worst_phi: f64 = 0.0;
    for id in (0..held.len()).step_by(held.len() / 20) {
        let a = explain_in(&t.detector, &held, id, DEFAULT_TOP_K).map_err(|e| e.to_string())?;
        let b = explain_in(&t.detector, &held, id, DEFAULT_TOP_K).map_err(|e| e.to_string())?;
        deterministic &= a == b;
        worst_phi = worst_phi.max((a.ltn.recompute_phi() - a.ltn.phi).abs());
    }
    let ok = recovered >= needed && deterministic && worst_phi <= 1e-12;
    within(
        t0.elapsed(),
        120.0,
        check(
            ok,
            format!(
                "{recovered}/{} planted features at p<0.05 (need {needed}); {} at p<0.001; deterministic {deterministic}; φ recompute error {worst_phi:.1e}",
                planted.len(),
                report.significant_001
            ),
        ),
    )
}

// 9. Loss closed forms.

fn scalar(build: impl FnOnce(&mut Graph) -> Result<Var, DiffError>) -> Result<f64, String> {
    let mut g = Graph::new();
    let v = build(&mut g).map_err(|e| e.to_string())?;
    g.scalar(v).map_err(|e| e.to_string())
}

fn criterion_9() -> Outcome {
    let t0 = Instant::now();
    let w = LossWeights::default();
    let unit = LossWeights {
        class_weights: [1.0, 1.0],
        ..LossWeights::default()
    };
    let mut worst: f64 = 0.0;
    let mut record = |got: f64, want: f64| worst = worst.max((got - want).abs());

    record(
        scalar(|g| {
            let x = g.input(Tensor::matrix(1, 2, vec![0.0, 9f64.ln()])?)?;
            focal_loss(g, x, &[1], &unit)
        })?,
        0.01 * -(0.9f64.ln()),
    );
    record(
        scalar(|g| {
            let x = g.input(Tensor::matrix(1, 2, vec![0.0, 800.0])?)?;
            focal_loss(g, x, &[1], &unit)
        })?,
        0.0,
    );
    record(
        scalar(|g| {
            let x = g.input(Tensor::zeros(&[1, 5]))?;
            weighted_ce(g, x, &[ClassLabel::InitialCompromise], &w)
        })?,
        6.0 * 5f64.ln(),
    );
    record(
        scalar(|g| {
            let x = g.input(Tensor::zeros(&[3, 5]))?;
            weighted_ce(g, x, &[ClassLabel::Normal; 3], &w)
        })?,
        0.0,
    );
    for (phi, y, want) in [(0.5, 0, 2f64.ln()), (0.5, 1, 2f64.ln()), (0.8, 1, -(0.8f64.ln()))] {
        record(
            scalar(|g| {
                let p = g.input(Tensor::matrix(1, 1, vec![phi])?)?;
                consistency_bce(g, p, &[y])
            })?,
            want,
        );
    }
    for ((a, b, c), want) in [((1.0, 1.0, 1.0), 2.7), ((0.0, 0.0, 0.0), 0.0), ((2.0, 0.0, 5.0), 3.0)] {
        let got = scalar(|g| {
            let x = g.input(Tensor::scalar(a))?;
            let y = g.input(Tensor::scalar(b))?;
            let z = g.input(Tensor::scalar(c))?;
            total_loss(g, x, y, z, &w)
        })?;
        record(got, want);
        record(combine(a, b, c, &w), want);
    }
    let closed_ok = worst <= 1e-9;

    let ce_unit = LossWeights {
        focal_gamma: 0.0,
        ..unit
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows: Vec<[f64; 2]> = (0..64).map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)]).collect();
    let y: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
    let focal = scalar(|g| {
        let x = g.input(Tensor::matrix(64, 2, rows.iter().flatten().copied().collect())?)?;
        focal_loss(g, x, &y, &ce_unit)
    })?;
    let ce = rows
        .iter()
        .zip(&y)
        .map(|(r, &c)| {
            let m = r[0].max(r[1]);
            m + ((r[0] - m).exp() + (r[1] - m).exp()).ln() - r[usize::from(c)]
        })
        .sum::<f64>()
        / 64.0;
    let reduction = (focal - ce).abs();
    within(
        t0.elapsed(),
        5.0,
        check(
            closed_ok && reduction <= 1e-12,
            format!("closed forms max |Δ| {worst:.1e}; γ=0 vs cross-entropy |Δ| {reduction:.1e} on 64 rows"),
        ),
    )
}

// 10. Checkpoint round trip.

fn criterion_10() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let ds = generate_synthetic(&SynthConfig::staged(2000, 10), &FeatureSchema::default()).map_err(|e| e.to_string())?;
    let mut model = Model::new(cfg.encoder.clone(), cfg.model_seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let detector = Detector {
        model,
        normalizer: fit_normalizer(&ds).map_err(|e| e.to_string())?,
        tau: cfg.tau(),
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let ck = Checkpoint::new(&detector, &cfg.to_text(), HistorySummary::default());
    ck.save(&p1).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&p1).map_err(|e| e.to_string())?;
    loaded.save(&p2).map_err(|e| e.to_string())?;
    let identical = std::fs::read(&p1).map_err(|e| e.to_string())? == std::fs::read(&p2).map_err(|e| e.to_string())?;
    let (_, restored) = loaded.detector().map_err(|e| e.to_string())?;
    let mut flows = ds.clone();
    flows.records.truncate(100);
    let before = detector.predict(&flows).map_err(|e| e.to_string())?;
    let after = restored.predict(&flows).map_err(|e| e.to_string())?;
    let bits = |p: &[Prediction]| -> Vec<u64> {
        p.iter()
            .flat_map(|x| std::iter::once(x.p_attack).chain(x.stage_probs))
            .map(f64::to_bits)
            .collect()
    };
    let same = bits(&before) == bits(&after);
    within(
        t0.elapsed(),
        10.0,
        check(
            identical && same,
            format!(
                "{} bytes; save/load/save identical {identical}; 100 predictions bit-identical {same}",
                ck.to_bytes().len()
            ),
        ),
    )
}

fn main() {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    results.push((1, "gradient integrity", criterion_1()));
    results.push((2, "metric oracle equivalence", criterion_2()));
    results.push((3, "reference aggregate arithmetic", criterion_3()));
    results.push((4, "statistics oracles and null calibration", criterion_4()));
    results.push((5, "sampler balance", criterion_5()));
    results.push((6, "threshold monotonicity", criterion_6()));
    let (c7, trained) = criterion_7();
    results.push((7, "end-to-end synthetic run", c7));
    results.push((8, "explanation validation", criterion_8(trained.as_ref())));
    results.push((9, "loss closed forms", criterion_9()));
    results.push((10, "checkpoint round trip", criterion_10()));

    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
