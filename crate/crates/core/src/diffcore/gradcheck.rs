use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Graph, ParamGrads, ParamId, ParamStore, Var};

/// Settings for a central finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step; must lie in `[1e-6, 1e-3]`.
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates to sample; every coordinate is checked when the model has
    /// fewer. Values below 200 are raised to 200.
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-5,
            coordinates: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates at or above the tolerance.
    pub failed: usize,
    /// `(parameter, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Relative error used by the checker: `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Analytic gradients of the scalar built by `forward`.
pub fn analytic_grads<F>(store: &ParamStore, forward: &F) -> Result<ParamGrads, DiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, store)?;
    let grads = g.backward(loss)?;
    Ok(g.param_grads(&grads, store))
}

/// Compares reverse-mode gradients of `forward` against central finite
/// differences over a seeded sample of trainable coordinates.
pub fn grad_check<F>(
    store: &mut ParamStore,
    forward: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, DiffError>,
{
    let analytic = analytic_grads(store, &forward)?;
    compare_gradients(store, forward, &analytic, cfg)
}

/// Finite-difference comparison against a caller-supplied gradient set.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    forward: F,
    analytic: &ParamGrads,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, DiffError>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(DiffError::InvalidHyperparameter(format!(
            "grad_check eps {} outside [1e-6, 1e-3]",
            cfg.eps
        )));
    }
    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .filter(|id| !store.is_frozen(*id))
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let wanted = cfg.coordinates.max(200);
    let chosen: Vec<(ParamId, usize)> = if coords.len() <= wanted {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picks = sample(&mut rng, coords.len(), wanted).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| coords[i]).collect()
    };

    let eval = |store: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let v = forward(&mut g, store)?;
        g.scalar(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        failed: 0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    for (id, i) in chosen {
        let original = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = original + cfg.eps;
        let plus = eval(store);
        store.get_mut(id).data_mut()[i] = original - cfg.eps;
        let minus = eval(store);
        store.get_mut(id).data_mut()[i] = original;
        let numeric = (plus? - minus?) / (2.0 * cfg.eps);
        let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        report.failed += usize::from(err >= cfg.tolerance);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.full_name(id), i, a, numeric));
        }
    }
    Ok(report)
}
