//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{Grads, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-6;

// no larger step is tried once a coordinate agrees this well
const CLOSE_ENOUGH: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, as `(path, index)`.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn record(&mut self, path: &str, index: usize, err: f64) {
        let err = if err.is_nan() { f64::INFINITY } else { err };
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((path.to_owned(), index));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Smallest step.
    pub h: f64,
    /// Steps tried per coordinate: h, 10h, ... (`decades` of them). The
    /// smallest error counts, so a ReLU kink inside the large steps or
    /// roundoff on a near-zero gradient at the small ones is not reported
    /// as a mismatch; a wrong gradient disagrees at every step.
    pub decades: usize,
    /// Check a seeded random subset of this many coordinates when the
    /// model is larger.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: DEFAULT_STEP,
            decades: 4,
            max_coords: None,
            seed: 0,
        }
    }
}

/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn pick(total: usize, max_coords: Option<usize>, seed: u64) -> Vec<usize> {
    match max_coords {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, total, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    }
}

/// Checks the gradient of a scalar function of a flat vector.
pub fn check_function<F>(
    point: &mut [f64],
    analytic: &[f64],
    mut f: F,
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut report = GradCheckReport::empty();
    for i in pick(point.len(), max_coords, seed) {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(point);
        point[i] = orig - h;
        let minus = f(point);
        point[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        report.record("", i, relative_error(analytic[i], numeric));
    }
    report
}

/// Checks `analytic` against central differences of `loss` over the
/// coordinates of `params`; values are restored afterwards.
pub fn finite_diff_check<F>(
    params: &mut ParamStore,
    analytic: &Grads,
    mut loss: F,
    options: &GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(path, p)| (0..p.value.len()).map(move |i| (path.clone(), i)))
        .collect();
    let mut report = GradCheckReport::empty();
    for c in pick(coords.len(), options.max_coords, options.seed) {
        let (path, i) = &coords[c];
        let orig = params.get(path)[*i];
        let a = analytic.get(path).map_or(0.0, |g| g[*i]);
        let mut best = f64::INFINITY;
        let mut h = options.h;
        for _ in 0..options.decades.max(1) {
            params.param_mut(path).value[*i] = orig + h;
            let plus = loss(params);
            params.param_mut(path).value[*i] = orig - h;
            let minus = loss(params);
            params.param_mut(path).value[*i] = orig;
            let err = relative_error(a, (plus - minus) / (2.0 * h));
            if err.is_nan() {
                best = f64::INFINITY;
                break;
            }
            best = best.min(err);
            if best <= CLOSE_ENOUGH {
                break;
            }
            h *= 10.0;
        }
        report.record(path, *i, best);
    }
    report
}
