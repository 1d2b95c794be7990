//! Central finite-difference check of analytic feature gradients.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::loss::{caption_loss, LossInstance, LossKind, LossResult, RegionTarget};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Coordinates beyond this count are checked on a seeded subsample.
pub const MAX_CHECKED_COORDS: usize = 10_000;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (numerically) zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `loss(x).grad_points` against central differences of `loss(x).value`.
pub fn finite_diff_check<F>(exec: Exec, loss: F, x: &Array2<f64>, step: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn(&Array2<f64>) -> Result<LossResult> + Sync + Send,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let analytic = loss(x)?.grad_points;
    if analytic.dim() != x.dim() {
        return Err(Error::invalid("gradient shape differs from input shape"));
    }
    let (rows, cols) = x.dim();
    let total = rows * cols;
    let coords: Vec<usize> = if total > MAX_CHECKED_COORDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, total, MAX_CHECKED_COORDS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..total).collect()
    };
    let numeric = exec.try_map(&coords, |&c| -> Result<f64> {
        let (i, j) = (c / cols, c % cols);
        let mut xp = x.clone();
        xp[(i, j)] += step;
        let up = loss(&xp)?.value;
        xp[(i, j)] = x[(i, j)] - step;
        let down = loss(&xp)?.value;
        Ok((up - down) / (2.0 * step))
    })?;
    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: coords.len(),
    };
    for (&c, n) in coords.iter().zip(numeric) {
        let a = analytic[(c / cols, c % cols)];
        out.max_rel_error = out.max_rel_error.max(relative_error(a, n));
        out.max_abs_error = out.max_abs_error.max((a - n).abs());
    }
    Ok(out)
}

pub fn check_caption_loss(exec: Exec, kind: LossKind, inst: &LossInstance, scale: f64, step: f64) -> Result<GradCheck> {
    finite_diff_check(
        exec,
        |f| caption_loss(kind, &inst.with_features(f.clone()), scale),
        &inst.point_features,
        step,
        0,
    )
}

pub(crate) fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::from_shape_fn((n, d), |_| StandardNormal.sample(rng));
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    m
}

/// Seeded random loss instance: regions of varying size (some overlapping),
/// some points left uncovered.
pub fn random_instance(seed: u64, n_p: usize, n_t: usize, d: usize, n_regions: usize) -> LossInstance {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = random_unit_rows(&mut rng, n_p, d);
    let caps = random_unit_rows(&mut rng, n_t, d);
    let regions = (0..n_regions)
        .map(|k| {
            let size = rng.random_range(1..=(n_p / 3).max(1));
            let mut pts = rand::seq::index::sample(&mut rng, n_p, size).into_vec();
            pts.sort_unstable();
            RegionTarget {
                points: pts,
                target: if k < n_t { k } else { rng.random_range(0..n_t) },
            }
        })
        .collect();
    LossInstance::new(feats, caps, regions).expect("random instance is valid")
}
