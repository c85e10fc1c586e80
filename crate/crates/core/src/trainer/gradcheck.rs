use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VlaadError};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is (near) zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient of `f` at `params` against central
/// finite differences on `n_coords` seeded random coordinates (all of them
/// when the vector is shorter).
pub fn gradient_check<F>(f: F, params: &[f64], n_coords: usize, step: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, grad) = f(params)?;
    if grad.len() != params.len() {
        return Err(VlaadError::DimensionMismatch {
            expected: params.len(),
            actual: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(VlaadError::NonFinite("analytic gradient"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = n_coords.min(params.len());
    let mut coords = rand::seq::index::sample(&mut rng, params.len(), k).into_vec();
    coords.sort_unstable();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        coords_checked: k,
    };
    let mut probe = params.to_vec();
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let (up, _) = f(&probe)?;
        probe[i] = orig - step;
        let (down, _) = f(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(VlaadError::NonFinite("finite-difference gradient"));
        }
        let err = relative_error(grad[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
