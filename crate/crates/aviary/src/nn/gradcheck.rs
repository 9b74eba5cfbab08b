//! Finite-difference gradient verification (64-bit mode).

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Compare an analytic gradient against central finite differences of a
/// scalar loss over a random subsample of parameter coordinates.
///
/// Returns the maximum relative error over the sampled coordinates, with
/// relative error `|a - n| / max(|a|, |n|, 1e-6)`. `n_coords` caps the
/// number of checked coordinates (all of them when the parameter vector is
/// smaller); `h` is the central-difference step.
pub fn grad_check<F>(
    theta: &[f64],
    analytic: &[f64],
    mut loss: F,
    n_coords: usize,
    h: f64,
    seed: u64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len(), "gradient length must match parameters");
    assert!(h > 0.0);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut indices: Vec<usize> = if theta.len() <= n_coords {
        (0..theta.len()).collect()
    } else {
        let mut set = std::collections::HashSet::with_capacity(n_coords);
        while set.len() < n_coords {
            set.insert(rng.gen_range(0..theta.len()));
        }
        set.into_iter().collect()
    };
    indices.sort_unstable();

    let mut scratch = theta.to_vec();
    let mut max_rel = 0.0f64;
    for idx in indices {
        let orig = scratch[idx];
        scratch[idx] = orig + h;
        let lp = loss(&scratch);
        scratch[idx] = orig - h;
        let lm = loss(&scratch);
        scratch[idx] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratic() {
        // L(theta) = sum theta_i^2, gradient 2 theta
        let theta: Vec<f64> = (0..32).map(|i| 0.1 * i as f64 - 1.0).collect();
        let analytic: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let err = grad_check(&theta, &analytic, |t| t.iter().map(|v| v * v).sum(), 200, 1e-5, 1);
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn detects_corrupted_gradient() {
        let theta: Vec<f64> = (0..32).map(|i| 0.1 * i as f64 - 1.0).collect();
        let analytic: Vec<f64> = theta.iter().map(|t| 2.0 * t * 1.05).collect();
        let err = grad_check(&theta, &analytic, |t| t.iter().map(|v| v * v).sum(), 200, 1e-5, 1);
        assert!(err > 1e-2, "err = {err}");
    }
}
