//! Independent references for testing: the per-tree scalar forward pass,
//! central finite differences, truncated-series distribution checks and
//! seeded synthetic data, plus the speed comparison behind `bench`.

mod bench;
mod series;
mod synthetic;

pub use bench::{speed_comparison, BenchResult, BenchSpec};
pub use crate::ensemble::per_tree::{looped_forward_backward, oracle_forward};
pub use series::{nb_pmf, nb_series_moments, pmf_sum, poisson_pmf, zip_pmf, SeriesMoments};
pub use synthetic::{generate, generate_with_truth, Generator, SyntheticSpec};

/// Central-difference gradient of `loss` at `theta`.
pub fn finite_diff_grad(mut loss: impl FnMut(&[f64]) -> f64, theta: &[f64], step: f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = loss(&x);
            x[i] = orig - step;
            let down = loss(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps coordinates whose true
/// gradient is zero from dividing by rounding noise.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
