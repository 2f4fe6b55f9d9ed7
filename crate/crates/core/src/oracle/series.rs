//! Truncated-series checks of the count likelihoods.

use crate::objective::{nb_nll, zip_nll};
use statrs::function::gamma::ln_gamma;

/// ZIP pmf, read back from the loss: `exp(−zip_nll)`.
pub fn zip_pmf(mu: f64, pi: f64, y: u64) -> f64 {
    let f_pi = (pi / (1.0 - pi)).ln();
    (-zip_nll(mu.ln(), f_pi, y as f64).expect("finite ZIP heads").0).exp()
}

/// Negative binomial pmf, read back from the loss: `exp(−nb_nll)`.
pub fn nb_pmf(mu: f64, phi: f64, y: u64) -> f64 {
    (-nb_nll(mu.ln(), phi.ln(), y as f64).expect("finite NB heads").0).exp()
}

pub fn poisson_pmf(mu: f64, y: u64) -> f64 {
    let y = y as f64;
    (y * mu.ln() - mu - ln_gamma(y + 1.0)).exp()
}

/// `Σ_{y=0}^{max_y} pmf(y)` with compensated summation.
pub fn pmf_sum(pmf: impl Fn(u64) -> f64, max_y: u64) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for y in 0..=max_y {
        let v = pmf(y);
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesMoments {
    pub mass: f64,
    pub mean: f64,
    pub variance: f64,
    pub terms: u64,
}

/// Mass, mean and variance of NB(μ, φ) by summing the pmf recurrence
/// `p(y+1) = p(y) (y + φ) / (y + 1) · μ / (μ + φ)` until terms drop below
/// `tol` past the mode. Independent of the loss code.
pub fn nb_series_moments(mu: f64, phi: f64, tol: f64) -> SeriesMoments {
    let q = mu / (mu + phi);
    let mut p = (phi * (phi / (mu + phi)).ln()).exp();
    let (mut mass, mut m1, mut m2) = (0.0, 0.0, 0.0);
    let mut y = 0u64;
    loop {
        let yf = y as f64;
        mass += p;
        m1 += yf * p;
        m2 += yf * yf * p;
        if yf > mu && p * yf * yf < tol || y > 10_000_000 {
            break;
        }
        p *= (yf + phi) / (yf + 1.0) * q;
        y += 1;
    }
    let mean = m1 / mass;
    SeriesMoments {
        mass,
        mean,
        variance: m2 / mass - mean * mean,
        terms: y + 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zip_mass_to_fifty() {
        let s = pmf_sum(|y| zip_pmf(2.0, 0.7, y), 50);
        assert!((s - 1.0).abs() < 1e-10, "{s}");
    }

    #[test]
    fn nb_moments() {
        let m = nb_series_moments(2.0, 3.0, 1e-18);
        assert!((m.mass - 1.0).abs() < 1e-12);
        assert!((m.mean - 2.0).abs() < 1e-6);
        assert!((m.variance - (2.0 + 4.0 / 3.0)).abs() < 1e-6);
    }

    #[test]
    fn nb_approaches_poisson() {
        for y in 0..=10 {
            let a = nb_pmf(2.0, 1e6, y);
            let b = poisson_pmf(2.0, y);
            assert!((a - b).abs() < 1e-5, "y={y}: {a} vs {b}");
        }
    }
}
