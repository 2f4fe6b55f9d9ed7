//! Per-sample negative log-likelihoods and their head derivatives.
//!
//! Log-link heads (`f_mu`, `f_phi`) are the log of the mean or dispersion;
//! the ZIP gate head `f_pi` is the logit of the probability that the count
//! comes from the Poisson component.

use super::ObjectiveError;
use crate::activation::sigmoid;
use statrs::function::gamma::{digamma, ln_gamma};

/// Largest log-link head accepted before `exp` would overflow.
pub const OVERFLOW_GUARD: f64 = 700.0;

/// Below this count the gamma ratio `Γ(y + φ)/Γ(φ)` is expanded as a product,
/// which stays exact for large `φ` where the two log-gammas nearly cancel.
const GAMMA_RATIO_SERIES: u64 = 64;

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log σ(x)`
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (-(a - b).abs()).exp().ln_1p()
}

fn guard(f: f64) -> Result<(), ObjectiveError> {
    if !f.is_finite() {
        return Err(ObjectiveError::NonFiniteHead(f));
    }
    if f > OVERFLOW_GUARD {
        return Err(ObjectiveError::Overflow(f));
    }
    Ok(())
}

fn count(y: f64) -> Result<u64, ObjectiveError> {
    if y >= 0.0 && y.fract() == 0.0 && y.is_finite() {
        Ok(y as u64)
    } else {
        Err(ObjectiveError::InvalidResponse(y))
    }
}

/// `0.5 (f - y)²`
pub fn squared_error(f: f64, y: f64) -> (f64, f64) {
    let r = f - y;
    (0.5 * r * r, r)
}

/// Binary cross-entropy on the logit `f`, `y ∈ [0, 1]`.
pub fn logistic(f: f64, y: f64) -> (f64, f64) {
    // -[y log σ(f) + (1 - y) log σ(-f)] = softplus(f) - y f
    (softplus(f) - y * f, sigmoid(f) - y)
}

/// Poisson NLL with log link, constant `log y!` dropped: `e^f - y f`.
pub fn poisson_nll(f: f64, y: f64) -> Result<(f64, f64), ObjectiveError> {
    guard(f)?;
    count(y)?;
    let mu = f.exp();
    Ok((mu - y * f, mu - y))
}

/// Zero-inflated Poisson NLL.
///
/// Returns `(loss, ∂/∂f_mu, ∂/∂f_pi)`.
pub fn zip_nll(f_mu: f64, f_pi: f64, y: f64) -> Result<(f64, f64, f64), ObjectiveError> {
    guard(f_mu)?;
    if !f_pi.is_finite() {
        return Err(ObjectiveError::NonFiniteHead(f_pi));
    }
    let n = count(y)?;
    let mu = f_mu.exp();
    let pi = sigmoid(f_pi);
    let log_pi = log_sigmoid(f_pi);
    if n == 0 {
        // -log((1 - π) + π e^{-μ}) as a two-term log-sum-exp
        let a = log_sigmoid(-f_pi);
        let b = log_pi - mu;
        let z = log_add_exp(a, b);
        let wa = (a - z).exp();
        let wb = (b - z).exp();
        let d_pi = wa * pi - wb * (1.0 - pi);
        Ok((-z, wb * mu, d_pi))
    } else {
        let loss = -(log_pi - mu + y * f_mu - ln_gamma(y + 1.0));
        Ok((loss, mu - y, -(1.0 - pi)))
    }
}

/// `(log Γ(y + φ) - log Γ(φ), ψ(y + φ) - ψ(φ))`
fn gamma_ratio(n: u64, phi: f64) -> (f64, f64) {
    if n < GAMMA_RATIO_SERIES {
        let mut lg = 0.0;
        let mut dg = 0.0;
        for i in 0..n {
            let v = phi + i as f64;
            lg += v.ln();
            dg += 1.0 / v;
        }
        (lg, dg)
    } else {
        let y = n as f64;
        (ln_gamma(y + phi) - ln_gamma(phi), digamma(y + phi) - digamma(phi))
    }
}

/// Negative binomial NLL in the mean/dispersion parameterization
/// (`Var[y] = μ + μ²/φ`).
///
/// Returns `(loss, ∂/∂f_mu, ∂/∂f_phi)`.
pub fn nb_nll(f_mu: f64, f_phi: f64, y: f64) -> Result<(f64, f64, f64), ObjectiveError> {
    guard(f_mu)?;
    guard(f_phi)?;
    let n = count(y)?;
    let phi = f_phi.exp();
    // q = μ / (μ + φ)
    let q = sigmoid(f_mu - f_phi);
    let log_q = log_sigmoid(f_mu - f_phi);
    let log_1mq = log_sigmoid(f_phi - f_mu);
    let (lg_ratio, dg_ratio) = gamma_ratio(n, phi);
    let loglik = lg_ratio - ln_gamma(y + 1.0) + y * log_q + phi * log_1mq;
    let d_mu = (phi + y) * q - y;
    let d_phi = -phi * (dg_ratio + log_1mq + q) + y * (1.0 - q);
    Ok((-loglik, d_mu, d_phi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn poisson_reference_values() {
        assert_eq!(poisson_nll(0.0, 0.0).unwrap(), (1.0, 1.0));
        let (_, g) = poisson_nll(3f64.ln(), 3.0).unwrap();
        assert!(g.abs() < 1e-15);
        let (l, g) = poisson_nll(1.0, 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - (e - 2.0)).abs() < 1e-15 && (g - (e - 2.0)).abs() < 1e-15);
        assert!((l - 0.718282).abs() < 1e-6);
    }

    #[test]
    fn poisson_overflow_guard() {
        assert_eq!(poisson_nll(701.0, 1.0), Err(ObjectiveError::Overflow(701.0)));
        assert!(poisson_nll(700.0, 1.0).is_ok());
        assert_eq!(poisson_nll(0.0, 1.5), Err(ObjectiveError::InvalidResponse(1.5)));
        assert_eq!(poisson_nll(0.0, -1.0), Err(ObjectiveError::InvalidResponse(-1.0)));
    }

    #[test]
    fn zip_reference_value() {
        let (l, _, _) = zip_nll(0.0, 0.0, 0.0).unwrap();
        let pmf = 0.5 + 0.5 * (-1f64).exp();
        assert!((pmf - 0.683940).abs() < 1e-6);
        assert!((l + pmf.ln()).abs() < 1e-15);
        assert!((l - 0.379885).abs() < 1e-6);
    }

    #[test]
    fn zip_reduces_to_poisson_when_gate_saturates() {
        for y in 0..8 {
            let y = y as f64;
            for &f in &[-1.0, 0.3, 1.7] {
                let (lz, gz, _) = zip_nll(f, 40.0, y).unwrap();
                let (lp, gp) = poisson_nll(f, y).unwrap();
                // ZIP keeps log y!; Poisson drops it.
                assert!((lz - ln_gamma(y + 1.0) - lp).abs() < 1e-12, "y={y} f={f}");
                assert!((gz - gp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zip_zero_branch_is_stable_for_large_mean() {
        // naive (1 - π) + π e^{-μ} with μ = e^5 ≈ 148 underflows the second term;
        // the loss must still be -log(1 - π).
        let (l, d_mu, _) = zip_nll(5.0, 0.0, 0.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(d_mu.is_finite() && d_mu >= 0.0);
    }

    #[test]
    fn nb_reference_value() {
        let (l, _, _) = nb_nll(0.0, 0.0, 0.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gamma_ratio_branches_agree() {
        for &phi in &[0.1, 1.0, 7.5, 300.0] {
            let (a, da) = gamma_ratio(63, phi);
            let (b, db) = (ln_gamma(63.0 + phi) - ln_gamma(phi), digamma(63.0 + phi) - digamma(phi));
            assert!(close(a, b, 1e-10), "phi={phi}: {a} vs {b}");
            assert!(close(da, db, 1e-8), "phi={phi}: {da} vs {db}");
        }
    }

    #[test]
    fn logistic_reference_values() {
        let (l, g) = logistic(0.0, 1.0);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, -0.5);
        let (_, g) = logistic(1.7, 0.0);
        assert!((g - fd(|f| logistic(f, 0.0).0, 1.7)).abs() < 1e-8);
        assert_eq!(squared_error(2.5, 2.5), (0.0, 0.0));
    }

    #[test]
    fn gradients_match_finite_differences_on_grid() {
        for y in [0.0, 1.0, 2.0, 5.0, 13.0, 70.0] {
            for &a in &[-2.0, -0.4, 0.0, 0.9, 2.3] {
                for &b in &[-2.5, -0.3, 0.0, 1.1, 3.0] {
                    let (_, g) = poisson_nll(a, y).unwrap();
                    assert!(close(g, fd(|f| poisson_nll(f, y).unwrap().0, a), 1e-5));

                    let (_, gm, gp) = zip_nll(a, b, y).unwrap();
                    assert!(close(gm, fd(|f| zip_nll(f, b, y).unwrap().0, a), 1e-5), "zip mu y={y} a={a} b={b}");
                    assert!(close(gp, fd(|f| zip_nll(a, f, y).unwrap().0, b), 1e-5), "zip pi y={y} a={a} b={b}");

                    let (_, gm, gp) = nb_nll(a, b, y).unwrap();
                    assert!(close(gm, fd(|f| nb_nll(f, b, y).unwrap().0, a), 1e-5), "nb mu y={y} a={a} b={b}");
                    assert!(close(gp, fd(|f| nb_nll(a, f, y).unwrap().0, b), 1e-5), "nb phi y={y} a={a} b={b}");

                    let yl = (y > 0.0) as u8 as f64;
                    let (_, g) = logistic(a, yl);
                    assert!(close(g, fd(|f| logistic(f, yl).0, a), 1e-5));
                }
            }
        }
    }
}
