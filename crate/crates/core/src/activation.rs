//! Routing activations.
//!
//! The smooth-step is the cubic Hermite ramp that is exactly 0 below `-γ/2`,
//! exactly 1 above `γ/2`, and C¹ in between. Exact saturation is what lets
//! the ensemble skip whole subtrees in both passes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("smooth-step width must be positive and finite, got {0}")]
pub struct InvalidGamma(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothStep {
    gamma: f64,
}

impl Default for SmoothStep {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

impl SmoothStep {
    pub fn new(gamma: f64) -> Result<Self, InvalidGamma> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(Self { gamma })
        } else {
            Err(InvalidGamma(gamma))
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `out[j] = deriv(t[j])`, bit-identical to the scalar form.
    pub fn deriv_slice(&self, t: &[f64], out: &mut [f64]) {
        let half = 0.5 * self.gamma;
        let g3 = self.gamma * self.gamma * self.gamma;
        let (c1, c3, c6) = (1.5 / self.gamma, 2.0 / g3, 6.0 / g3);
        for (o, &t) in out.iter_mut().zip(t) {
            let v = 0.5 + t * (c1 - c3 * t * t);
            let v = if t <= -half { 0.0 } else { v };
            let v = if t >= half { 1.0 } else { v };
            let d = c1 - c6 * t * t;
            *o = if v == 0.0 || v == 1.0 { 0.0 } else { d };
        }
    }

    /// `out[j] = eval(t[j])`, bit-identical to the scalar form.
    pub fn eval_slice(&self, t: &[f64], out: &mut [f64]) {
        let half = 0.5 * self.gamma;
        let g3 = self.gamma * self.gamma * self.gamma;
        let (c1, c3) = (1.5 / self.gamma, 2.0 / g3);
        for (o, &t) in out.iter_mut().zip(t) {
            // computed unconditionally so the loop compiles to selects
            let v = 0.5 + t * (c1 - c3 * t * t);
            let v = if t <= -half { 0.0 } else { v };
            *o = if t >= half { 1.0 } else { v };
        }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let half = 0.5 * self.gamma;
        if t <= -half {
            0.0
        } else if t >= half {
            1.0
        } else {
            let g3 = self.gamma * self.gamma * self.gamma;
            // written as 1/2 + t·(c1 + c3·t²) so that eval(t) + eval(-t) == 1
            // holds up to a single rounding.
            0.5 + t * (1.5 / self.gamma - 2.0 / g3 * t * t)
        }
    }

    #[inline]
    pub fn deriv(&self, t: f64) -> f64 {
        // Keyed on the rounded value, not the interval: just inside ±γ/2 the
        // cubic can round to exactly 0 or 1, and a skipped subtree must then
        // receive no gradient.
        let v = self.eval(t);
        if v == 0.0 || v == 1.0 {
            0.0
        } else {
            let g3 = self.gamma * self.gamma * self.gamma;
            1.5 / self.gamma - 6.0 / g3 * t * t
        }
    }
}

/// Activation used at every split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    SmoothStep(SmoothStep),
    /// Plain sigmoid; never saturates exactly, so nothing is ever skipped.
    Logistic,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::SmoothStep(SmoothStep::default())
    }
}

impl Activation {
    pub fn deriv_slice(&self, t: &[f64], out: &mut [f64]) {
        match self {
            Activation::SmoothStep(st) => st.deriv_slice(t, out),
            Activation::Logistic => {
                for (o, &t) in out.iter_mut().zip(t) {
                    let s = sigmoid(t);
                    *o = s * (1.0 - s);
                }
            }
        }
    }

    pub fn eval_slice(&self, t: &[f64], out: &mut [f64]) {
        match self {
            Activation::SmoothStep(s) => s.eval_slice(t, out),
            Activation::Logistic => {
                for (o, &t) in out.iter_mut().zip(t) {
                    *o = sigmoid(t);
                }
            }
        }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Activation::SmoothStep(s) => s.eval(t),
            Activation::Logistic => sigmoid(t),
        }
    }

    #[inline]
    pub fn deriv(&self, t: f64) -> f64 {
        match self {
            Activation::SmoothStep(s) => s.deriv(t),
            Activation::Logistic => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
        }
    }

    /// Width of the responsive region; drives the initialization scale.
    pub fn scale(&self) -> f64 {
        match self {
            Activation::SmoothStep(s) => s.gamma(),
            Activation::Logistic => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
