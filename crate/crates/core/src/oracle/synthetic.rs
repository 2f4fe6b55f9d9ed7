//! Seeded synthetic datasets.
//!
//! Features are i.i.d. standard normal. Every draw comes from one
//! `(seed, Generate)` stream in a fixed order, so a spec always produces the
//! same rows.

use crate::data::Dataset;
use crate::kernel::RealArray;
use crate::rng::{self, Purpose};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Balanced binary labels; class means `±separation/2` along `(1, 1)/√2`
    /// in the first two features.
    TwoClusters { separation: f64 },
    /// `y = x·β + noise·ε`, `β` standard normal.
    LinearRegression { noise: f64 },
    /// `y = d · Poisson(μ(x))`, `d ~ Bernoulli(π(x))`, with
    /// `logit π(x) = logit(pi) + signal·u(x)` and
    /// `log μ(x) = log(mu) + signal·v(x)` capped at `mu_cap`; `u`, `v` are
    /// fixed unit combinations of the first three features.
    ZipCounts { pi: f64, mu: f64, signal: f64, mu_cap: f64 },
    /// Gamma–Poisson counts with mean `μ(x)` as above and dispersion `phi`.
    NbCounts { mu: f64, phi: f64, signal: f64 },
    /// `T` regression tasks `y_t = sin(x·w_t) + 0.5 x·w_t + noise·ε` with
    /// `w_t = rho·w + √(1 − rho²)·u_t`; each response is hidden with
    /// probability `missing_rate`.
    RelatedMultitask {
        tasks: usize,
        rho: f64,
        noise: f64,
        missing_rate: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(generator: Generator, n: usize, p: usize, seed: u64) -> Self {
        Self { generator, n, p, seed }
    }

    pub fn num_tasks(&self) -> usize {
        match self.generator {
            Generator::RelatedMultitask { tasks, .. } => tasks,
            _ => 1,
        }
    }

    pub fn min_features(&self) -> usize {
        match self.generator {
            Generator::TwoClusters { .. } => 2,
            Generator::ZipCounts { .. } | Generator::NbCounts { .. } => 3,
            _ => 1,
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn poisson(rng: &mut impl Rng, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("positive Poisson mean").sample(rng)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

const U: [f64; 3] = [0.577_350_269_189_625_8, 0.577_350_269_189_625_8, -0.577_350_269_189_625_8];
const V: [f64; 3] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

fn dot3(w: &[f64; 3], x: &[f64]) -> f64 {
    w[0] * x[0] + w[1] * x[1] + w[2] * x[2]
}

/// Builds the dataset.
pub fn generate(spec: &SyntheticSpec) -> Dataset {
    generate_with_truth(spec).0
}

/// The dataset together with the true conditional mean `E[y|x]` (`[N, T]`;
/// for classification, `P(y = 1 | x)`).
pub fn generate_with_truth(spec: &SyntheticSpec) -> (Dataset, RealArray) {
    assert!(spec.p >= spec.min_features(), "generator needs at least {} features", spec.min_features());
    let (n, p) = (spec.n, spec.p);
    let t = spec.num_tasks();
    let mut rng = rng::stream(spec.seed, Purpose::Generate, 0);

    // generator-level draws come first
    let (beta, task_w) = match spec.generator {
        Generator::LinearRegression { .. } => ((0..p).map(|_| normal(&mut rng)).collect(), Vec::new()),
        Generator::RelatedMultitask { tasks, rho, .. } => {
            let scale = 1.0 / (p as f64).sqrt();
            let shared: Vec<f64> = (0..p).map(|_| normal(&mut rng) * scale).collect();
            let own = (1.0 - rho * rho).max(0.0).sqrt();
            let ws: Vec<Vec<f64>> = (0..tasks)
                .map(|_| shared.iter().map(|s| rho * s + own * normal(&mut rng) * scale).collect())
                .collect();
            (Vec::new(), ws)
        }
        _ => (Vec::new(), Vec::new()),
    };

    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n * t);
    let mut mask = Vec::with_capacity(n * t);
    let mut truth = Vec::with_capacity(n * t);
    for _ in 0..n {
        let row_start = x.len();
        match spec.generator {
            Generator::TwoClusters { separation } => {
                let label = rng.random_bool(0.5);
                let shift = if label { 0.5 * separation } else { -0.5 * separation } / std::f64::consts::SQRT_2;
                for f in 0..p {
                    let c = if f < 2 { shift } else { 0.0 };
                    x.push(c + normal(&mut rng));
                }
                let row = &x[row_start..];
                // log-odds of class 1 is separation · (x0 + x1)/√2 for unit-variance clusters
                let z = separation * (row[0] + row[1]) / std::f64::consts::SQRT_2;
                truth.push(crate::activation::sigmoid(z));
                y.push(if label { 1.0 } else { 0.0 });
                mask.push(true);
            }
            Generator::LinearRegression { noise } => {
                x.extend((0..p).map(|_| normal(&mut rng)));
                let mean: f64 = x[row_start..].iter().zip(&beta).map(|(a, b)| a * b).sum();
                truth.push(mean);
                y.push(mean + noise * normal(&mut rng));
                mask.push(true);
            }
            Generator::ZipCounts { pi, mu, signal, mu_cap } => {
                x.extend((0..p).map(|_| normal(&mut rng)));
                let row = &x[row_start..];
                let pi_x = if pi <= 0.0 {
                    0.0
                } else if pi >= 1.0 {
                    1.0
                } else {
                    crate::activation::sigmoid(logit(pi) + signal * dot3(&U, row))
                };
                let mu_x = (mu.ln() + signal * dot3(&V, row)).exp().min(mu_cap);
                let d = rng.random_bool(pi_x);
                let count = poisson(&mut rng, mu_x);
                truth.push(pi_x * mu_x);
                y.push(if d { count } else { 0.0 });
                mask.push(true);
            }
            Generator::NbCounts { mu, phi, signal } => {
                x.extend((0..p).map(|_| normal(&mut rng)));
                let mu_x = (mu.ln() + signal * dot3(&V, &x[row_start..])).exp();
                let rate = Gamma::new(phi, mu_x / phi).expect("positive gamma parameters").sample(&mut rng);
                truth.push(mu_x);
                y.push(poisson(&mut rng, rate));
                mask.push(true);
            }
            Generator::RelatedMultitask { noise, missing_rate, .. } => {
                x.extend((0..p).map(|_| normal(&mut rng)));
                for w in &task_w {
                    let z: f64 = x[row_start..].iter().zip(w).map(|(a, b)| a * b).sum();
                    let mean = z.sin() + 0.5 * z;
                    truth.push(mean);
                    let v = mean + noise * normal(&mut rng);
                    let seen = !rng.random_bool(missing_rate.clamp(0.0, 1.0));
                    y.push(if seen { v } else { 0.0 });
                    mask.push(seen);
                }
            }
        }
    }

    let feature_names = (0..p).map(|f| format!("x{f}")).collect();
    let task_names = if t == 1 {
        vec!["y".to_string()]
    } else {
        (0..t).map(|k| format!("y{k}")).collect()
    };
    let data = Dataset::new(
        RealArray::new(vec![n, p], x).expect("generated features"),
        RealArray::new(vec![n, t], y).expect("generated responses"),
        mask,
        feature_names,
        task_names,
    );
    (data, RealArray::new(vec![n, t], truth).expect("generated truth"))
}
