//! Supernode versus per-tree timing on one random instance.

use crate::ensemble::per_tree::looped_forward_backward;
use crate::ensemble::{backward, forward_into, init_params, EnsembleConfig, EnsembleError, ForwardTrace};
use crate::kernel::RealArray;
use crate::rng::{self, Purpose};
use rand::Rng;
use rand_distr::StandardNormal;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSpec {
    pub trees: usize,
    pub depth: usize,
    pub features: usize,
    pub batch: usize,
    /// Timed repetitions of each path; the minimum is kept.
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            trees: 100,
            depth: 4,
            features: 50,
            batch: 256,
            reps: 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub supernode: Duration,
    pub looped: Duration,
    /// Largest absolute difference between the two paths' outputs and gradients.
    pub max_abs_diff: f64,
}

impl BenchResult {
    pub fn speedup(&self) -> f64 {
        self.looped.as_secs_f64() / self.supernode.as_secs_f64()
    }
}

/// Times forward + backward on both paths.
///
/// Repetitions alternate between the paths and each keeps its fastest run,
/// so a noisy neighbour slows both rather than one.
pub fn speed_comparison(spec: &BenchSpec) -> Result<BenchResult, EnsembleError> {
    let cfg = EnsembleConfig::new(spec.trees, spec.depth, spec.features);
    cfg.validate()?;
    let mut params = init_params(&cfg, spec.seed);
    let mut rng = rng::stream(spec.seed, Purpose::Bench, 0);
    for v in params.leaf_weights.as_mut_slice() {
        *v = rng.sample::<f64, _>(StandardNormal) * 0.1;
    }
    let (b, p) = (spec.batch, spec.features);
    let xs = RealArray::new(vec![b, p], (0..b * p).map(|_| rng.sample(StandardNormal)).collect())?;
    let g = RealArray::new(vec![b, 1, 1], (0..b).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let mut trace = ForwardTrace::empty(&cfg);
    let mut supernode = Duration::MAX;
    let mut looped = Duration::MAX;
    let mut max_abs_diff = 0.0f64;
    // one untimed round warms caches and sizes the trace
    for rep in 0..=spec.reps.max(1) {
        let t0 = Instant::now();
        let preds = forward_into(&cfg, &params, &xs, &mut trace)?;
        let grads = backward(&cfg, &params, &trace, &xs, &g)?;
        let t1 = Instant::now();
        let (lp, lg) = looped_forward_backward(&cfg, &params, &xs, &g)?;
        let t2 = Instant::now();
        if rep == 0 {
            let pairs = [
                (preds.as_slice(), lp.as_slice()),
                (grads.split_weights.as_slice(), lg.split_weights.as_slice()),
                (grads.leaf_weights.as_slice(), lg.leaf_weights.as_slice()),
            ];
            for (a, c) in pairs {
                for (x, y) in a.iter().zip(c) {
                    max_abs_diff = max_abs_diff.max((x - y).abs());
                }
            }
            continue;
        }
        supernode = supernode.min(t1 - t0);
        looped = looped.min(t2 - t1);
    }
    Ok(BenchResult {
        supernode,
        looped,
        max_abs_diff,
    })
}
