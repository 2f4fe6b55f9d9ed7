use super::ObjectiveError;
use crate::ensemble::{EnsembleConfig, EnsembleParams, NodeIndex};
use crate::kernel::RealArray;

/// Cross-task closeness penalty on the split tensor and its gradient.
///
/// `Σ_i λ_i Σ_{s<t} ‖W_i[s] − W_i[t]‖²` with `λ_i = λ / 2^depth(i)` when
/// `depth_decay` is set. The gradient has the split tensor's shape; leaves are
/// never penalized. Ensembles with one split slice (single task or shared
/// splits) always give zero.
pub fn closeness_penalty(
    cfg: &EnsembleConfig,
    params: &EnsembleParams,
    lambda: f64,
    depth_decay: bool,
) -> Result<(f64, RealArray), ObjectiveError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(ObjectiveError::NegativeLambda(lambda));
    }
    let shape = cfg.split_shape();
    if params.split_weights.shape() != shape {
        return Err(ObjectiveError::Shape {
            expected: shape.to_vec(),
            actual: params.split_weights.shape().to_vec(),
        });
    }
    let mut grad = RealArray::zeros(&shape);
    let tasks = cfg.split_tasks();
    if tasks < 2 || lambda == 0.0 {
        return Ok((0.0, grad));
    }

    let pm = cfg.num_features * cfg.num_trees;
    let w = params.split_weights.as_slice();
    let g = grad.as_mut_slice();
    let mut penalty = 0.0;
    let mut total = vec![0.0; pm];
    for node in 0..cfg.num_internal() {
        let lam = if depth_decay {
            lambda / (1u64 << NodeIndex(node).depth()) as f64
        } else {
            lambda
        };
        let base = node * tasks * pm;
        let slice = |t: usize| &w[base + t * pm..base + (t + 1) * pm];

        let mut node_sum = 0.0;
        for s in 0..tasks {
            for t in s + 1..tasks {
                node_sum += slice(s).iter().zip(slice(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        penalty += lam * node_sum;

        total.fill(0.0);
        for t in 0..tasks {
            for (acc, v) in total.iter_mut().zip(slice(t)) {
                *acc += v;
            }
        }
        let tf = tasks as f64;
        for t in 0..tasks {
            let out = &mut g[base + t * pm..base + (t + 1) * pm];
            for ((o, v), tot) in out.iter_mut().zip(slice(t)).zip(&total) {
                *o = 2.0 * lam * (tf * v - tot);
            }
        }
    }
    Ok((penalty, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::init_params;

    fn cfg(depth: usize, p: usize, m: usize, t: usize) -> EnsembleConfig {
        EnsembleConfig::new(m, depth, p).with_tasks(t)
    }

    #[test]
    fn identical_slices_give_zero() {
        let c = cfg(2, 3, 2, 3);
        let mut params = init_params(&c, 4);
        let pm = 6;
        let w = params.split_weights.as_mut_slice();
        for node in 0..3 {
            let (head, tail) = w[node * 3 * pm..(node + 1) * 3 * pm].split_at_mut(pm);
            tail[..pm].copy_from_slice(head);
            tail[pm..].copy_from_slice(head);
        }
        let (pen, g) = closeness_penalty(&c, &params, 2.0, true).unwrap();
        assert_eq!(pen, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_tasks_root_node() {
        // p = 2, m = 1: W_1 − W_2 = (1, 1)
        let c = cfg(1, 2, 1, 2);
        let mut params = EnsembleParams::zeros(&c);
        params.split_weights.as_mut_slice().copy_from_slice(&[1.0, 1.0, 0.0, 0.0]);
        let (pen, g) = closeness_penalty(&c, &params, 0.5, false).unwrap();
        assert_eq!(pen, 1.0);
        assert_eq!(g.as_slice(), &[1.0, 1.0, -1.0, -1.0]);
    }

    #[test]
    fn depth_decay_quarters_a_depth_two_node() {
        let c = cfg(3, 2, 1, 2);
        let mut params = EnsembleParams::zeros(&c);
        // node 3 is the first node at depth 2
        let o = c.split_shape()[1..].iter().product::<usize>() * 3;
        params.split_weights.as_mut_slice()[o..o + 2].copy_from_slice(&[1.0, 1.0]);
        assert_eq!(closeness_penalty(&c, &params, 0.5, false).unwrap().0, 1.0);
        assert_eq!(closeness_penalty(&c, &params, 0.5, true).unwrap().0, 0.25);
    }

    #[test]
    fn degenerate_cases() {
        let c = cfg(2, 2, 2, 1);
        let params = init_params(&c, 1);
        assert_eq!(closeness_penalty(&c, &params, 3.0, false).unwrap().0, 0.0);
        let c = cfg(2, 2, 2, 3).with_shared_splits(true);
        assert_eq!(closeness_penalty(&c, &init_params(&c, 1), 3.0, false).unwrap().0, 0.0);
        let c = cfg(2, 2, 2, 3);
        let params = init_params(&c, 1);
        assert_eq!(closeness_penalty(&c, &params, 0.0, false).unwrap().0, 0.0);
        assert_eq!(
            closeness_penalty(&c, &params, -1.0, false).unwrap_err(),
            ObjectiveError::NegativeLambda(-1.0)
        );
        assert!(closeness_penalty(&c, &params, f64::NAN, false).is_err());
    }

    #[test]
    fn invariant_under_task_permutation() {
        let c = cfg(2, 3, 2, 3);
        let params = init_params(&c, 9);
        let pm = 6;
        let mut swapped = params.clone();
        let w = swapped.split_weights.as_mut_slice();
        for node in 0..3 {
            let b = node * 3 * pm;
            for i in 0..pm {
                w.swap(b + i, b + 2 * pm + i);
            }
        }
        let a = closeness_penalty(&c, &params, 0.7, true).unwrap().0;
        let b = closeness_penalty(&c, &swapped, 0.7, true).unwrap().0;
        assert!((a - b).abs() <= 1e-15 * a);
        assert!(a > 0.0);
    }
}
