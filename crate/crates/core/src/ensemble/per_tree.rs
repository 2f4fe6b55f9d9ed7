//! Tree-at-a-time reference implementations.
//!
//! These deliberately ignore the supernode layout. [`oracle_forward`] computes
//! every root-to-leaf probability as a product over the leaf's ancestors and
//! takes the expectation of the leaf outputs, one tree at a time with scalar
//! loops. [`looped_forward_backward`] does the same for a batch and also
//! differentiates each leaf probability directly. Both exist to check the
//! supernode passes and to time them against an unvectorized baseline.

use super::{EnsembleConfig, EnsembleError, EnsembleParams};
use crate::kernel::{RealArray, ShapeError};

/// Ancestors of every leaf as `(internal node, leaf lies in its left subtree)`.
fn leaf_paths(cfg: &EnsembleConfig) -> Vec<Vec<(usize, bool)>> {
    let internal = cfg.num_internal();
    (0..cfg.num_leaves())
        .map(|leaf| {
            let mut path = Vec::with_capacity(cfg.depth);
            let mut node = internal + leaf;
            while node > 0 {
                let parent = (node - 1) / 2;
                path.push((parent, node == 2 * parent + 1));
                node = parent;
            }
            path.reverse();
            path
        })
        .collect()
}

fn dot_tree(params: &EnsembleParams, node: usize, ts: usize, tree: usize, x: &[f64]) -> f64 {
    let mut a = 0.0;
    for (f, &xf) in x.iter().enumerate() {
        a += params.split_weights.get(&[node, ts, f, tree]) * xf;
    }
    a
}

/// Prediction for a single sample `x: [p]`, returned as `[T, k]`.
pub fn oracle_forward(cfg: &EnsembleConfig, params: &EnsembleParams, x: &[f64]) -> Result<RealArray, EnsembleError> {
    cfg.validate()?;
    params.check(cfg)?;
    if x.len() != cfg.num_features {
        return Err(ShapeError::Mismatch {
            op: "oracle_forward",
            left: vec![x.len()],
            right: vec![cfg.num_features],
        }
        .into());
    }
    let paths = leaf_paths(cfg);
    let mut out = RealArray::zeros(&[cfg.num_tasks, cfg.num_heads]);
    for t in 0..cfg.num_tasks {
        let ts = cfg.split_slice(t);
        for tree in 0..cfg.num_trees {
            for (leaf, path) in paths.iter().enumerate() {
                let mut prob = 1.0;
                for &(node, left) in path {
                    let s = cfg.activation.eval(dot_tree(params, node, ts, tree, x));
                    prob *= if left { s } else { 1.0 - s };
                }
                for h in 0..cfg.num_heads {
                    let o = params.leaf_weights.get(&[leaf, t, tree, h]);
                    let cur = out.get(&[t, h]);
                    out.set(&[t, h], cur + prob * o);
                }
            }
        }
    }
    Ok(out)
}

/// One tree's forward and backward over a batch, accumulating into `preds`
/// and `grads`. No subtree is ever skipped.
///
/// The tree's hyperplanes are first gathered into contiguous vectors, as a
/// standalone single-tree model would hold them.
pub fn tree_forward_backward(
    cfg: &EnsembleConfig,
    params: &EnsembleParams,
    tree: usize,
    xs: &RealArray,
    output_grads: &RealArray,
    preds: &mut RealArray,
    grads: &mut EnsembleParams,
) {
    let p = cfg.num_features;
    let k = cfg.num_heads;
    let tasks = cfg.num_tasks;
    let internal = cfg.num_internal();
    let split_tasks = cfg.split_tasks();
    let paths = leaf_paths(cfg);

    // [split task][node][feature] and [task][leaf][head]
    let mut w = vec![0.0; split_tasks * internal * p];
    for ts in 0..split_tasks {
        for node in 0..internal {
            for f in 0..p {
                w[(ts * internal + node) * p + f] = params.split_weights.get(&[node, ts, f, tree]);
            }
        }
    }
    let leaves = cfg.num_leaves();
    let mut o = vec![0.0; tasks * leaves * k];
    for t in 0..tasks {
        for leaf in 0..leaves {
            for h in 0..k {
                o[(t * leaves + leaf) * k + h] = params.leaf_weights.get(&[leaf, t, tree, h]);
            }
        }
    }
    let mut dw = vec![0.0; w.len()];
    let mut d_o = vec![0.0; o.len()];

    let mut s = vec![0.0; internal];
    let mut ds = vec![0.0; internal];
    let mut da = vec![0.0; internal];
    let pred = preds.as_mut_slice();
    let og_all = output_grads.as_slice();

    for b in 0..xs.shape()[0] {
        let x = &xs.as_slice()[b * p..(b + 1) * p];
        for t in 0..tasks {
            let ts = cfg.split_slice(t);
            for node in 0..internal {
                let wn = &w[(ts * internal + node) * p..(ts * internal + node + 1) * p];
                let mut a = 0.0;
                for f in 0..p {
                    a += wn[f] * x[f];
                }
                s[node] = cfg.activation.eval(a);
                ds[node] = cfg.activation.deriv(a);
                da[node] = 0.0;
            }
            let g = &og_all[(b * tasks + t) * k..(b * tasks + t + 1) * k];
            for (leaf, path) in paths.iter().enumerate() {
                let factor = |&(node, left): &(usize, bool)| if left { s[node] } else { 1.0 - s[node] };
                let prob: f64 = path.iter().map(factor).product();
                let lo = (t * leaves + leaf) * k;
                let mut og = 0.0;
                for h in 0..k {
                    pred[(b * tasks + t) * k + h] += prob * o[lo + h];
                    d_o[lo + h] += prob * g[h];
                    og += o[lo + h] * g[h];
                }
                // d prob / d a_node = ±S'(a_node) · product of the other factors
                for (pos, &(node, left)) in path.iter().enumerate() {
                    let others: f64 = path
                        .iter()
                        .enumerate()
                        .filter(|&(q, _)| q != pos)
                        .map(|(_, e)| factor(e))
                        .product();
                    let sign = if left { 1.0 } else { -1.0 };
                    da[node] += og * sign * ds[node] * others;
                }
            }
            for (node, &d) in da.iter().enumerate() {
                let dwn = &mut dw[(ts * internal + node) * p..(ts * internal + node + 1) * p];
                for f in 0..p {
                    dwn[f] += d * x[f];
                }
            }
        }
    }

    for ts in 0..split_tasks {
        for node in 0..internal {
            for f in 0..p {
                let cur = grads.split_weights.get(&[node, ts, f, tree]);
                grads.split_weights.set(&[node, ts, f, tree], cur + dw[(ts * internal + node) * p + f]);
            }
        }
    }
    for t in 0..tasks {
        for leaf in 0..leaves {
            for h in 0..k {
                let cur = grads.leaf_weights.get(&[leaf, t, tree, h]);
                grads.leaf_weights.set(&[leaf, t, tree, h], cur + d_o[(t * leaves + leaf) * k + h]);
            }
        }
    }
}

/// The whole ensemble as `m` independent per-tree passes.
pub fn looped_forward_backward(
    cfg: &EnsembleConfig,
    params: &EnsembleParams,
    xs: &RealArray,
    output_grads: &RealArray,
) -> Result<(RealArray, EnsembleParams), EnsembleError> {
    cfg.validate()?;
    params.check(cfg)?;
    let batch = xs.shape()[0];
    if xs.shape() != [batch, cfg.num_features] || output_grads.shape() != [batch, cfg.num_tasks, cfg.num_heads] {
        return Err(ShapeError::Mismatch {
            op: "looped_forward_backward",
            left: xs.shape().to_vec(),
            right: output_grads.shape().to_vec(),
        }
        .into());
    }
    let mut preds = RealArray::zeros(&[batch, cfg.num_tasks, cfg.num_heads]);
    let mut grads = EnsembleParams::zeros(cfg);
    for tree in 0..cfg.num_trees {
        tree_forward_backward(cfg, params, tree, xs, output_grads, &mut preds, &mut grads);
    }
    Ok((preds, grads))
}
