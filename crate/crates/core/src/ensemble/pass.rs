//! Supernode forward and backward passes.
//!
//! Forward routes each sample down all trees at once: one matrix-vector
//! product per visited supernode, reach probabilities pushed to the children,
//! then subtree values folded back up (`v_i = s ⊙ v_left + (1 - s) ⊙ v_right`).
//! A supernode whose reach is exactly zero for every tree is never touched.
//!
//! Backward uses the same recursion: `∂L/∂O_l = ρ_l g` and
//! `∂L/∂a_i = ρ_i S'(a_i) (v_left - v_right)·g`. Gradients are accumulated in
//! fixed chunks of samples and the chunk sums are added in chunk order, so the
//! result is bit-identical for any worker count.

use super::{EnsembleConfig, EnsembleError, EnsembleParams};
use crate::kernel::{RealArray, ShapeError};
#[cfg(doc)]
use crate::kernel::matvec_into;
use rayon::prelude::*;

/// Samples per gradient accumulation chunk; fixes the reduction order.
const GRAD_CHUNK: usize = 64;
const PREDICT_CHUNK: usize = 64;

/// Everything backward needs from a forward pass over a batch.
///
/// Per sample the trace holds pre-activations `a` and subtree values `v` for
/// each internal node, reach probabilities `ρ` for every node, and a visited
/// flag per (node, task). The subtree value of a visited leaf is its leaf
/// matrix, kept once for the whole batch. Unvisited entries are zero.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    cfg: EnsembleConfig,
    batch: usize,
    /// `[B, internal, T, m]`
    pre_activations: RealArray,
    /// `[B, nodes, T, m]`
    reach: RealArray,
    /// `[B, internal, T, m, k]`
    values: RealArray,
    /// Leaf weights the pass ran with, `[leaves, T, m, k]`.
    leaf_values: Vec<f64>,
    /// `[B, nodes, T]`
    visited: Vec<bool>,
    zeros: Vec<f64>,
}

impl ForwardTrace {
    /// A trace covering no samples, to be filled by [`forward_into`].
    pub fn empty(cfg: &EnsembleConfig) -> Self {
        let (m, k, tasks) = (cfg.num_trees, cfg.num_heads, cfg.num_tasks);
        let (internal, nodes) = (cfg.num_internal(), cfg.num_nodes());
        Self {
            cfg: *cfg,
            batch: 0,
            pre_activations: RealArray::zeros(&[0, internal, tasks, m]),
            reach: RealArray::zeros(&[0, nodes, tasks, m]),
            values: RealArray::zeros(&[0, internal, tasks, m, k]),
            leaf_values: Vec::new(),
            visited: Vec::new(),
            zeros: vec![0.0; m * k],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.cfg
    }

    /// Reach probabilities of `node` for every tree.
    pub fn reach(&self, sample: usize, node: usize, task: usize) -> &[f64] {
        let m = self.cfg.num_trees;
        let o = self.node_offset(sample, node, task) * m;
        &self.reach.as_slice()[o..o + m]
    }

    /// Pre-activations of internal `node` for every tree.
    pub fn pre_activations(&self, sample: usize, node: usize, task: usize) -> &[f64] {
        let m = self.cfg.num_trees;
        let o = ((sample * self.cfg.num_internal() + node) * self.cfg.num_tasks + task) * m;
        &self.pre_activations.as_slice()[o..o + m]
    }

    /// Routing `S(a)` of internal `node` for every tree; zero if unvisited.
    pub fn routing(&self, sample: usize, node: usize, task: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cfg.num_trees];
        if self.visited(sample, node, task) {
            self.cfg
                .activation
                .eval_slice(self.pre_activations(sample, node, task), &mut out);
        }
        out
    }

    /// Subtree values of `node`, `[tree, head]` row-major.
    pub fn values(&self, sample: usize, node: usize, task: usize) -> &[f64] {
        let (internal, tasks) = (self.cfg.num_internal(), self.cfg.num_tasks);
        let mk = self.cfg.num_trees * self.cfg.num_heads;
        if node < internal {
            let o = ((sample * internal + node) * tasks + task) * mk;
            &self.values.as_slice()[o..o + mk]
        } else if self.visited(sample, node, task) {
            let o = ((node - internal) * tasks + task) * mk;
            &self.leaf_values[o..o + mk]
        } else {
            &self.zeros
        }
    }

    pub fn visited(&self, sample: usize, node: usize, task: usize) -> bool {
        self.visited[self.node_offset(sample, node, task)]
    }

    /// Number of (sample, node, task) supernodes actually evaluated.
    pub fn visited_count(&self) -> usize {
        self.visited.iter().filter(|&&v| v).count()
    }

    fn node_offset(&self, sample: usize, node: usize, task: usize) -> usize {
        (sample * self.cfg.num_nodes() + node) * self.cfg.num_tasks + task
    }
}

fn check_inputs(cfg: &EnsembleConfig, params: &EnsembleParams, xs: &RealArray) -> Result<usize, EnsembleError> {
    cfg.validate()?;
    params.check(cfg)?;
    let p = cfg.num_features;
    let batch = match xs.shape() {
        &[b, q] if q == p => b,
        other => {
            return Err(ShapeError::Mismatch {
                op: "forward",
                left: other.to_vec(),
                right: vec![usize::MAX, p],
            }
            .into())
        }
    };
    if let Some(pos) = xs.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(EnsembleError::NonFiniteInput {
            row: pos / p,
            col: pos % p,
        });
    }
    Ok(batch)
}

/// Samples per block in the passes. A supernode's weights are streamed once
/// per block rather than once per sample.
const BLOCK: usize = 16;

/// Trees handled together by the block kernels; sized to stay in registers.
const TILE: usize = 8;

/// `out[r, :] = Σ_f w[f, :] · xs[rows[r], f]` for a `[p, m]` weight matrix,
/// summed in feature order from zero (the arithmetic of [`matvec_into`]).
fn block_matvec(w: &[f64], m: usize, xs: &[f64], p: usize, rows: &[usize], out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was just detected.
            return unsafe { block_matvec_avx512(w, m, xs, p, rows, out) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was just detected.
            return unsafe { block_matvec_avx2(w, m, xs, p, rows, out) };
        }
    }
    block_matvec_generic(w, m, xs, p, rows, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn block_matvec_avx512(w: &[f64], m: usize, xs: &[f64], p: usize, rows: &[usize], out: &mut [f64]) {
    block_matvec_generic(w, m, xs, p, rows, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn block_matvec_avx2(w: &[f64], m: usize, xs: &[f64], p: usize, rows: &[usize], out: &mut [f64]) {
    block_matvec_generic(w, m, xs, p, rows, out)
}

#[inline(always)]
fn block_matvec_generic(w: &[f64], m: usize, xs: &[f64], p: usize, rows: &[usize], out: &mut [f64]) {
    let full = m - m % TILE;
    let w = &w[..p * m];
    let mut r = 0;
    // four samples at a time share each weight load
    while r + 4 <= rows.len() {
        let x: [&[f64]; 4] = std::array::from_fn(|q| &xs[rows[r + q] * p..rows[r + q] * p + p]);
        for j0 in (0..full).step_by(TILE) {
            let mut acc = [[0.0; TILE]; 4];
            for (f, wrow) in w.chunks_exact(m).enumerate() {
                let wf: &[f64; TILE] = wrow[j0..j0 + TILE].try_into().unwrap();
                for (accq, xq) in acc.iter_mut().zip(&x) {
                    let xf = xq[f];
                    for q in 0..TILE {
                        accq[q] += wf[q] * xf;
                    }
                }
            }
            for (q, accq) in acc.iter().enumerate() {
                out[(r + q) * m + j0..(r + q) * m + j0 + TILE].copy_from_slice(accq);
            }
        }
        for q in 0..4 {
            for j in full..m {
                let mut acc = 0.0;
                for (wrow, &xf) in w.chunks_exact(m).zip(x[q]) {
                    acc += wrow[j] * xf;
                }
                out[(r + q) * m + j] = acc;
            }
        }
        r += 4;
    }
    for (r, &b) in rows.iter().enumerate().skip(r) {
        let x = &xs[b * p..(b + 1) * p];
        let o = &mut out[r * m..(r + 1) * m];
        for j0 in (0..full).step_by(TILE) {
            let mut acc = [0.0; TILE];
            for (wrow, &xf) in w.chunks_exact(m).zip(x) {
                let wf: &[f64; TILE] = wrow[j0..j0 + TILE].try_into().unwrap();
                for q in 0..TILE {
                    acc[q] += wf[q] * xf;
                }
            }
            o[j0..j0 + TILE].copy_from_slice(&acc);
        }
        for j in full..m {
            let mut acc = 0.0;
            for (wrow, &xf) in w.chunks_exact(m).zip(x) {
                acc += wrow[j] * xf;
            }
            o[j] = acc;
        }
    }
}

/// `g[f, :] += xt[f, r] · delta[r, :]` for each `r` in order (the rank-one
/// updates of `outer_accumulate`), where `xt: [p, n]` holds the inputs of
/// the `n` contributing samples transposed.
fn block_outer(g: &mut [f64], m: usize, xt: &[f64], n: usize, delta: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was just detected.
            return unsafe { block_outer_avx512(g, m, xt, n, delta) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was just detected.
            return unsafe { block_outer_avx2(g, m, xt, n, delta) };
        }
    }
    block_outer_generic(g, m, xt, n, delta)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn block_outer_avx512(g: &mut [f64], m: usize, xt: &[f64], n: usize, delta: &[f64]) {
    block_outer_generic(g, m, xt, n, delta)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn block_outer_avx2(g: &mut [f64], m: usize, xt: &[f64], n: usize, delta: &[f64]) {
    block_outer_generic(g, m, xt, n, delta)
}

#[inline(always)]
fn block_outer_generic(g: &mut [f64], m: usize, xt: &[f64], n: usize, delta: &[f64]) {
    let full = m - m % TILE;
    let p = g.len() / m;
    let delta = &delta[..n * m];
    let mut f = 0;
    // four features at a time share each delta load
    while f + 4 <= p {
        let x: [&[f64]; 4] = std::array::from_fn(|q| &xt[(f + q) * n..(f + q + 1) * n]);
        for j0 in (0..full).step_by(TILE) {
            let mut acc: [[f64; TILE]; 4] =
                std::array::from_fn(|q| g[(f + q) * m + j0..(f + q) * m + j0 + TILE].try_into().unwrap());
            for (r, drow) in delta.chunks_exact(m).enumerate() {
                let d: &[f64; TILE] = drow[j0..j0 + TILE].try_into().unwrap();
                for (accq, xq) in acc.iter_mut().zip(&x) {
                    let xf = xq[r];
                    for q in 0..TILE {
                        accq[q] += xf * d[q];
                    }
                }
            }
            for (q, accq) in acc.iter().enumerate() {
                g[(f + q) * m + j0..(f + q) * m + j0 + TILE].copy_from_slice(accq);
            }
        }
        f += 4;
    }
    for f in f..p {
        let xf = &xt[f * n..(f + 1) * n];
        for j0 in (0..full).step_by(TILE) {
            let mut acc: [f64; TILE] = g[f * m + j0..f * m + j0 + TILE].try_into().unwrap();
            for (drow, &x) in delta.chunks_exact(m).zip(xf) {
                let d: &[f64; TILE] = drow[j0..j0 + TILE].try_into().unwrap();
                for q in 0..TILE {
                    acc[q] += x * d[q];
                }
            }
            g[f * m + j0..f * m + j0 + TILE].copy_from_slice(&acc);
        }
    }
    for f in 0..p {
        let xf = &xt[f * n..(f + 1) * n];
        for j in full..m {
            let mut acc = g[f * m + j];
            for (drow, &x) in delta.chunks_exact(m).zip(xf) {
                acc += x * drow[j];
            }
            g[f * m + j] = acc;
        }
    }
}

/// Trace storage for a contiguous block of samples.
struct BlockSlots<'a> {
    pre: &'a mut [f64],
    reach: &'a mut [f64],
    values: &'a mut [f64],
    visited: &'a mut [bool],
    pred: &'a mut [f64],
}

/// Working buffers of [`forward_block`], reused across blocks.
#[derive(Default)]
struct Scratch {
    zeros: Vec<f64>,
    active: Vec<usize>,
    abuf: Vec<f64>,
    act: Vec<f64>,
}

/// Runs a block of samples through every tree and task, writing every slot.
///
/// Pre-activations are `Σ_f W[f, :] x[f]` accumulated in feature order for
/// each sample, the same arithmetic as [`matvec_into`], with the samples of
/// the block interleaved so each weight row is read once.
fn forward_block(cfg: &EnsembleConfig, params: &EnsembleParams, xs: &[f64], s: BlockSlots<'_>, scratch: &mut Scratch) {
    let p = cfg.num_features;
    let m = cfg.num_trees;
    let k = cfg.num_heads;
    let mk = m * k;
    let tasks = cfg.num_tasks;
    let internal = cfg.num_internal();
    let nodes = cfg.num_nodes();
    let n = xs.len() / p;
    let BlockSlots {
        pre,
        reach,
        values,
        visited,
        pred,
    } = s;
    let (pre_s, reach_s, val_s, vis_s) = (internal * tasks * m, nodes * tasks * m, internal * tasks * mk, nodes * tasks);

    let Scratch {
        zeros,
        active,
        abuf,
        act,
    } = scratch;
    zeros.clear();
    zeros.resize(mk, 0.0);
    abuf.resize(n * m, 0.0);
    // routing of the current task, `[b, node, m]`
    act.resize(n * internal * m, 0.0);
    for t in 0..tasks {
        let ts = cfg.split_slice(t);
        for b in 0..n {
            reach[b * reach_s + t * m..b * reach_s + (t + 1) * m].fill(1.0);
        }

        for i in 0..internal {
            let ro = (i * tasks + t) * m;
            let lo = ((2 * i + 1) * tasks + t) * m;
            let rgo = ((2 * i + 2) * tasks + t) * m;
            active.clear();
            for b in 0..n {
                let rb = &mut reach[b * reach_s..(b + 1) * reach_s];
                if rb[ro..ro + m].iter().any(|&r| r != 0.0) {
                    active.push(b);
                } else {
                    visited[b * vis_s + i * tasks + t] = false;
                    pre[b * pre_s + ro..b * pre_s + ro + m].fill(0.0);
                    rb[lo..lo + m].fill(0.0);
                    rb[rgo..rgo + m].fill(0.0);
                }
            }
            if active.is_empty() {
                continue;
            }
            let w = params.split_matrix(cfg, i, ts);
            let a_all = &mut abuf[..active.len() * m];
            block_matvec(w, m, xs, p, active, a_all);
            for (a, &b) in a_all.chunks_exact(m).zip(active.iter()) {
                visited[b * vis_s + i * tasks + t] = true;
                let po = b * pre_s + ro;
                pre[po..po + m].copy_from_slice(a);
                let s_b = &mut act[(b * internal + i) * m..(b * internal + i + 1) * m];
                cfg.activation.eval_slice(a, s_b);
                let (head, tail) = reach[b * reach_s..(b + 1) * reach_s].split_at_mut(lo);
                let (left, right) = tail.split_at_mut(rgo - lo);
                for (((&r, &sj), l), rt) in head[ro..ro + m].iter().zip(s_b.iter()).zip(&mut left[..m]).zip(&mut right[..m]) {
                    *l = r * sj;
                    *rt = r * (1.0 - sj);
                }
            }
        }

        for b in 0..n {
            let reach = &reach[b * reach_s..(b + 1) * reach_s];
            let values = &mut values[b * val_s..(b + 1) * val_s];
            let visited = &mut visited[b * vis_s..(b + 1) * vis_s];
            for node in internal..nodes {
                let ro = (node * tasks + t) * m;
                visited[node * tasks + t] = reach[ro..ro + m].iter().any(|&r| r != 0.0);
            }

            for i in (0..internal).rev() {
                let vo = (i * tasks + t) * mk;
                let (head, tail) = values.split_at_mut(vo + mk);
                let v = &mut head[vo..];
                if !visited[i * tasks + t] {
                    v.fill(0.0);
                    continue;
                }
                // children sit after `i` in heap order
                let child = |c: usize| -> &[f64] {
                    if c < internal {
                        let o = (c * tasks + t) * mk - (vo + mk);
                        &tail[o..o + mk]
                    } else if visited[c * tasks + t] {
                        params.leaf_matrix(cfg, c - internal, t)
                    } else {
                        zeros
                    }
                };
                let (left, right) = (child(2 * i + 1), child(2 * i + 2));
                let lr = left.chunks_exact(k).zip(right.chunks_exact(k));
                let v = &mut v[..mk];
                let sb = &act[(b * internal + i) * m..(b * internal + i + 1) * m];
                if k == 1 {
                    for (((v, &l), &r), &sj) in v.iter_mut().zip(left).zip(right).zip(sb) {
                        *v = sj * l + (1.0 - sj) * r;
                    }
                } else {
                    for ((v, (l, r)), &sj) in v.chunks_exact_mut(k).zip(lr).zip(sb) {
                        for h in 0..k {
                            v[h] = sj * l[h] + (1.0 - sj) * r[h];
                        }
                    }
                }
            }

            let root = &values[t * mk..(t + 1) * mk];
            for h in 0..k {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += root[j * k + h];
                }
                pred[b * tasks * k + t * k + h] = acc;
            }
        }
    }
}

/// Supernode forward pass over a batch `X: [B, p]`.
///
/// Returns raw head outputs `[B, T, k]` and the trace needed by [`backward`].
pub fn forward(
    cfg: &EnsembleConfig,
    params: &EnsembleParams,
    xs: &RealArray,
) -> Result<(RealArray, ForwardTrace), EnsembleError> {
    let mut trace = ForwardTrace::empty(cfg);
    let preds = forward_into(cfg, params, xs, &mut trace)?;
    Ok((preds, trace))
}

/// [`forward`] writing into an existing trace, reusing its buffers.
pub fn forward_into(
    cfg: &EnsembleConfig,
    params: &EnsembleParams,
    xs: &RealArray,
    trace: &mut ForwardTrace,
) -> Result<RealArray, EnsembleError> {
    let batch = check_inputs(cfg, params, xs)?;
    let (m, k, tasks) = (cfg.num_trees, cfg.num_heads, cfg.num_tasks);
    let (internal, nodes) = (cfg.num_internal(), cfg.num_nodes());
    let p = cfg.num_features;

    trace.cfg = *cfg;
    trace.batch = batch;
    trace.pre_activations.resize(&[batch, internal, tasks, m]);
    trace.reach.resize(&[batch, nodes, tasks, m]);
    trace.values.resize(&[batch, internal, tasks, m, k]);
    trace.leaf_values.clear();
    trace.leaf_values.extend_from_slice(params.leaf_weights.as_slice());
    trace.visited.resize(batch * nodes * tasks, false);
    trace.zeros.clear();
    trace.zeros.resize(m * k, 0.0);
    let mut preds = RealArray::zeros(&[batch, tasks, k]);

    if batch > 0 {
        let (pre_s, reach_s) = (internal * tasks * m, nodes * tasks * m);
        trace
            .pre_activations
            .as_mut_slice()
            .par_chunks_mut(BLOCK * pre_s)
            .zip(trace.reach.as_mut_slice().par_chunks_mut(BLOCK * reach_s))
            .zip(trace.values.as_mut_slice().par_chunks_mut(BLOCK * pre_s * k))
            .zip(trace.visited.par_chunks_mut(BLOCK * nodes * tasks))
            .zip(preds.as_mut_slice().par_chunks_mut(BLOCK * tasks * k))
            .zip(xs.as_slice().par_chunks(BLOCK * p))
            .for_each_init(Scratch::default, |scratch, (((((pre, reach), values), visited), pred), x)| {
                forward_block(
                    cfg,
                    params,
                    x,
                    BlockSlots {
                        pre,
                        reach,
                        values,
                        visited,
                        pred,
                    },
                    scratch,
                );
            });
    }
    Ok(preds)
}

/// Forward pass without retaining a trace, for serving.
pub fn predict(cfg: &EnsembleConfig, params: &EnsembleParams, xs: &RealArray) -> Result<RealArray, EnsembleError> {
    let batch = check_inputs(cfg, params, xs)?;
    let (m, k, tasks) = (cfg.num_trees, cfg.num_heads, cfg.num_tasks);
    let (internal, nodes) = (cfg.num_internal(), cfg.num_nodes());
    let p = cfg.num_features;
    let mut preds = RealArray::zeros(&[batch, tasks, k]);
    if batch == 0 {
        return Ok(preds);
    }
    preds
        .as_mut_slice()
        .par_chunks_mut(PREDICT_CHUNK * tasks * k)
        .zip(xs.as_slice().par_chunks(PREDICT_CHUNK * p))
        .for_each(|(pred_chunk, x_chunk)| {
            let mut pre = vec![0.0; BLOCK * internal * tasks * m];
            let mut reach = vec![0.0; BLOCK * nodes * tasks * m];
            let mut values = vec![0.0; BLOCK * internal * tasks * m * k];
            let mut visited = vec![false; BLOCK * nodes * tasks];
            let mut scratch = Scratch::default();
            for (pred, x) in pred_chunk.chunks_mut(BLOCK * tasks * k).zip(x_chunk.chunks(BLOCK * p)) {
                let n = x.len() / p;
                forward_block(
                    cfg,
                    params,
                    x,
                    BlockSlots {
                        pre: &mut pre[..n * internal * tasks * m],
                        reach: &mut reach[..n * nodes * tasks * m],
                        values: &mut values[..n * internal * tasks * m * k],
                        visited: &mut visited[..n * nodes * tasks],
                        pred,
                    },
                    &mut scratch,
                );
            }
        });
    Ok(preds)
}

/// Accumulates the gradients of samples `start..end` into `grads`, task by
/// task and node by node, adding samples in index order.
#[allow(clippy::too_many_arguments)]
fn backward_block(
    cfg: &EnsembleConfig,
    trace: &ForwardTrace,
    start: usize,
    end: usize,
    xs: &[f64],
    output_grads: &[f64],
    grads: &mut EnsembleParams,
    delta: &mut Vec<f64>,
) {
    let p = cfg.num_features;
    let m = cfg.num_trees;
    let k = cfg.num_heads;
    let mk = m * k;
    let pm = p * m;
    let tasks = cfg.num_tasks;
    let internal = cfg.num_internal();
    let split_tasks = cfg.split_tasks();
    let head_grad = |b: usize, t: usize| &output_grads[(b * tasks + t) * k..(b * tasks + t + 1) * k];

    let mut active: Vec<usize> = Vec::with_capacity(end - start);
    let mut xt = Vec::new();
    delta.resize((end - start) * m, 0.0);
    for t in 0..tasks {
        let ts = cfg.split_slice(t);
        let live: Vec<usize> = (start..end).filter(|&b| head_grad(b, t).iter().any(|&v| v != 0.0)).collect();
        if live.is_empty() {
            continue;
        }

        let leaf_grads = grads.leaf_weights.as_mut_slice();
        for leaf in 0..cfg.num_leaves() {
            let node = internal + leaf;
            let o = (leaf * tasks + t) * mk;
            for &b in &live {
                if !trace.visited(b, node, t) {
                    continue;
                }
                let g = head_grad(b, t);
                // an unreached tree adds an exact zero
                let reach = trace.reach(b, node, t);
                if k == 1 {
                    for (lg, &r) in leaf_grads[o..o + m].iter_mut().zip(reach) {
                        *lg += r * g[0];
                    }
                } else {
                    for (lg, &r) in leaf_grads[o..o + mk].chunks_exact_mut(k).zip(reach) {
                        for h in 0..k {
                            lg[h] += r * g[h];
                        }
                    }
                }
            }
        }

        let split_grads = grads.split_weights.as_mut_slice();
        for i in 0..internal {
            active.clear();
            for &b in &live {
                if !trace.visited(b, i, t) {
                    continue;
                }
                let g = head_grad(b, t);
                let reach = trace.reach(b, i, t);
                let v_left = trace.values(b, 2 * i + 1, t);
                let v_right = trace.values(b, 2 * i + 2, t);
                let d = &mut delta[active.len() * m..(active.len() + 1) * m];
                cfg.activation.deriv_slice(trace.pre_activations(b, i, t), d);
                let lr = v_left.chunks_exact(k).zip(v_right.chunks_exact(k));
                let mut any = false;
                if k == 1 {
                    for (((d, &r), &l), &rt) in d.iter_mut().zip(reach).zip(v_left).zip(v_right) {
                        let diff = 0.0 + (l - rt) * g[0];
                        *d = r * *d * diff;
                        any |= *d != 0.0;
                    }
                } else {
                    for ((d, &r), (l, rt)) in d.iter_mut().zip(reach).zip(lr) {
                        let mut diff = 0.0;
                        for h in 0..k {
                            diff += (l[h] - rt[h]) * g[h];
                        }
                        *d = r * *d * diff;
                        any |= *d != 0.0;
                    }
                }
                if any {
                    active.push(b);
                }
            }
            if active.is_empty() {
                continue;
            }
            let n = active.len();
            xt.resize(p * n, 0.0);
            for (r, &b) in active.iter().enumerate() {
                for (f, &v) in xs[b * p..(b + 1) * p].iter().enumerate() {
                    xt[f * n + r] = v;
                }
            }
            let o = (i * split_tasks + ts) * pm;
            block_outer(&mut split_grads[o..o + pm], m, &xt[..p * n], n, &delta[..n * m]);
        }
    }
}

/// Gradients of `Σ_b Σ_t g[b,t]·f(x_b)_t` with respect to every parameter,
/// given the head gradients `output_grads: [B, T, k]`.
pub fn backward(
    cfg: &EnsembleConfig,
    params: &EnsembleParams,
    trace: &ForwardTrace,
    xs: &RealArray,
    output_grads: &RealArray,
) -> Result<EnsembleParams, EnsembleError> {
    params.check(cfg)?;
    if trace.cfg != *cfg {
        return Err(EnsembleError::StaleTrace("trace was produced under a different config".into()));
    }
    let batch = trace.batch;
    if xs.shape() != [batch, cfg.num_features] {
        return Err(EnsembleError::StaleTrace(format!(
            "inputs have shape {:?} but trace covers {} samples",
            xs.shape(),
            batch
        )));
    }
    if output_grads.shape() != [batch, cfg.num_tasks, cfg.num_heads] {
        return Err(ShapeError::Mismatch {
            op: "backward",
            left: output_grads.shape().to_vec(),
            right: vec![batch, cfg.num_tasks, cfg.num_heads],
        }
        .into());
    }
    let chunks = batch.div_ceil(GRAD_CHUNK);
    let mut total = EnsembleParams::zeros(cfg);
    // Chunks are computed a wave at a time, one per worker, and added to the
    // total in chunk order.
    let wave = rayon::current_num_threads().clamp(1, chunks.max(1));
    let mut scratch: Vec<(EnsembleParams, Vec<f64>)> = (0..wave).map(|_| (EnsembleParams::zeros(cfg), Vec::new())).collect();
    for first in (0..chunks).step_by(wave) {
        let used = wave.min(chunks - first);
        scratch[..used]
            .par_iter_mut()
            .enumerate()
            .for_each(|(w, (grads, delta))| {
                grads.split_weights.as_mut_slice().fill(0.0);
                grads.leaf_weights.as_mut_slice().fill(0.0);
                let start = (first + w) * GRAD_CHUNK;
                let end = (start + GRAD_CHUNK).min(batch);
                backward_block(
                    cfg,
                    trace,
                    start,
                    end,
                    xs.as_slice(),
                    output_grads.as_slice(),
                    grads,
                    delta,
                );
            });
        for (grads, _) in &scratch[..used] {
            total.split_weights.axpy(1.0, &grads.split_weights)?;
            total.leaf_weights.axpy(1.0, &grads.leaf_weights)?;
        }
    }
    Ok(total)
}
