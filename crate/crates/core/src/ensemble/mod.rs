//! Perfect-binary-tree soft ensembles in supernode form.
//!
//! Node `i` of every tree in the ensemble (and every task) is stored together:
//! the split tensor is laid out `[internal node, task, feature, tree]`, so the
//! pre-activations of all trees at one node are a single matrix-vector
//! product. Leaves are `[leaf, task, tree, head]`.
//!
//! Nodes use heap numbering: root `0`, children `2i + 1` and `2i + 2`. Indices
//! below `2^d - 1` are internal; the remaining `2^d` are leaves.

mod pass;
pub mod per_tree;

pub use pass::{backward, forward, forward_into, predict, ForwardTrace};

use crate::activation::Activation;
use crate::kernel::{RealArray, ShapeError};
use crate::rng::{self, Purpose};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DEPTH: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("invalid ensemble config: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("non-finite input feature at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("trace does not match this call: {0}")]
    StaleTrace(String),
    #[error("parameter tensor {0} contains non-finite values")]
    NonFiniteParams(&'static str),
}

/// Structural hyperparameters of one ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub num_trees: usize,
    pub depth: usize,
    pub num_features: usize,
    /// Output dimension per task.
    pub num_heads: usize,
    pub num_tasks: usize,
    pub activation: Activation,
    /// One split tensor broadcast to every task (the fully shared limit);
    /// leaves stay task specific.
    pub share_splits: bool,
}

impl EnsembleConfig {
    pub fn new(num_trees: usize, depth: usize, num_features: usize) -> Self {
        Self {
            num_trees,
            depth,
            num_features,
            num_heads: 1,
            num_tasks: 1,
            activation: Activation::default(),
            share_splits: false,
        }
    }

    pub fn with_heads(mut self, k: usize) -> Self {
        self.num_heads = k;
        self
    }

    pub fn with_tasks(mut self, t: usize) -> Self {
        self.num_tasks = t;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_shared_splits(mut self, share: bool) -> Self {
        self.share_splits = share;
        self
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |what: &str| Err(EnsembleError::Config(what.to_string()));
        if self.num_trees == 0 {
            return bad("num_trees must be positive");
        }
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return bad(&format!("depth must be in 1..={MAX_DEPTH}"));
        }
        if self.num_features == 0 {
            return bad("num_features must be positive");
        }
        if self.num_heads == 0 {
            return bad("num_heads must be positive");
        }
        if self.num_tasks == 0 {
            return bad("num_tasks must be positive");
        }
        let scale = self.activation.scale();
        if !(scale > 0.0 && scale.is_finite()) {
            return bad("activation width must be positive and finite");
        }
        Ok(())
    }

    pub fn num_internal(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn num_nodes(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    /// Task extent of the split tensor.
    pub fn split_tasks(&self) -> usize {
        if self.share_splits {
            1
        } else {
            self.num_tasks
        }
    }

    /// Split-tensor task slice read by task `t`.
    #[inline]
    pub fn split_slice(&self, t: usize) -> usize {
        if self.share_splits {
            0
        } else {
            t
        }
    }

    pub fn split_shape(&self) -> [usize; 4] {
        [
            self.num_internal(),
            self.split_tasks(),
            self.num_features,
            self.num_trees,
        ]
    }

    pub fn leaf_shape(&self) -> [usize; 4] {
        [
            self.num_leaves(),
            self.num_tasks,
            self.num_trees,
            self.num_heads,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.split_shape().iter().product::<usize>() + self.leaf_shape().iter().product::<usize>()
    }
}

/// Heap-indexed node position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeIndex(pub usize);

impl NodeIndex {
    pub const ROOT: NodeIndex = NodeIndex(0);

    pub fn left(self) -> NodeIndex {
        NodeIndex(2 * self.0 + 1)
    }

    pub fn right(self) -> NodeIndex {
        NodeIndex(2 * self.0 + 2)
    }

    pub fn parent(self) -> Option<NodeIndex> {
        (self.0 > 0).then(|| NodeIndex((self.0 - 1) / 2))
    }

    /// `floor(log2(i + 1))`
    pub fn depth(self) -> usize {
        (usize::BITS - 1 - (self.0 + 1).leading_zeros()) as usize
    }

    pub fn is_left_child(self) -> bool {
        self.0 % 2 == 1
    }

    pub fn is_internal(self, cfg: &EnsembleConfig) -> bool {
        self.0 < cfg.num_internal()
    }
}

/// All trainable weights of one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    /// `[internal node, split task, feature, tree]`
    pub split_weights: RealArray,
    /// `[leaf, task, tree, head]`
    pub leaf_weights: RealArray,
}

impl EnsembleParams {
    pub fn zeros(cfg: &EnsembleConfig) -> Self {
        Self {
            split_weights: RealArray::zeros(&cfg.split_shape()),
            leaf_weights: RealArray::zeros(&cfg.leaf_shape()),
        }
    }

    pub fn check(&self, cfg: &EnsembleConfig) -> Result<(), EnsembleError> {
        if self.split_weights.shape() != cfg.split_shape() {
            return Err(EnsembleError::Config(format!(
                "split_weights shape {:?} does not match config {:?}",
                self.split_weights.shape(),
                cfg.split_shape()
            )));
        }
        if self.leaf_weights.shape() != cfg.leaf_shape() {
            return Err(EnsembleError::Config(format!(
                "leaf_weights shape {:?} does not match config {:?}",
                self.leaf_weights.shape(),
                cfg.leaf_shape()
            )));
        }
        if !self.split_weights.all_finite() {
            return Err(EnsembleError::NonFiniteParams("split_weights"));
        }
        if !self.leaf_weights.all_finite() {
            return Err(EnsembleError::NonFiniteParams("leaf_weights"));
        }
        Ok(())
    }

    /// Contiguous `p × m` weight matrix of internal node `i`, split slice `ts`.
    pub fn split_matrix(&self, cfg: &EnsembleConfig, node: usize, ts: usize) -> &[f64] {
        let pm = cfg.num_features * cfg.num_trees;
        let o = (node * cfg.split_tasks() + ts) * pm;
        &self.split_weights.as_slice()[o..o + pm]
    }

    /// Contiguous `m × k` leaf matrix of leaf `l` (0-based among leaves), task `t`.
    pub fn leaf_matrix(&self, cfg: &EnsembleConfig, leaf: usize, t: usize) -> &[f64] {
        let mk = cfg.num_trees * cfg.num_heads;
        let o = (leaf * cfg.num_tasks + t) * mk;
        &self.leaf_weights.as_slice()[o..o + mk]
    }
}

/// Initial weights: splits i.i.d. uniform on `±γ/(2√p)`, leaves zero.
///
/// Each split task slice draws from its own stream, so the slice for task `t`
/// does not depend on how many tasks the ensemble has.
pub fn init_params(cfg: &EnsembleConfig, seed: u64) -> EnsembleParams {
    init_member(cfg, seed, 0)
}

/// Like [`init_params`] for the `member`-th ensemble of a multi-ensemble model.
pub fn init_member(cfg: &EnsembleConfig, seed: u64, member: u32) -> EnsembleParams {
    let mut params = EnsembleParams::zeros(cfg);
    let bound = cfg.activation.scale() / (2.0 * (cfg.num_features as f64).sqrt());
    let pm = cfg.num_features * cfg.num_trees;
    let ts_count = cfg.split_tasks();
    let data = params.split_weights.as_mut_slice();
    for ts in 0..ts_count {
        let mut rng = rng::stream(seed, Purpose::Init, (member << 16) | ts as u32);
        for node in 0..cfg.num_internal() {
            let o = (node * ts_count + ts) * pm;
            for w in &mut data[o..o + pm] {
                *w = rng.random_range(-bound..=bound);
            }
        }
    }
    params
}
