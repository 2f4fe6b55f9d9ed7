//! Soft decision-tree ensembles trained by gradient descent.
//!
//! Trees are perfect binary trees whose internal nodes route samples left or
//! right with a smooth-step probability. Node `i` of all `m` trees is stored as
//! one "supernode" weight matrix, so a forward or backward pass is a handful of
//! matrix-vector products per node. Routing saturates to exactly 0 or 1, and
//! subtrees that receive no probability mass are skipped.
//!
//! Start from [`model::SoftTreeModel`] and [`trainer::fit`]; the `examples/`
//! directory has one runnable program per capability.

pub mod activation;
pub mod cli;
pub mod data;
pub mod ensemble;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod rng;
pub mod store;
pub mod trainer;

pub use activation::{Activation, SmoothStep};
pub use data::Dataset;
pub use ensemble::{EnsembleConfig, EnsembleParams};
pub use kernel::RealArray;
pub use model::{HeadLayout, SoftTreeModel};
pub use objective::{Objective, Reduction};
pub use trainer::{fit, TrainReport, TrainSpec};
