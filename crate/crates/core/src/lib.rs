//! Differentiable sorting networks and the training machinery around them.
//!
//! * [`sigmoid`]: relaxations of the comparator.
//! * [`network`]: odd-even transposition and bitonic topologies.
//! * [`diffsort`]: relaxed sorting, permutation matrices and their gradients.
//! * [`topk`]: top-k rows of the relaxed permutation and the top-k loss.
//! * [`optim`]: Newton losses, RESGRO and first-order optimizers.
//! * [`model`]: a small MLP with hand-written backpropagation.
//! * [`data`]: MNIST IDX parsing and synthetic tasks.
//! * [`cli`]: the `diffsort` command-line runner.

pub mod cli;
pub mod data;
pub mod diffsort;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod network;
pub mod optim;
pub mod props;
pub mod sigmoid;
pub mod topk;

pub use diffsort::{GroundTruthPermutation, RankingMetrics, RelaxedSortResult};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::Mlp;
pub use network::{Comparator, Direction, NetworkKind, SortingNetwork};
pub use sigmoid::{SigmoidKind, SigmoidSpec};
pub use topk::{TopKConfig, TopKDistribution, TopKLoss};
