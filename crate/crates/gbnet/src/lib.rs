//! Scene graph generation as graph bridging.
//!
//! An image's detections become a small *scene graph* (entity nodes plus
//! one predicate node per ordered entity pair); a fixed *commonsense
//! graph* holds one node per entity/predicate class with typed, weighted
//! edges between classes. Classification is reformulated as inferring
//! weighted *bridge* edges from scene nodes to class nodes: typed
//! messages flow along every edge, node states are updated with a GRU,
//! and bridge weights are re-estimated from pairwise attention scores,
//! for a fixed number of rounds. The final bridge weights are the
//! entity/predicate scores.
//!
//! Modules:
//! - [`tensor`] / [`tape`]: dense f64 tensors and reverse-mode autodiff.
//! - [`graph`]: node/edge taxonomy, scene skeletons, bridge matrices.
//! - [`commonsense`]: compiling the class graph from ontology TSVs,
//!   triplet statistics and an embedding table.
//! - [`model`]: message passing, GRU updates and bridge refinement.
//! - [`train`]: alignment, class-balanced loss, Adam, checkpoints.
//! - [`eval`]: ranked triplet extraction and recall metrics.
//! - [`synth`]: synthetic worlds and dataset files.
//! - [`cli`]: the `gbnet` command-line entry points.
//!
//! See `examples/` for one runnable program per capability.

pub mod commonsense;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{GbError, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{evaluate_mlp_head, row_softmax_stable, MlpHead, Tensor};
pub mod cli;
