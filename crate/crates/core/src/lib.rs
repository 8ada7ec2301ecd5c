//! Toy-scale instrumented transformer engine for studying knowledge
//! conflicts: logit-lens diagnosis of parametric suppression, CoRect
//! two-stage hidden-state rectification, contrastive-decoding baselines
//! (CAD, AdaCAD, COIECD), and a ROME/causal-tracing oracle for validating
//! layer localization.
//!
//! Module map:
//! - [`numerics`]: dense matrices, softmax/layer-norm/rank kernels.
//! - [`model`]: the forward engine, hooks, fact implantation, weights IO.
//! - [`lens`]: logit-lens projections, residual decomposition, flip taxonomy.
//! - [`corect`]: target selection, rectification patches, the decode loop.
//! - [`baselines`]: greedy, CAD, AdaCAD, COIECD decoding.
//! - [`oracle`]: rank-one editing and causal-tracing interference analysis.

pub mod baselines;
pub mod corect;
pub mod error;
pub mod lens;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod par;

pub use error::{CoreError, Result};
