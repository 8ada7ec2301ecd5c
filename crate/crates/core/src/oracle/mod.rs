//! Ground-truth oracles: rank-one editing and causal-tracing interference
//! extraction, used to validate suppressive-layer localization.

pub mod causal;
pub mod rome;

pub use causal::{causal_trace, default_sigma, localization_recall, CausalTraceReport};
pub use rome::{
    apply_edit, compute_edit, compute_v_star, covariance_from_keys, key_covariance, rome_update,
    RomeEdit, COVARIANCE_RIDGE,
};
