//! CoRect: target-agnostic token selection (stage 1) and suppressive-layer
//! hidden-state rectification (stage 2), plus the autoregressive decode
//! loop that ties them together.

pub mod decode;
pub mod rectify;
pub mod selection;

pub use decode::{
    decode_corect, decode_corect_with, CorectDecode, DecodeOptions, RectifyConfig, StepDiagnostics,
};
pub use rectify::{
    build_plan, make_patch, predicted_shift, suppressive_layers, PatchMode, RectificationPlan,
};
pub use selection::{
    aggregate_and_normalize, attention_evidence, max_normalize, s_info_layer, select_target,
    ConflictPrompt, NullStyle, SelectionConfig, TargetSelection,
};
