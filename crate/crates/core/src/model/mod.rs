//! Instrumented pre-LN decoder-only transformer: configuration, weights,
//! traced forward passes, hook injection, fact implantation, and weights IO.

pub mod config;
pub mod forward;
pub mod hooks;
pub mod implant;
pub mod io;
pub mod trace;
pub mod weights;

pub use config::{Activation, ModelConfig};
pub use forward::{forward_traced, IncrementalRun, StepHooks, StepTrace};
pub use hooks::{EmbedNoise, HookSet, OnlineRectify};
pub use implant::{implant_model, implant_model_with_report, FactCheck, FactSpec, ImplantReport};
pub use io::{load_weights, save_weights};
pub use trace::ResidualTrace;
pub use weights::{LayerNormParams, LayerWeights, ModelWeights};
