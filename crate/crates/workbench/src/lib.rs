//! Experiment workbench for the CoRect engine: synthetic conflict sets
//! over implanted models, method-matrix comparisons, hyperparameter
//! sweeps, oracle validation, and report emission.

pub mod error;
pub mod experiment;
pub mod generate;
pub mod report;
pub mod sweep;

pub use error::{Result, WorkbenchError};
pub use experiment::{
    run_experiment, run_on_set, summarize, ExperimentConfig, ExperimentOutput, Method,
    MethodSummary, ResultRecord,
};
pub use generate::{
    generate_conflict_set, ConflictExample, ConflictSet, ExampleKind, GeneratorConfig, VocabLayout,
};
pub use report::{accuracy_from_detail, emit_report, emit_sweep_csv, ReportPaths};
pub use sweep::{run_sweep, SweepParameter, SweepPoint, SweepReport};
