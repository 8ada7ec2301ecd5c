//! Hyperparameter sweeps over a fixed conflict set.

use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Result, WorkbenchError};
use crate::experiment::{run_on_set, ExperimentConfig, Method};
use crate::generate::generate_conflict_set;

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Alpha,
    K,
    Lambda,
}

impl SweepParameter {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::Alpha => "alpha",
            SweepParameter::K => "k",
            SweepParameter::Lambda => "lambda",
        }
    }
}

impl std::fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParameter {
    type Err = WorkbenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alpha" => Ok(SweepParameter::Alpha),
            "k" => Ok(SweepParameter::K),
            "lambda" => Ok(SweepParameter::Lambda),
            other => Err(WorkbenchError::validation(format!(
                "unknown sweep parameter '{other}' (expected alpha|k|lambda)"
            ))),
        }
    }
}

/// Accuracy at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub mean: f64,
    /// Binomial standard error of the accuracy.
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParameter,
    pub points: Vec<SweepPoint>,
}

/// Run CoRect over the same conflict set at every grid value of the chosen
/// parameter.
pub fn run_sweep(cfg: &ExperimentConfig, parameter: SweepParameter) -> Result<SweepReport> {
    cfg.validate()?;
    let set = generate_conflict_set(
        &cfg.generator,
        cfg.n_examples,
        cfg.seed,
        cfg.conflict_fraction,
    )?;

    let grid: Vec<f64> = match parameter {
        SweepParameter::Alpha => cfg.alpha_grid.clone(),
        SweepParameter::K => cfg.k_grid.iter().map(|&k| k as f64).collect(),
        SweepParameter::Lambda => cfg.lambda_grid.clone(),
    };

    let mut points = Vec::with_capacity(grid.len());
    for &x in &grid {
        let mut point_cfg = cfg.clone();
        point_cfg.methods = vec![Method::Corect];
        point_cfg.compute_recall = false;
        match parameter {
            SweepParameter::Alpha => point_cfg.rectify.alpha = x,
            // k beyond the stack depth is clamped by selection().
            SweepParameter::K => point_cfg.selection_k = x as usize,
            SweepParameter::Lambda => point_cfg.selection_lambda = x,
        }
        let output = run_on_set(&set, &point_cfg)?;
        let n = output.records.len();
        let mean = output.records.iter().filter(|r| r.correct).count() as f64 / n as f64;
        let stderr = (mean * (1.0 - mean) / n as f64).sqrt();
        points.push(SweepPoint { x, mean, stderr, n });
    }
    Ok(SweepReport { parameter, points })
}
