//! Method-matrix evaluation over a generated conflict set.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::str::FromStr;

use corect_core::baselines::{decode_baseline, BaselineConfig, BaselineMethod, BaselineStep};
use corect_core::corect::{
    decode_corect_with, DecodeOptions, PatchMode, RectifyConfig, SelectionConfig, StepDiagnostics,
};
use corect_core::lens::{classify_flip, rank_trajectory, FlipLabel, LensMode};
use corect_core::model::{forward_traced, HookSet, ModelWeights};
use corect_core::oracle::{causal_trace, default_sigma, localization_recall};
use corect_core::par::map_maybe_parallel;

use crate::error::{Result, WorkbenchError};
use crate::generate::{generate_conflict_set, ConflictExample, ConflictSet, GeneratorConfig};

/// Decoding strategies the workbench can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Greedy,
    Cad,
    AdaCad,
    Coiecd,
    Corect,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Cad => "cad",
            Method::AdaCad => "adacad",
            Method::Coiecd => "coiecd",
            Method::Corect => "corect",
        }
    }

    pub fn all() -> Vec<Method> {
        vec![
            Method::Greedy,
            Method::Cad,
            Method::AdaCad,
            Method::Coiecd,
            Method::Corect,
        ]
    }
}

impl FromStr for Method {
    type Err = WorkbenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Ok(Method::Greedy),
            "cad" => Ok(Method::Cad),
            "adacad" => Ok(Method::AdaCad),
            "coiecd" => Ok(Method::Coiecd),
            "corect" => Ok(Method::Corect),
            other => Err(WorkbenchError::validation(format!(
                "unknown method '{other}' (expected greedy|cad|adacad|coiecd|corect)"
            ))),
        }
    }
}

/// Stage-2 knobs mirrored into the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RectifySettings {
    pub alpha: f64,
    pub online: bool,
}

impl Default for RectifySettings {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            online: true,
        }
    }
}

impl RectifySettings {
    pub fn to_config(self) -> RectifyConfig {
        RectifyConfig {
            alpha: self.alpha,
            mode: if self.online {
                PatchMode::Online
            } else {
                PatchMode::Frozen
            },
        }
    }
}

/// Baseline knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSettings {
    pub cad_alpha: f64,
    pub coiecd_lambda: f64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            cad_alpha: 1.0,
            coiecd_lambda: 0.25,
        }
    }
}

/// Full experiment description; mirrors the structured config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub n_examples: usize,
    pub conflict_fraction: f64,
    pub methods: Vec<Method>,
    pub selection_k: usize,
    pub selection_m: usize,
    pub selection_lambda: f64,
    pub selection_epsilon: f64,
    pub rectify: RectifySettings,
    pub baseline: BaselineSettings,
    pub max_new: usize,
    pub alpha_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    /// Compute localization recall against the causal-tracing oracle for
    /// CoRect records (adds one trace per example).
    pub compute_recall: bool,
    pub noise_samples: usize,
    /// Noise scale for causal tracing; derived from the embeddings when
    /// absent.
    pub sigma: Option<f64>,
    pub kv_cache: bool,
    pub parallel: bool,
    /// Middle/last boundary for the flip taxonomy.
    pub boundary_fraction: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            seed: 0,
            n_examples: 50,
            conflict_fraction: 1.0,
            methods: Method::all(),
            selection_k: 10,
            selection_m: 10,
            selection_lambda: 1.0,
            selection_epsilon: 1e-6,
            rectify: RectifySettings::default(),
            baseline: BaselineSettings::default(),
            max_new: 1,
            alpha_grid: vec![0.0, 0.5, 1.0, 2.0],
            k_grid: vec![1, 5, 10, 15, 20, 25],
            lambda_grid: vec![0.0, 0.25, 0.5, 0.8, 1.0],
            compute_recall: false,
            noise_samples: 5,
            sigma: None,
            kv_cache: false,
            parallel: true,
            boundary_fraction: 0.9,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            k: self.selection_k.min(self.generator.layers),
            m: self.selection_m,
            lambda: self.selection_lambda,
            epsilon: self.selection_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.methods.is_empty() {
            return Err(WorkbenchError::validation("method list is empty"));
        }
        if self.max_new == 0 {
            return Err(WorkbenchError::validation("max_new must be >= 1"));
        }
        if self.alpha_grid.is_empty() || self.k_grid.is_empty() || self.lambda_grid.is_empty() {
            return Err(WorkbenchError::validation("sweep grids must be non-empty"));
        }
        if !(0.0..1.0).contains(&self.boundary_fraction) || self.boundary_fraction == 0.0 {
            return Err(WorkbenchError::validation(
                "boundary_fraction must be in (0, 1)",
            ));
        }
        Ok(())
    }
}

/// Per-step diagnostics of whichever decoder ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepRecord {
    Corect(StepDiagnostics),
    Baseline(BaselineStep),
}

/// One (method, example) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub example_id: usize,
    pub method: String,
    pub emitted: Vec<usize>,
    pub gold: usize,
    pub parametric: usize,
    pub kind: crate::generate::ExampleKind,
    pub correct: bool,
    /// Rank-evolution label of the gold token, computed on failures.
    pub flip: Option<FlipLabel>,
    pub first_rank1_layer: Option<usize>,
    /// Suppressive-layer set of the first step (CoRect only).
    pub l_supp: Vec<usize>,
    /// Localization recall against the causal-tracing oracle, when
    /// computed.
    pub recall: Option<f64>,
    pub steps: Vec<StepRecord>,
}

/// Aggregates per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n: usize,
    pub accuracy: f64,
    pub mean_recall: Option<f64>,
    pub mean_l_supp: Option<f64>,
}

/// Experiment output: per-record detail plus per-method aggregates.
pub struct ExperimentOutput {
    pub records: Vec<ResultRecord>,
    pub summaries: Vec<MethodSummary>,
}

fn evaluate_one(
    weights: &ModelWeights,
    example: &ConflictExample,
    method: Method,
    cfg: &ExperimentConfig,
    sigma: f64,
) -> Result<ResultRecord> {
    let options = DecodeOptions {
        kv_cache: cfg.kv_cache,
    };
    let (emitted, steps, l_supp) = match method {
        Method::Corect => {
            let out = decode_corect_with(
                weights,
                &example.prompt,
                &cfg.selection(),
                &cfg.rectify.to_config(),
                cfg.max_new,
                options,
            )?;
            let l_supp = out.steps.first().map(|s| s.l_supp.clone()).unwrap_or_default();
            (
                out.tokens,
                out.steps.into_iter().map(StepRecord::Corect).collect::<Vec<_>>(),
                l_supp,
            )
        }
        _ => {
            let bcfg = match method {
                Method::Greedy => BaselineConfig::greedy(),
                Method::Cad => BaselineConfig::cad(cfg.baseline.cad_alpha),
                Method::AdaCad => BaselineConfig::adacad(),
                Method::Coiecd => {
                    BaselineConfig::coiecd(cfg.baseline.coiecd_lambda, cfg.baseline.cad_alpha)
                }
                Method::Corect => unreachable!(),
            };
            debug_assert!(matches!(
                bcfg.method,
                BaselineMethod::Greedy | BaselineMethod::Cad | BaselineMethod::AdaCad | BaselineMethod::Coiecd
            ));
            let out = corect_core::baselines::decode_baseline_with(
                weights,
                &example.prompt,
                &bcfg,
                cfg.max_new,
                cfg.kv_cache,
            )?;
            (
                out.tokens,
                out.steps.into_iter().map(StepRecord::Baseline).collect::<Vec<_>>(),
                Vec::new(),
            )
        }
    };

    let correct = emitted.first() == Some(&example.gold);
    let (flip, first_rank1_layer) = if correct {
        (Some(FlipLabel::Correct), None)
    } else {
        let (_, trace) = forward_traced(weights, &example.prompt.ctx_tokens, &HookSet::none())?;
        let traj = rank_trajectory(&trace, example.gold, weights, LensMode::FinalLn)?;
        let class = classify_flip(
            &traj,
            emitted.first().copied().unwrap_or(usize::MAX.min(weights.config.vocab - 1)),
            example.gold,
            cfg.boundary_fraction,
        )?;
        (Some(class.label), class.first_rank1_layer)
    };

    let recall = if method == Method::Corect && cfg.compute_recall {
        let report = causal_trace(
            weights,
            &example.prompt.ctx_tokens,
            example.fact.context_subject_span(),
            example.gold,
            sigma,
            cfg.noise_samples,
            cfg.seed ^ (example.example_id as u64).wrapping_mul(0x9e3779b97f4a7c15),
        )?;
        Some(localization_recall(&l_supp, &report.l_star))
    } else {
        None
    };

    Ok(ResultRecord {
        example_id: example.example_id,
        method: method.name().to_string(),
        emitted,
        gold: example.gold,
        parametric: example.parametric,
        kind: example.kind,
        correct,
        flip,
        first_rank1_layer,
        l_supp,
        recall,
        steps,
    })
}

/// Evaluate `methods x examples` over a prepared conflict set.
pub fn run_on_set(set: &ConflictSet, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let sigma = cfg.sigma.unwrap_or_else(|| default_sigma(&set.weights));

    let mut tasks = Vec::with_capacity(cfg.methods.len() * set.examples.len());
    for &method in &cfg.methods {
        for example in &set.examples {
            tasks.push((method, example.clone()));
        }
    }
    let results = map_maybe_parallel(tasks, cfg.parallel, |(method, example)| {
        evaluate_one(&set.weights, &example, method, cfg, sigma)
    });
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }

    let summaries = summarize(&records);
    Ok(ExperimentOutput { records, summaries })
}

/// Generate the conflict set for `cfg` and evaluate the full matrix.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ConflictSet, ExperimentOutput)> {
    cfg.validate()?;
    let set = generate_conflict_set(
        &cfg.generator,
        cfg.n_examples,
        cfg.seed,
        cfg.conflict_fraction,
    )?;
    let output = run_on_set(&set, cfg)?;
    Ok((set, output))
}

/// Aggregate records per method.
pub fn summarize(records: &[ResultRecord]) -> Vec<MethodSummary> {
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    order
        .into_iter()
        .map(|method| {
            let rows: Vec<&ResultRecord> =
                records.iter().filter(|r| r.method == method).collect();
            let n = rows.len();
            let accuracy = rows.iter().filter(|r| r.correct).count() as f64 / n as f64;
            let recalls: Vec<f64> = rows.iter().filter_map(|r| r.recall).collect();
            let mean_recall = if recalls.is_empty() {
                None
            } else {
                Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
            };
            let supp_sizes: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == "corect")
                .map(|r| r.l_supp.len() as f64)
                .collect();
            let mean_l_supp = if supp_sizes.is_empty() {
                None
            } else {
                Some(supp_sizes.iter().sum::<f64>() / supp_sizes.len() as f64)
            };
            MethodSummary {
                method,
                n,
                accuracy,
                mean_recall,
                mean_l_supp,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_cfg() -> ExperimentConfig {
        ExperimentConfig {
            generator: GeneratorConfig::small(),
            seed: 3,
            n_examples: 8,
            conflict_fraction: 1.0,
            methods: vec![Method::Greedy, Method::Corect],
            ..Default::default()
        }
    }

    #[test]
    fn greedy_fails_conflicts_and_corect_fixes_them() {
        let (_, out) = run_experiment(&fast_cfg()).unwrap();
        let acc = |m: &str| {
            out.summaries
                .iter()
                .find(|s| s.method == m)
                .map(|s| s.accuracy)
                .unwrap()
        };
        assert!(acc("greedy") <= 0.1, "greedy {}", acc("greedy"));
        assert!(acc("corect") >= 0.9, "corect {}", acc("corect"));
    }

    #[test]
    fn no_conflicts_mean_everyone_wins() {
        let mut cfg = fast_cfg();
        cfg.conflict_fraction = 0.0;
        cfg.methods = vec![Method::Greedy];
        let (_, out) = run_experiment(&cfg).unwrap();
        assert_eq!(out.summaries[0].accuracy, 1.0);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let mut cfg = fast_cfg();
        cfg.parallel = false;
        let (_, seq) = run_experiment(&cfg).unwrap();
        cfg.parallel = true;
        let (_, par) = run_experiment(&cfg).unwrap();
        assert_eq!(seq.records, par.records);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("CoRect".parse::<Method>().unwrap(), Method::Corect);
        assert!("bogus".parse::<Method>().is_err());
    }
}
