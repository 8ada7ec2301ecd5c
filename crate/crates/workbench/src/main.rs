//! Command-line workbench around the CoRect engine.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use corect_core::lens::{classify_flip, rank_trajectory, LensMode, RankTrajectoryRecord};
use corect_core::model::{forward_traced, save_weights, HookSet};
use corect_core::numerics::argmax;
use corect_core::oracle::{causal_trace, default_sigma, localization_recall};

use corect_workbench::experiment::{run_experiment, Method, StepRecord};
use corect_workbench::{
    emit_report, emit_sweep_csv, generate_conflict_set, run_sweep, ExperimentConfig, Result,
    SweepParameter, WorkbenchError,
};

#[derive(Parser)]
#[command(
    name = "corect",
    about = "Knowledge-conflict workbench: generate implanted conflict sets, compare decoders, sweep hyperparameters, and validate layer localization"
)]
struct Cli {
    /// Seed overriding the config file's value.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML file mirroring the experiment configuration fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for reports and artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a conflict set and write the weights file plus examples.
    Gen {
        /// Number of examples.
        #[arg(long)]
        n: Option<usize>,
        /// Fraction of examples whose context contradicts memory.
        #[arg(long)]
        conflict_fraction: Option<f64>,
    },
    /// Rank trajectories and flip labels for one example.
    Trace {
        #[arg(long, default_value_t = 0)]
        example: usize,
        /// Also write a JSONL record.
        #[arg(long)]
        jsonl: bool,
    },
    /// Decode one example with one method, printing per-step diagnostics.
    Decode {
        #[arg(long, default_value = "corect")]
        method: String,
        #[arg(long, default_value_t = 0)]
        example: usize,
    },
    /// Run the full method matrix and write summary.csv / detail.jsonl.
    Compare,
    /// Sweep alpha, k, or lambda and write a plot-ready CSV.
    Sweep {
        #[arg(long, default_value = "alpha")]
        param: String,
    },
    /// Causal-tracing report for one example.
    Causal {
        #[arg(long, default_value_t = 0)]
        example: usize,
    },
    /// Mean and pooled localization recall of CoRect's suppressive sets
    /// against the causal-tracing oracle over the whole set.
    Recall,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| WorkbenchError::io(format!("reading {}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| WorkbenchError::validation(format!("parsing {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| cli.out.clone());

    match cli.command {
        Command::Gen {
            n,
            conflict_fraction,
        } => {
            let n = n.unwrap_or(cfg.n_examples);
            let fraction = conflict_fraction.unwrap_or(cfg.conflict_fraction);
            let set = generate_conflict_set(&cfg.generator, n, cfg.seed, fraction)?;
            fs::create_dir_all(&out_dir)?;
            let weights_path = out_dir.join("model.crct");
            save_weights(&set.weights, &weights_path)?;
            let examples_path = out_dir.join("examples.jsonl");
            let mut f = fs::File::create(&examples_path)?;
            for example in &set.examples {
                serde_json::to_writer(&mut f, example)?;
                f.write_all(b"\n")?;
            }
            println!(
                "wrote {} examples over {} facts; weights at {}",
                set.examples.len(),
                set.facts.len(),
                weights_path.display()
            );
        }
        Command::Trace { example, jsonl } => {
            let set = generate_conflict_set(
                &cfg.generator,
                cfg.n_examples,
                cfg.seed,
                cfg.conflict_fraction,
            )?;
            let ex = set.examples.get(example).ok_or_else(|| {
                WorkbenchError::validation(format!("example {example} out of range"))
            })?;
            let (logits, trace) =
                forward_traced(&set.weights, &ex.prompt.ctx_tokens, &HookSet::none())?;
            let final_pred = argmax(&logits);
            let traj = rank_trajectory(&trace, ex.gold, &set.weights, LensMode::FinalLn)?;
            let class = classify_flip(&traj, final_pred, ex.gold, cfg.boundary_fraction)?;
            println!(
                "example {example}: gold {} parametric {} final_pred {final_pred} label {:?}",
                ex.gold, ex.parametric, class.label
            );
            println!("ranks per layer: {:?}", traj.ranks);
            if jsonl {
                let record = RankTrajectoryRecord {
                    example_id: example,
                    ranks: traj.ranks.clone(),
                    final_pred,
                    gold: ex.gold,
                    label: class.label,
                    mode: LensMode::FinalLn,
                };
                let path = out_dir.join("trajectories.jsonl");
                fs::create_dir_all(&out_dir)?;
                let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
                serde_json::to_writer(&mut f, &record)?;
                f.write_all(b"\n")?;
                println!("appended to {}", path.display());
            }
        }
        Command::Decode { method, example } => {
            let method: Method = method.parse()?;
            let set = generate_conflict_set(
                &cfg.generator,
                cfg.n_examples,
                cfg.seed,
                cfg.conflict_fraction,
            )?;
            let ex = set.examples.get(example).ok_or_else(|| {
                WorkbenchError::validation(format!("example {example} out of range"))
            })?;
            let mut one = cfg.clone();
            one.methods = vec![method];
            one.compute_recall = false;
            let output = corect_workbench::run_on_set(
                &corect_workbench::ConflictSet {
                    examples: vec![ex.clone()],
                    weights: set.weights.clone(),
                    facts: set.facts.clone(),
                },
                &one,
            )?;
            let record = &output.records[0];
            println!(
                "method {} example {example}: emitted {:?} gold {} -> {}",
                record.method,
                record.emitted,
                record.gold,
                if record.correct { "correct" } else { "wrong" }
            );
            for step in &record.steps {
                match step {
                    StepRecord::Corect(s) => println!(
                        "  step {}: target {} l_supp {:?} predicted {:+.4} realized {:+.4} emitted {}",
                        s.step, s.target_id, s.l_supp, s.predicted_shift, s.realized_shift, s.emitted_id
                    ),
                    StepRecord::Baseline(s) => println!(
                        "  step {}: emitted {}{}{}",
                        s.step,
                        s.emitted_id,
                        s.adaptive_alpha
                            .map_or(String::new(), |a| format!(" alpha_t {a:.3}")),
                        s.flagged_conflicting
                            .map_or(String::new(), |c| format!(" conflict {c}")),
                    ),
                }
            }
        }
        Command::Compare => {
            let (_, output) = run_experiment(&cfg)?;
            let paths = emit_report(&output.records, &output.summaries, &out_dir)?;
            println!("method        n   accuracy  mean_recall  mean_|L_supp|");
            for s in &output.summaries {
                println!(
                    "{:<12} {:>4}   {:.4}    {:<11} {}",
                    s.method,
                    s.n,
                    s.accuracy,
                    s.mean_recall.map_or("-".into(), |v| format!("{v:.4}")),
                    s.mean_l_supp.map_or("-".into(), |v| format!("{v:.2}")),
                );
            }
            println!(
                "wrote {} and {}",
                paths.summary_csv.display(),
                paths.detail_jsonl.display()
            );
        }
        Command::Sweep { param } => {
            let parameter: SweepParameter = param.parse()?;
            let report = run_sweep(&cfg, parameter)?;
            let path = emit_sweep_csv(&report, &out_dir)?;
            for p in &report.points {
                println!("{} = {:<6} accuracy {:.4} (stderr {:.4})", parameter, p.x, p.mean, p.stderr);
            }
            println!("wrote {}", path.display());
        }
        Command::Causal { example } => {
            let set = generate_conflict_set(
                &cfg.generator,
                cfg.n_examples,
                cfg.seed,
                cfg.conflict_fraction,
            )?;
            let ex = set.examples.get(example).ok_or_else(|| {
                WorkbenchError::validation(format!("example {example} out of range"))
            })?;
            let sigma = cfg.sigma.unwrap_or_else(|| default_sigma(&set.weights));
            let report = causal_trace(
                &set.weights,
                &ex.prompt.ctx_tokens,
                ex.fact.context_subject_span(),
                ex.gold,
                sigma,
                cfg.noise_samples,
                cfg.seed,
            )?;
            println!(
                "example {example}: l_rome {} l_star {:?} p_clean {:.4} p_corr {:.4}",
                report.l_rome, report.l_star, report.p_clean, report.p_corr
            );
            let path = out_dir.join(format!("causal_{example}.json"));
            write_json(&path, &report)?;
            println!("wrote {}", path.display());
        }
        Command::Recall => {
            let mut one = cfg.clone();
            one.methods = vec![Method::Corect];
            one.compute_recall = true;
            let (set, output) = run_experiment(&one)?;
            let recalls: Vec<f64> = output.records.iter().filter_map(|r| r.recall).collect();
            let mean = recalls.iter().sum::<f64>() / recalls.len().max(1) as f64;
            // Pooled recall re-derives the oracle sets, counting hits over
            // the union instead of averaging per-example ratios.
            let sigma = one.sigma.unwrap_or_else(|| default_sigma(&set.weights));
            let mut hits = 0usize;
            let mut total = 0usize;
            for record in &output.records {
                let ex = &set.examples[record.example_id];
                let report = causal_trace(
                    &set.weights,
                    &ex.prompt.ctx_tokens,
                    ex.fact.context_subject_span(),
                    ex.gold,
                    sigma,
                    one.noise_samples,
                    one.seed ^ (ex.example_id as u64).wrapping_mul(0x9e3779b97f4a7c15),
                )?;
                total += report.l_star.len();
                hits += report
                    .l_star
                    .iter()
                    .filter(|l| record.l_supp.contains(l))
                    .count();
                let _ = localization_recall(&record.l_supp, &report.l_star);
            }
            let pooled = if total == 0 {
                1.0
            } else {
                hits as f64 / total as f64
            };
            println!(
                "localization recall over {} examples: per-example mean {:.4}, pooled {:.4}",
                recalls.len(),
                mean,
                pooled
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
