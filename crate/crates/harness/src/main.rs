use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advprune_core::attacks::{evaluate_robust_accuracy, AttackLoss};
use advprune_core::models::{init_model, read_checkpoint};
use advprune_core::rng;
use advprune_core::selection::{select_adv_glister, select_adv_gradmatch, select_random, SelectorKind};
use advprune_harness::config::{ExperimentConfig, MethodSpec};
use advprune_harness::experiment::{
    eval_attacks, load_splits, method_slug, model_spec, robustness_records, run_experiment, run_method,
    train_config, ExperimentReport,
};
use advprune_harness::report::{write_csv, SelectionRecord};
use advprune_harness::toy::{generate_toy_dataset, ToyKind};
use advprune_harness::{HarnessError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advprune", version, about = "Adversarial training on pruned, weighted data subsets")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "ADVPRUNE_OUT", default_value = "advprune-out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set selector.fraction=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.set_pair(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset file.
    GenData {
        #[arg(long, default_value = "two_gaussians")]
        kind: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the configured method and evaluate it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Method to train instead of the configured selector, e.g. `glister@0.3`.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate a checkpoint under the configured attacks.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one selection round and dump the weighted subset.
    Select {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Parameters to select against; a fresh initialization otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train with per-epoch categorization of the training set.
    Track {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run every configured method and write the comparison report.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_checkpoint(path: &Path) -> Result<(advprune_core::models::ModelSpec, advprune_core::diffcore::ParamSet)> {
    Ok(read_checkpoint(&mut BufReader::new(File::open(path)?))?)
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_path();
    match cli.cmd {
        Cmd::GenData { kind, n, noise, seed, output } => {
            let kind: ToyKind = kind.parse()?;
            let d = generate_toy_dataset(kind, n, noise, seed, &output)?;
            println!("wrote {} examples of {kind} to {}", d.len(), output.display());
        }
        Cmd::Train { cfg, method } => {
            let cfg = cfg.load()?;
            let method = match method {
                Some(m) => m.parse::<MethodSpec>()?,
                None => cfg.own_method(),
            };
            let splits = load_splits(&cfg)?;
            let run = run_method(&cfg, &method, &splits, Some(out))?;
            print!("{}", ExperimentReport::from_runs(std::slice::from_ref(&run)).table());
            println!("outputs in {}", out.join(method_slug(&method)).display());
        }
        Cmd::Evaluate { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let (model, params) = load_checkpoint(&checkpoint)?;
            let splits = load_splits(&cfg)?;
            let report = evaluate_robust_accuracy(
                &model,
                &params,
                &splits.test,
                &eval_attacks(&cfg),
                AttackLoss::CrossEntropy,
                rng::mix(cfg.seed, rng::tag::EVAL),
                256,
            )?;
            let name = checkpoint.display().to_string();
            for r in &report.rows {
                println!("eps {:.5}  clean {:.4}  robust {:.4}", r.epsilon, r.clean_acc, r.robust_acc);
            }
            write_csv(&out.join("robustness.csv"), &robustness_records(&name, &report))?;
        }
        Cmd::Select { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let splits = load_splits(&cfg)?;
            let model = model_spec(&cfg, &splits.train)?;
            let params = match &checkpoint {
                Some(p) => {
                    let (spec, params) = load_checkpoint(p)?;
                    if spec != model {
                        return Err(HarnessError::config("model.kind", "checkpoint does not match the configured model"));
                    }
                    params
                }
                None => init_model(&model, cfg.seed)?,
            };
            let method = cfg.own_method();
            let tc = train_config(&cfg, &method, model.clone())?;
            let sc = tc
                .selector
                .ok_or_else(|| HarnessError::config("selector.kind", "select needs a selector"))?;
            let n = splits.train.len();
            let sel = match sc.kind {
                SelectorKind::Random => select_random(n, sc.subset_size(n), cfg.seed)?,
                SelectorKind::Glister => select_adv_glister(&model, &params, &splits.train, &splits.val, &sc, cfg.seed)?,
                SelectorKind::GradMatch => select_adv_gradmatch(&model, &params, &splits.train, &sc, cfg.seed)?,
            };
            let rows: Vec<SelectionRecord> = sel
                .indices
                .iter()
                .zip(&sel.weights)
                .map(|(&index, &weight)| SelectionRecord { epoch: 0, index, weight })
                .collect();
            let path = out.join("selection.csv");
            write_csv(&path, &rows)?;
            println!(
                "{} selected {} of {n} examples (objective {:.6}, {:.3}s) -> {}",
                sc.kind,
                sel.len(),
                sel.objective,
                sel.select_seconds,
                path.display()
            );
        }
        Cmd::Track { cfg } => {
            let mut cfg = cfg.load()?;
            cfg.track = true;
            let method = cfg.own_method();
            let splits = load_splits(&cfg)?;
            let run = run_method(&cfg, &method, &splits, Some(out))?;
            println!("epoch  outlier  boundary  robust");
            for m in &run.outcome.metrics {
                let c = m.tracking.unwrap_or_default();
                println!("{:>5}  {:>7}  {:>8}  {:>6}", m.epoch, c.outlier, c.boundary, c.robust);
            }
        }
        Cmd::Report { cfg } => {
            let cfg = cfg.load()?;
            let (report, _) = run_experiment(&cfg, Some(out))?;
            print!("{}", report.table());
            println!("report written to {}", out.join("report.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
