//! Runs a set of training methods on one dataset and compares them.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use advprune_core::attacks::{evaluate_robust_accuracy, AttackLoss, AttackSpec, RobustnessReport};
use advprune_core::bullet::{track_dynamics, BudgetPolicy};
use advprune_core::data::Dataset;
use advprune_core::losses::{LossConfig, LossKind};
use advprune_core::models::{write_checkpoint, ModelKind, ModelSpec};
use advprune_core::rng;
use advprune_core::selection::SelectorConfig;
use advprune_core::trainer::{adversarial_train, adversarial_train_from, EpochMetrics, TrainConfig, TrainOutcome};

use crate::config::{ExperimentConfig, MethodSpec, ModelChoice};
use crate::dataset::{load_dataset, split_train_val};
use crate::error::{HarnessError, Result};
use crate::report::{
    write_csv, MetricsRecord, ReportRecord, RobustnessRecord, SelectionRecord, TrackingRecord,
};
use crate::toy::{generate_toy, ToyKind};

const TEST_TAG: u64 = 0x2003;

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    /// Held-out set used for the final robustness evaluation.
    pub test: Dataset,
}

fn load_source(name: &str, n: usize, noise: f32, seed: u64) -> Result<Dataset> {
    match name.parse::<ToyKind>() {
        Ok(kind) => generate_toy(kind, n, noise, seed),
        Err(_) => load_dataset(Path::new(name)),
    }
}

/// Loads or generates the data and splits off the validation set.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let data = load_source(&cfg.dataset, cfg.data_n, cfg.data_noise, cfg.seed)?;
    let (train, val) = split_train_val(&data, cfg.val_fraction, cfg.seed)?;
    let test_seed = rng::mix(cfg.seed, TEST_TAG);
    let test = match (&cfg.test_dataset, cfg.dataset.parse::<ToyKind>()) {
        (Some(t), _) => load_source(t, cfg.data_n_test, cfg.data_noise, test_seed)?,
        (None, Ok(kind)) => generate_toy(kind, cfg.data_n_test, cfg.data_noise, test_seed)?,
        (None, Err(_)) if !val.is_empty() => val.clone(),
        (None, Err(_)) => train.clone(),
    };
    Ok(Splits { train, val, test })
}

pub fn model_spec(cfg: &ExperimentConfig, data: &Dataset) -> Result<ModelSpec> {
    let shape = data.feature_shape().to_vec();
    let spec = match cfg.model {
        ModelChoice::Mlp => {
            if shape.len() != 1 {
                return Err(HarnessError::config("model.kind", format!("mlp needs flat features, dataset has {shape:?}")));
            }
            ModelSpec::mlp(shape[0], cfg.hidden.clone(), data.classes)
        }
        ModelChoice::Cnn => ModelSpec {
            kind: ModelKind::TinyCnn { channels: cfg.channels },
            input_shape: shape,
            classes: data.classes,
        },
    };
    spec.validate().map_err(|e| HarnessError::config("model.kind", e.to_string()))?;
    Ok(spec)
}

/// Attack with the given radius and steps; ε = 0 means no attack at all.
fn attack(eps: f32, alpha: f32, steps: usize, restarts: usize) -> AttackSpec {
    AttackSpec {
        epsilon: eps,
        alpha,
        steps: if eps == 0.0 { 0 } else { steps },
        restarts: restarts.max(1),
        random_init: true,
        pixel_bounds: (0.0, 1.0),
    }
}

pub fn eval_attacks(cfg: &ExperimentConfig) -> Vec<AttackSpec> {
    cfg.eval_eps
        .iter()
        .map(|&e| attack(e, cfg.eval_alpha, cfg.eval_steps, cfg.eval_restarts))
        .collect()
}

pub fn train_config(cfg: &ExperimentConfig, method: &MethodSpec, model: ModelSpec) -> Result<TrainConfig> {
    let eps = cfg.train_eps;
    let alpha = cfg.train_alpha.unwrap_or(eps / 4.0);
    let kind = match cfg.loss_kind.as_str() {
        "ce" => LossKind::Ce,
        "trades" => LossKind::Trades,
        "mart" => LossKind::Mart,
        other => return Err(HarnessError::config("loss.kind", format!("unknown loss `{other}`"))),
    };
    let selector = method.selector.map(|kind| SelectorConfig {
        selection_attack: attack(eps, alpha, cfg.selector_steps, 1),
        glister_eta: cfg.selector_eta,
        omp_lambda: cfg.selector_lambda,
        omp_tol: cfg.selector_tol,
        ..SelectorConfig::new(kind, method.fraction, eps)
    });
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        selector,
        selection_interval: cfg.interval,
        loss: LossConfig {
            kind,
            beta: cfg.loss_beta as f32,
            lambda_mart: cfg.loss_lambda as f32,
        },
        train_attack: attack(eps, alpha, cfg.train_steps, cfg.train_restarts),
        eval_attacks: Vec::new(),
        lr0: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        lr_milestones: cfg.milestones.clone(),
        bullet: method.bullet.then_some(BudgetPolicy {
            outlier_steps: cfg.steps_outlier,
            boundary_steps: cfg.steps_boundary,
            robust_steps: cfg.steps_robust,
        }),
        probe_attack: attack(eps, alpha, cfg.probe_steps, 1),
        seed: cfg.seed,
        eval_every: cfg.eval_every,
        track: cfg.track,
        ..TrainConfig::new(model, eps)
    };
    tc.validate().map_err(|e| HarnessError::Method {
        method: method.to_string(),
        source: e,
    })?;
    Ok(tc)
}

/// Median training-phase seconds over epochs after the first (warm-up);
/// single-epoch runs use that epoch.
pub fn steady_state_seconds(metrics: &[EpochMetrics]) -> f64 {
    let skip = usize::from(metrics.len() > 1);
    let mut t: Vec<f64> = metrics.iter().skip(skip).map(|m| m.epoch_seconds).collect();
    if t.is_empty() {
        return 0.0;
    }
    t.sort_by(f64::total_cmp);
    let mid = t.len() / 2;
    if t.len() % 2 == 1 {
        t[mid]
    } else {
        0.5 * (t[mid - 1] + t[mid])
    }
}

/// Directory-safe method name.
pub fn method_slug(method: &MethodSpec) -> String {
    method.to_string().replace(['@', '+'], "_")
}

#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: MethodSpec,
    pub outcome: TrainOutcome,
    pub eval: RobustnessReport,
    pub time_per_epoch: f64,
    pub selection_seconds: f64,
}

/// Trains one method and evaluates it on the test split. With `out`,
/// writes `<out>/<method>/{metrics,tracking,selections}.csv` and
/// checkpoints.
pub fn run_method(cfg: &ExperimentConfig, method: &MethodSpec, splits: &Splits, out: Option<&Path>) -> Result<MethodRun> {
    let wrap = |e: advprune_core::Error| HarnessError::Method {
        method: method.to_string(),
        source: e,
    };
    let model = model_spec(cfg, &splits.train)?;
    let tc = train_config(cfg, method, model.clone())?;
    let dir: Option<PathBuf> = out.map(|o| o.join(method_slug(method)));
    let outcome = match &dir {
        None => adversarial_train(&splits.train, &splits.val, &tc).map_err(wrap)?,
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let every = cfg.checkpoint_every;
            let mut save = |m: &EpochMetrics, p: &advprune_core::diffcore::ParamSet| -> advprune_core::Result<()> {
                let last = m.epoch + 1 == cfg.epochs;
                if last || (every > 0 && (m.epoch + 1).is_multiple_of(every)) {
                    let name = if last { "final.ckpt".to_string() } else { format!("epoch{:04}.ckpt", m.epoch + 1) };
                    let mut w = BufWriter::new(File::create(dir.join(name))?);
                    write_checkpoint(&mut w, &model, p)?;
                }
                Ok(())
            };
            let init = advprune_core::models::init_model(&model, cfg.seed).map_err(wrap)?;
            adversarial_train_from(&splits.train, &splits.val, &tc, init, &mut save).map_err(wrap)?
        }
    };
    let eval = evaluate_robust_accuracy(
        &model,
        &outcome.params,
        &splits.test,
        &eval_attacks(cfg),
        AttackLoss::CrossEntropy,
        rng::mix(cfg.seed, rng::tag::EVAL),
        256,
    )
    .map_err(wrap)?;

    if let Some(dir) = &dir {
        write_csv(&dir.join("metrics.csv"), &outcome.metrics.iter().map(MetricsRecord::from).collect::<Vec<_>>())?;
        if cfg.track {
            let history: Vec<_> = outcome.metrics.iter().filter_map(|m| m.tracking.map(|t| (m.epoch, t))).collect();
            let table = track_dynamics(&history, splits.train.len()).map_err(wrap)?;
            write_csv(&dir.join("tracking.csv"), &table.rows.iter().map(TrackingRecord::from).collect::<Vec<_>>())?;
        }
        let mut sel = Vec::new();
        let rounds = outcome.initial_subset.iter().map(|s| (0, s)).chain(outcome.selections.iter().map(|(e, s)| (*e, s)));
        for (epoch, s) in rounds {
            sel.extend(s.indices.iter().zip(&s.weights).map(|(&index, &weight)| SelectionRecord { epoch, index, weight }));
        }
        write_csv(&dir.join("selections.csv"), &sel)?;
        write_csv(&dir.join("robustness.csv"), &robustness_records(&method.to_string(), &eval))?;
    }

    Ok(MethodRun {
        method: *method,
        time_per_epoch: steady_state_seconds(&outcome.metrics),
        selection_seconds: outcome.metrics.iter().map(|m| m.selection_seconds).sum(),
        outcome,
        eval,
    })
}

pub fn robustness_records(method: &str, eval: &RobustnessReport) -> Vec<RobustnessRecord> {
    eval.rows
        .iter()
        .map(|r| RobustnessRecord {
            method: method.to_string(),
            epsilon: r.epsilon,
            clean_acc: r.clean_acc,
            robust_acc: r.robust_acc,
            examples: r.examples,
            seconds: r.seconds,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: MethodSpec,
    pub clean_acc: f64,
    /// `(ε, robust accuracy)`.
    pub robust: Vec<(f32, f64)>,
    /// Steady-state training seconds per epoch.
    pub time_per_epoch: f64,
    /// Total selection seconds over the run.
    pub selection_seconds: f64,
    /// Baseline time per epoch divided by this row's.
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub baseline: String,
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    /// Speed-ups are relative to the `full` run, or to the first method
    /// when `full` is not part of the set.
    pub fn from_runs(runs: &[MethodRun]) -> Self {
        let base = runs.iter().find(|r| r.method == MethodSpec::full()).or(runs.first());
        let base_time = base.map_or(0.0, |b| b.time_per_epoch);
        let rows = runs
            .iter()
            .map(|r| ReportRow {
                method: r.method,
                clean_acc: r.eval.rows.first().map_or(0.0, |x| x.clean_acc),
                robust: r.eval.rows.iter().map(|x| (x.epsilon, x.robust_acc)).collect(),
                time_per_epoch: r.time_per_epoch,
                selection_seconds: r.selection_seconds,
                speedup: base_time / r.time_per_epoch,
            })
            .collect();
        Self {
            baseline: base.map_or(String::new(), |b| b.method.to_string()),
            rows,
        }
    }

    pub fn records(&self) -> Vec<ReportRecord> {
        let mut out = Vec::new();
        for r in &self.rows {
            for &(epsilon, robust_acc) in &r.robust {
                out.push(ReportRecord {
                    method: r.method.to_string(),
                    fraction: r.method.fraction,
                    bullet: r.method.bullet,
                    epsilon,
                    clean_acc: r.clean_acc,
                    robust_acc,
                    time_per_epoch: r.time_per_epoch,
                    selection_seconds: r.selection_seconds,
                    speedup: r.speedup,
                });
            }
        }
        out
    }

    /// Plain-text table, one line per method.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let eps: Vec<f32> = self.rows.first().map(|r| r.robust.iter().map(|x| x.0).collect()).unwrap_or_default();
        let _ = write!(s, "{:<24} {:>7}", "method", "clean");
        for e in &eps {
            let _ = write!(s, " {:>9}", format!("ε={:.4}", e));
        }
        let _ = writeln!(s, " {:>22}", "time/epoch (speed-up)");
        for r in &self.rows {
            let _ = write!(s, "{:<24} {:>7.2}", r.method.to_string(), 100.0 * r.clean_acc);
            for (_, a) in &r.robust {
                let _ = write!(s, " {:>9.2}", 100.0 * a);
            }
            let _ = writeln!(s, " {:>13.4}s ({:.2}x)", r.time_per_epoch, r.speedup);
        }
        s
    }
}

/// Runs every configured method with the shared seed. With `out`, also
/// writes per-method outputs and `<out>/report.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(ExperimentReport, Vec<MethodRun>)> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let runs = cfg
        .method_list()
        .iter()
        .map(|m| run_method(cfg, m, &splits, out))
        .collect::<Result<Vec<_>>>()?;
    let report = ExperimentReport::from_runs(&runs);
    if let Some(out) = out {
        write_csv(&out.join("report.csv"), &report.records())?;
    }
    Ok((report, runs))
}

/// Reads a config file and runs it.
pub fn run_experiment_file(path: &Path, out: Option<&Path>) -> Result<(ExperimentReport, Vec<MethodRun>)> {
    run_experiment(&ExperimentConfig::load(path)?, out)
}
