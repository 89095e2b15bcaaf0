//! Adversarial training on a periodically re-selected weighted subset.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::attacks::{evaluate_robust_accuracy, pgd_attack, AttackLoss, AttackSpec};
use crate::bullet::{categorize_examples, BudgetPolicy, CategoryCounts};
use crate::data::Dataset;
use crate::diffcore::{differentiate, ParamSet, Tensor, Wants};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind, TrainingObjective};
use crate::models::{init_model, predict, ModelSpec};
use crate::rng;
use crate::selection::{
    select_adv_glister, select_adv_gradmatch, select_random, SelectorConfig, SelectorKind, SubsetSelection,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` trains on the full dataset every epoch.
    pub selector: Option<SelectorConfig>,
    /// Epochs between selection rounds.
    pub selection_interval: usize,
    pub loss: LossConfig,
    pub train_attack: AttackSpec,
    /// One attack per evaluation ε.
    pub eval_attacks: Vec<AttackSpec>,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` at which the learning rate drops by 10×.
    pub lr_milestones: Vec<f64>,
    pub bullet: Option<BudgetPolicy>,
    /// Attack used to categorize examples (bullet and tracking).
    pub probe_attack: AttackSpec,
    pub seed: u64,
    /// Evaluate every this many epochs (the final epoch is always
    /// evaluated). 0 evaluates only the final epoch.
    pub eval_every: usize,
    /// Categorize the whole training set after every epoch.
    pub track: bool,
}

impl TrainConfig {
    /// Full-data PGD-AT defaults for a given model and training ε.
    pub fn new(model: ModelSpec, epsilon: f32) -> Self {
        Self {
            model,
            epochs: 40,
            batch_size: 64,
            selector: None,
            selection_interval: 20,
            loss: LossConfig {
                kind: LossKind::Ce,
                beta: 1.0,
                lambda_mart: 5.0,
            },
            train_attack: AttackSpec::training(epsilon),
            eval_attacks: Vec::new(),
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![0.5, 0.75],
            bullet: None,
            probe_attack: AttackSpec::probe(epsilon),
            seed: 0,
            eval_every: 0,
            track: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.model.validate()?;
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.selection_interval == 0 {
            return bad("selection interval must be >= 1".into());
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(s) = &self.selector {
            s.validate()?;
        }
        self.loss.validate()?;
        self.train_attack.validate()?;
        self.probe_attack.validate()?;
        for a in &self.eval_attacks {
            a.validate()?;
        }
        Ok(())
    }

    fn attack_loss(&self) -> AttackLoss {
        match self.loss.kind {
            LossKind::Trades => AttackLoss::Kl,
            LossKind::Ce | LossKind::Mart => AttackLoss::CrossEntropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Example-weighted mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Evaluation-set accuracies; `None` on epochs without evaluation.
    pub clean_acc: Option<f64>,
    /// `(ε, robust accuracy)` per evaluation attack.
    pub robust_acc: Vec<(f32, f64)>,
    /// Training-phase wall clock (shuffle, probe, attacks, updates).
    pub epoch_seconds: f64,
    /// Selection wall clock; 0 when no selection ran this epoch.
    pub selection_seconds: f64,
    pub subset_size: usize,
    /// PGD steps spent generating training adversaries, summed over examples.
    pub attack_steps: usize,
    /// Categories of the active subset (bullet only).
    pub categories: Option<CategoryCounts>,
    /// Categories of the full training set after the epoch (tracking only).
    pub tracking: Option<CategoryCounts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub metrics: Vec<EpochMetrics>,
    /// Random subset used before the first selection round.
    pub initial_subset: Option<SubsetSelection>,
    /// `(epoch, selection)` for every scheduled round.
    pub selections: Vec<(usize, SubsetSelection)>,
}

/// `v ← m·v + g + wd·θ`, then `θ ← θ − lr·v`.
pub fn sgd_update(
    params: &mut ParamSet,
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::ShapeMismatch {
            name: "gradient list".into(),
            expected: vec![params.len()],
            actual: vec![grads.len().min(velocity.len())],
        });
    }
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let shape = p.value.shape().to_vec();
        g.expect_shape(&format!("{} gradient", p.name), &shape)?;
        v.expect_shape(&format!("{} velocity", p.name), &shape)?;
        for ((t, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = m * *vi + gi + wd * *t;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// Piecewise-constant schedule: `lr0`, divided by 10 at each milestone
/// fraction of the run.
pub fn lr_schedule(epoch: usize, epochs: usize, lr0: f64, milestones: &[f64]) -> f64 {
    let drops = milestones
        .iter()
        .filter(|&&m| epoch as f64 >= m * epochs as f64)
        .count();
    lr0 * 0.1f64.powi(drops as i32)
}

/// Selection runs at epochs `R, 2R, …` strictly before `total`; epoch 0
/// trains on a random subset.
pub fn selection_schedule(epoch: usize, interval: usize, total: usize) -> bool {
    interval > 0 && epoch > 0 && epoch < total && epoch.is_multiple_of(interval)
}

/// Number of selection rounds in a run.
pub fn selection_count(interval: usize, total: usize) -> usize {
    (0..total).filter(|&e| selection_schedule(e, interval, total)).count()
}

fn clean_accuracy(model: &ModelSpec, params: &ParamSet, data: &Dataset, batch: usize) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        correct += predict(model, params, &x)?
            .iter()
            .zip(&y)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Adversarial training from the seeded initialization.
pub fn adversarial_train(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = init_model(&cfg.model, cfg.seed)?;
    adversarial_train_from(train, val, cfg, init, &mut |_, _| Ok(()))
}

/// Adversarial training from given parameters. `on_epoch` sees every
/// epoch's metrics and parameters (e.g. to write checkpoints).
///
/// Evaluation runs on `val` when it is non-empty, else on `train`.
pub fn adversarial_train_from(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    init: ParamSet,
    on_epoch: &mut dyn FnMut(&EpochMetrics, &ParamSet) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if n < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "dataset has {n} examples, fewer than batch_size {}",
            cfg.batch_size
        )));
    }
    if matches!(&cfg.selector, Some(s) if s.kind == SelectorKind::Glister) && val.is_empty() {
        return Err(Error::InvalidConfig("glister needs a non-empty validation set".into()));
    }
    let model = &cfg.model;
    let mut params = init;
    let mut velocity = params.zeros_like();
    let mut shuffle_rng = rng::stream(cfg.seed, rng::tag::SHUFFLE);
    let eval_set = if val.is_empty() { train } else { val };

    let (mut active, mut weights, initial_subset) = match &cfg.selector {
        None => ((0..n).collect::<Vec<_>>(), vec![1.0f32; n], None),
        Some(s) => {
            let sel = select_random(n, s.subset_size(n), cfg.seed)?;
            (sel.indices.clone(), sel.weights.clone(), Some(sel))
        }
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut selections = Vec::new();
    let attack_loss = cfg.attack_loss();

    for epoch in 0..cfg.epochs {
        let mut selection_seconds = 0.0;
        if let Some(s) = &cfg.selector {
            if selection_schedule(epoch, cfg.selection_interval, cfg.epochs) {
                let start = Instant::now();
                let round_seed = rng::mix(rng::mix(cfg.seed, rng::tag::SELECTION), epoch as u64);
                let sel = match s.kind {
                    SelectorKind::Random => select_random(n, s.subset_size(n), round_seed)?,
                    SelectorKind::Glister => select_adv_glister(model, &params, train, val, s, round_seed)?,
                    SelectorKind::GradMatch => select_adv_gradmatch(model, &params, train, s, round_seed)?,
                };
                selection_seconds = start.elapsed().as_secs_f64();
                active = sel.indices.clone();
                weights = sel.weights.clone();
                selections.push((epoch, sel));
            }
        }

        let start = Instant::now();
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr0, &cfg.lr_milestones);
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.shuffle(&mut shuffle_rng);

        // per-position step budgets over `active`
        let (budgets, categories) = match &cfg.bullet {
            None => (None, None),
            Some(policy) => {
                let probe_seed = rng::mix(rng::mix(cfg.seed, rng::tag::PROBE), epoch as u64);
                let cat = categorize_examples(model, &params, train, &active, &cfg.probe_attack, probe_seed, 256)?;
                let steps: Vec<usize> = cat.categories.iter().map(|&c| policy.steps_for(c)).collect();
                (Some(steps), Some(cat.counts))
            }
        };

        let attack_base = rng::mix(rng::mix(cfg.seed, rng::tag::TRAIN_ATTACK), epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut attack_steps = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let idx: Vec<usize> = batch.iter().map(|&p| active[p]).collect();
            let w: Vec<f32> = batch.iter().map(|&p| weights[p]).collect();
            let (x, y) = train.batch(&idx);
            let keys = rng::example_keys(attack_base, &idx);
            let diverged = |e: Error| match e {
                Error::NonFiniteLoss { value } => Error::Diverged { epoch, batch: b, value },
                other => other,
            };
            let adv = match &budgets {
                None => {
                    attack_steps += idx.len() * cfg.train_attack.steps;
                    pgd_attack(model, &params, &x, &y, &cfg.train_attack, attack_loss, &keys).map_err(diverged)?
                }
                Some(budgets) => {
                    let steps: Vec<usize> = batch.iter().map(|&p| budgets[p]).collect();
                    attack_steps += steps.iter().sum::<usize>();
                    grouped_attack(model, &params, &x, &y, &cfg.train_attack, attack_loss, &keys, &steps)
                        .map_err(diverged)?
                }
            };
            let objective = TrainingObjective {
                config: cfg.loss,
                clean: &x,
                labels: &y,
                weights: Some(&w),
            };
            let rec = differentiate(model, &params, &adv, &objective, Wants::PARAMS).map_err(diverged)?;
            loss_sum += rec.loss_value as f64 * idx.len() as f64;
            sgd_update(&mut params, &rec.param_grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay)?;
            if let Some(p) = params.iter().find(|p| !p.value.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    value: p.value.max_abs() as f64,
                });
            }
        }
        let epoch_seconds = start.elapsed().as_secs_f64();

        let last = epoch + 1 == cfg.epochs;
        let evaluate = last || (cfg.eval_every > 0 && (epoch + 1).is_multiple_of(cfg.eval_every));
        let (clean_acc, robust_acc) = if evaluate {
            let eval_seed = rng::mix(cfg.seed, epoch as u64);
            if cfg.eval_attacks.is_empty() {
                (Some(clean_accuracy(model, &params, eval_set, 256)?), Vec::new())
            } else {
                let report = evaluate_robust_accuracy(
                    model,
                    &params,
                    eval_set,
                    &cfg.eval_attacks,
                    AttackLoss::CrossEntropy,
                    eval_seed,
                    256,
                )?;
                let clean = report.rows[0].clean_acc;
                (Some(clean), report.rows.iter().map(|r| (r.epsilon, r.robust_acc)).collect())
            }
        } else {
            (None, Vec::new())
        };
        let tracking = if cfg.track {
            let all: Vec<usize> = (0..n).collect();
            let seed = rng::mix(rng::mix(cfg.seed, rng::tag::TRACK), epoch as u64);
            Some(categorize_examples(model, &params, train, &all, &cfg.probe_attack, seed, 256)?.counts)
        } else {
            None
        };

        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / active.len() as f64,
            clean_acc,
            robust_acc,
            epoch_seconds,
            selection_seconds,
            subset_size: active.len(),
            attack_steps,
            categories,
            tracking,
        };
        on_epoch(&m, &params)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        params,
        metrics,
        initial_subset,
        selections,
    })
}

/// Runs one attack per distinct step count and scatters the results back
/// into batch order. A batch with a single step count is attacked in one
/// call, exactly as without budgets.
#[allow(clippy::too_many_arguments)]
fn grouped_attack(
    model: &ModelSpec,
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    base: &AttackSpec,
    loss: AttackLoss,
    keys: &[u64],
    steps: &[usize],
) -> Result<Tensor> {
    let mut distinct: Vec<usize> = steps.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() == 1 {
        return pgd_attack(model, params, x, y, &base.with_steps(distinct[0]), loss, keys);
    }
    let mut out = x.clone();
    for s in distinct {
        let rows: Vec<usize> = (0..steps.len()).filter(|&i| steps[i] == s).collect();
        if s == 0 {
            continue;
        }
        let sub_x = x.select_rows(&rows);
        let sub_y: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
        let sub_k: Vec<u64> = rows.iter().map(|&i| keys[i]).collect();
        let adv = pgd_attack(model, params, &sub_x, &sub_y, &base.with_steps(s), loss, &sub_k)?;
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(adv.row(r));
        }
    }
    Ok(out)
}
