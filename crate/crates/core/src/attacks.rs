//! ℓ∞ adversarial example generation and robustness evaluation.
//!
//! Random starts draw their noise from a per-example key (see
//! [`crate::rng::example_keys`]), so an example's adversary depends only on
//! the model, the example and its key, never on which other examples share
//! the batch.

use std::time::Instant;

use rand::{Rng as _, SeedableRng};

use crate::data::Dataset;
use crate::diffcore::{differentiate, Graph, Network, Objective, ParamSet, Tensor, Wants};
use crate::error::{Error, Result};
use crate::losses::{CrossEntropyObjective, KlObjective, MarginObjective};
use crate::models::{predict_from_logits, ModelSpec};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    /// ℓ∞ radius in input units.
    pub epsilon: f32,
    /// Step size in input units.
    pub alpha: f32,
    pub steps: usize,
    pub restarts: usize,
    pub random_init: bool,
    pub pixel_bounds: (f32, f32),
}

impl AttackSpec {
    /// Training-time default: 10 steps of ε/4, one random start.
    pub fn training(epsilon: f32) -> Self {
        Self {
            epsilon,
            alpha: epsilon / 4.0,
            steps: 10,
            restarts: 1,
            random_init: true,
            pixel_bounds: (0.0, 1.0),
        }
    }

    /// PGD-50-10 with α = 2/255.
    pub fn evaluation(epsilon: f32) -> Self {
        Self {
            epsilon,
            alpha: 2.0 / 255.0,
            steps: 50,
            restarts: 10,
            random_init: true,
            pixel_bounds: (0.0, 1.0),
        }
    }

    /// PGD-5-1, used for categorization probes and inside subset selection.
    pub fn probe(epsilon: f32) -> Self {
        Self {
            steps: 5,
            ..Self::training(epsilon)
        }
    }

    pub fn with_steps(self, steps: usize) -> Self {
        Self { steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.steps > 0 && !(self.alpha > 0.0) {
            return bad(format!("alpha must be > 0 when steps > 0, got {}", self.alpha));
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".into());
        }
        if !(self.pixel_bounds.0 <= self.pixel_bounds.1) {
            return bad(format!("invalid pixel bounds {:?}", self.pixel_bounds));
        }
        Ok(())
    }

    fn is_noop(&self) -> bool {
        self.steps == 0 || self.epsilon == 0.0
    }
}

/// Objective maximized by the attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackLoss {
    CrossEntropy,
    /// KL(clean ‖ adversarial) with clean logits held fixed (TRADES).
    Kl,
    /// `max_{k≠y} z_k − z_y`.
    Margin,
}

fn project_slice(clean: &[f32], x: &mut [f32], spec: &AttackSpec) {
    let (lo, hi) = spec.pixel_bounds;
    for (v, &c) in x.iter_mut().zip(clean) {
        let a = (c - spec.epsilon).max(lo);
        let b = (c + spec.epsilon).min(hi);
        *v = v.max(a).min(b);
    }
}

/// Clamps `candidate` into `[clean − ε, clean + ε] ∩ pixel_bounds`.
pub fn project_linf(clean: &Tensor, candidate: &Tensor, spec: &AttackSpec) -> Result<Tensor> {
    if clean.shape() != candidate.shape() {
        return Err(Error::ShapeMismatch {
            name: "candidate".into(),
            expected: clean.shape().to_vec(),
            actual: candidate.shape().to_vec(),
        });
    }
    let mut out = candidate.clone();
    project_slice(clean.data(), out.data_mut(), spec);
    Ok(out)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn logits(net: &dyn Network<f32>, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p: Vec<_> = params.iter().map(|p| g.constant(p.value.clone())).collect();
    let xv = g.constant(x.clone());
    let z = net.forward(&mut g, &p, xv)?;
    Ok(g.value(z).clone())
}

/// Runs `f` with the objective that `loss` describes for this batch.
fn with_objective<R>(
    net: &dyn Network<f32>,
    params: &ParamSet,
    clean: &Tensor,
    labels: &[usize],
    loss: AttackLoss,
    f: impl FnOnce(&dyn Objective<f32>) -> Result<R>,
) -> Result<R> {
    match loss {
        AttackLoss::CrossEntropy => f(&CrossEntropyObjective { labels, weights: None }),
        AttackLoss::Margin => f(&MarginObjective { labels }),
        AttackLoss::Kl => {
            let reference = logits(net, params, clean)?;
            f(&KlObjective { reference: &reference })
        }
    }
}

fn per_example_losses(rec_loss: f32, per: Vec<f32>, n: usize) -> Result<Vec<f32>> {
    if per.len() == n {
        Ok(per)
    } else if n == 1 {
        Ok(vec![rec_loss])
    } else {
        Err(Error::InvalidConfig(
            "objective does not report per-example losses; restarts need them".into(),
        ))
    }
}

/// One PGD run from a (possibly random) start. Restart index `restart`
/// selects the noise sub-stream of each example key.
fn pgd_run(
    net: &dyn Network<f32>,
    params: &ParamSet,
    clean: &Tensor,
    objective: &dyn Objective<f32>,
    spec: &AttackSpec,
    keys: &[u64],
    restart: usize,
) -> Result<Tensor> {
    let mut x = clean.clone();
    if spec.random_init {
        let w = x.row_len();
        for (i, &key) in keys.iter().enumerate() {
            let mut r = Rng::seed_from_u64(rng::mix(key, restart as u64));
            for v in &mut x.data_mut()[i * w..(i + 1) * w] {
                *v += r.gen_range(-spec.epsilon..=spec.epsilon);
            }
        }
        project_slice(clean.data(), x.data_mut(), spec);
    }
    for _ in 0..spec.steps {
        let rec = differentiate(net, params, &x, objective, Wants::INPUT)?;
        let grad = rec.input_grad.expect("input gradient requested");
        for (v, &d) in x.data_mut().iter_mut().zip(grad.data()) {
            *v += spec.alpha * sign(d);
        }
        project_slice(clean.data(), x.data_mut(), spec);
    }
    Ok(x)
}

fn check_keys(inputs: &Tensor, keys: &[u64]) -> Result<()> {
    if keys.len() != inputs.rows() {
        return Err(Error::ShapeMismatch {
            name: "noise keys".into(),
            expected: vec![inputs.rows()],
            actual: vec![keys.len()],
        });
    }
    Ok(())
}

/// Projected sign-gradient ascent on an arbitrary objective. Among
/// `restarts` runs, keeps per example the final iterate with the largest
/// loss (earliest restart on ties). `steps == 0` or `ε == 0` returns the
/// clean batch.
pub fn pgd_attack_with(
    net: &dyn Network<f32>,
    params: &ParamSet,
    inputs: &Tensor,
    objective: &dyn Objective<f32>,
    spec: &AttackSpec,
    keys: &[u64],
) -> Result<Tensor> {
    spec.validate()?;
    check_keys(inputs, keys)?;
    if spec.is_noop() {
        return Ok(inputs.clone());
    }
    let n = inputs.rows();
    let mut best = pgd_run(net, params, inputs, objective, spec, keys, 0)?;
    if spec.restarts == 1 {
        return Ok(best);
    }
    let rec = differentiate(net, params, &best, objective, Wants::NONE)?;
    let mut best_loss = per_example_losses(rec.loss_value, rec.per_example, n)?;
    for r in 1..spec.restarts {
        let cand = pgd_run(net, params, inputs, objective, spec, keys, r)?;
        let rec = differentiate(net, params, &cand, objective, Wants::NONE)?;
        let loss = per_example_losses(rec.loss_value, rec.per_example, n)?;
        for i in 0..n {
            if loss[i] > best_loss[i] {
                best_loss[i] = loss[i];
                best.row_mut(i).copy_from_slice(cand.row(i));
            }
        }
    }
    Ok(best)
}

/// PGD against one of the standard attack objectives.
pub fn pgd_attack(
    net: &dyn Network<f32>,
    params: &ParamSet,
    inputs: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    loss: AttackLoss,
    keys: &[u64],
) -> Result<Tensor> {
    if spec.is_noop() {
        spec.validate()?;
        check_keys(inputs, keys)?;
        return Ok(inputs.clone());
    }
    with_objective(net, params, inputs, labels, loss, |obj| {
        pgd_attack_with(net, params, inputs, obj, spec, keys)
    })
}

/// Single sign step of size ε, then projection. `steps`, `alpha` and
/// `random_init` are ignored.
pub fn fgsm_perturb(
    net: &dyn Network<f32>,
    params: &ParamSet,
    inputs: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    loss: AttackLoss,
) -> Result<Tensor> {
    spec.validate()?;
    if spec.epsilon == 0.0 {
        return Ok(inputs.clone());
    }
    with_objective(net, params, inputs, labels, loss, |obj| {
        let rec = differentiate(net, params, inputs, obj, Wants::INPUT)?;
        let grad = rec.input_grad.expect("input gradient requested");
        let mut x = inputs.clone();
        for (v, &d) in x.data_mut().iter_mut().zip(grad.data()) {
            *v += spec.epsilon * sign(d);
        }
        project_slice(inputs.data(), x.data_mut(), spec);
        Ok(x)
    })
}

/// One row of a robustness report.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub epsilon: f32,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub examples: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn robust_at(&self, epsilon: f32) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.epsilon - epsilon).abs() <= 1e-9)
            .map(|r| r.robust_acc)
    }
}

/// Per-example robustness from per-restart correctness: robust only if
/// correct under every restart.
pub fn worst_case(correct_per_restart: &[Vec<bool>], n: usize) -> Vec<bool> {
    let mut robust = vec![true; n];
    for run in correct_per_restart {
        for (r, &c) in robust.iter_mut().zip(run) {
            *r &= c;
        }
    }
    robust
}

/// Clean accuracy and worst-case robust accuracy under each attack.
///
/// An example counts as robust only if it is classified correctly under
/// the final iterate of every restart; examples already fooled skip the
/// remaining restarts.
pub fn evaluate_robust_accuracy(
    model: &ModelSpec,
    params: &ParamSet,
    data: &Dataset,
    attacks: &[AttackSpec],
    loss: AttackLoss,
    seed: u64,
    batch_size: usize,
) -> Result<RobustnessReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let clean_start = Instant::now();
    let mut clean_correct = vec![false; n];
    for chunk in all.chunks(batch_size) {
        let (x, y) = data.batch(chunk);
        let pred = predict_from_logits(&logits(model, params, &x)?);
        for (k, &i) in chunk.iter().enumerate() {
            clean_correct[i] = pred[k] == y[k];
        }
    }
    let clean_secs = clean_start.elapsed().as_secs_f64();
    let clean_acc = clean_correct.iter().filter(|&&c| c).count() as f64 / n as f64;
    let base = rng::mix(seed, rng::tag::EVAL);

    let mut rows = Vec::with_capacity(attacks.len());
    for spec in attacks {
        spec.validate()?;
        let start = Instant::now();
        let mut robust = vec![true; n];
        if spec.is_noop() {
            robust.copy_from_slice(&clean_correct);
        } else {
            for r in 0..spec.restarts {
                let alive: Vec<usize> = (0..n).filter(|&i| robust[i]).collect();
                for chunk in alive.chunks(batch_size) {
                    let (x, y) = data.batch(chunk);
                    let keys = rng::example_keys(base, chunk);
                    let single = AttackSpec { restarts: 1, ..*spec };
                    let adv = with_objective(model, params, &x, &y, loss, |obj| {
                        pgd_run(model, params, &x, obj, &single, &keys, r)
                    })?;
                    let pred = predict_from_logits(&logits(model, params, &adv)?);
                    for (k, &i) in chunk.iter().enumerate() {
                        robust[i] &= pred[k] == y[k];
                    }
                }
            }
        }
        rows.push(RobustnessRow {
            epsilon: spec.epsilon,
            clean_acc,
            robust_acc: robust.iter().filter(|&&c| c).count() as f64 / n as f64,
            examples: n,
            seconds: clean_secs + start.elapsed().as_secs_f64(),
        });
    }
    Ok(RobustnessReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(eps: f32) -> AttackSpec {
        AttackSpec {
            epsilon: eps,
            alpha: 0.1,
            steps: 3,
            restarts: 1,
            random_init: false,
            pixel_bounds: (0.0, 1.0),
        }
    }

    fn t(v: Vec<f32>) -> Tensor {
        let n = v.len();
        Tensor::new(vec![1, n], v).unwrap()
    }

    #[test]
    fn projection_clamps_to_ball() {
        let out = project_linf(&t(vec![0.5]), &t(vec![0.9]), &spec(0.1)).unwrap();
        assert_eq!(out.data(), &[0.6]);
    }

    #[test]
    fn projection_box_dominates() {
        let out = project_linf(&t(vec![0.0]), &t(vec![-0.3]), &spec(0.1)).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn projection_identity_inside() {
        let c = t(vec![0.5, 0.2]);
        let x = t(vec![0.55, 0.15]);
        assert_eq!(project_linf(&c, &x, &spec(0.1)).unwrap(), x);
    }

    #[test]
    fn projection_shape_mismatch() {
        assert!(project_linf(&t(vec![0.5]), &t(vec![0.5, 0.5]), &spec(0.1)).is_err());
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(2.0), 1.0);
    }

    #[test]
    fn worst_case_semantics() {
        // restart A fools example 1; restart B does not
        let runs = vec![vec![true, false, true], vec![true, true, false]];
        assert_eq!(worst_case(&runs, 3), vec![true, false, false]);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec { restarts: 0, ..spec(0.1) }.validate().is_err());
        assert!(AttackSpec { alpha: 0.0, ..spec(0.1) }.validate().is_err());
        assert!(AttackSpec { alpha: 0.0, steps: 0, ..spec(0.1) }.validate().is_ok());
        assert!(spec(-0.1).validate().is_err());
    }
}
