use std::time::Instant;

use super::{head, last_layer_gradients_from_features, perturb_all, GradMatrix, SelectorConfig, SubsetSelection};
use crate::data::Dataset;
use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::models::{penultimate_features, ModelSpec};
use crate::rng;

/// Penultimate features of a (perturbed) validation batch together with
/// the current final layer, in f64.
#[derive(Clone, Debug)]
pub struct GlisterValidation {
    features: Vec<f64>,
    labels: Vec<usize>,
    weight: Vec<f64>,
    bias: Vec<f64>,
    f: usize,
    k: usize,
}

impl GlisterValidation {
    pub fn new(features: &Tensor, labels: &[usize], params: &ParamSet) -> Result<Self> {
        let (w, b) = head(params);
        let (f, k) = (w.shape()[0], w.shape()[1]);
        if features.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if features.row_len() != f || labels.len() != features.rows() {
            return Err(Error::ShapeMismatch {
                name: "validation features".into(),
                expected: vec![labels.len(), f],
                actual: features.shape().to_vec(),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
            return Err(Error::LabelOutOfRange { row, label, classes: k });
        }
        Ok(Self {
            features: features.data().iter().map(|&v| v as f64).collect(),
            labels: labels.to_vec(),
            weight: w.data().iter().map(|&v| v as f64).collect(),
            bias: b.data().iter().map(|&v| v as f64).collect(),
            f,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gradient vector length this validation set accepts, `K·(F+1)`.
    pub fn grad_dim(&self) -> usize {
        self.k * (self.f + 1)
    }

    fn logits_with(&self, w: &[f64], b: &[f64]) -> Vec<f64> {
        let (f, k) = (self.f, self.k);
        let mut z = Vec::with_capacity(self.len() * k);
        for i in 0..self.len() {
            let h = &self.features[i * f..(i + 1) * f];
            for j in 0..k {
                let mut s = b[j];
                for (fi, &hv) in h.iter().enumerate() {
                    s += hv * w[fi * k + j];
                }
                z.push(s);
            }
        }
        z
    }

    /// Mean negative log-likelihood of the given logits.
    fn nll(&self, z: &[f64]) -> f64 {
        let k = self.k;
        let mut total = 0.0;
        for (i, &y) in self.labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        total / self.len() as f64
    }

    /// Validation loss at the current final layer.
    pub fn loss(&self) -> f64 {
        self.nll(&self.logits_with(&self.weight, &self.bias))
    }

    /// Validation loss after the step `θ_head − eta·grad`.
    pub fn loss_after_step(&self, grad: &[f32], eta: f64) -> Result<f64> {
        self.check_grad(grad)?;
        let fk = self.f * self.k;
        let w: Vec<f64> = self.weight.iter().zip(&grad[..fk]).map(|(&w, &g)| w - eta * g as f64).collect();
        let b: Vec<f64> = self.bias.iter().zip(&grad[fk..]).map(|(&b, &g)| b - eta * g as f64).collect();
        Ok(self.nll(&self.logits_with(&w, &b)))
    }

    fn check_grad(&self, grad: &[f32]) -> Result<()> {
        if grad.len() != self.grad_dim() {
            return Err(Error::ShapeMismatch {
                name: "candidate gradient".into(),
                expected: vec![self.grad_dim()],
                actual: vec![grad.len()],
            });
        }
        Ok(())
    }

    /// Change in validation logits per unit step along `-grad`, i.e.
    /// `H·g_W + g_b` for each validation row.
    fn logit_direction(&self, grad: &[f32]) -> Vec<f64> {
        let (f, k) = (self.f, self.k);
        let mut d = Vec::with_capacity(self.len() * k);
        for i in 0..self.len() {
            let h = &self.features[i * f..(i + 1) * f];
            for j in 0..k {
                let mut s = grad[f * k + j] as f64;
                for (fi, &hv) in h.iter().enumerate() {
                    s += hv * grad[fi * k + j] as f64;
                }
                d.push(s);
            }
        }
        d
    }
}

/// `L_V(θ) − L_V(θ − eta·g)` with the step applied to the final layer only.
pub fn glister_gain(candidate: &[f32], val: &GlisterValidation, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidConfig(format!("eta must be > 0, got {eta}")));
    }
    Ok(val.loss() - val.loss_after_step(candidate, eta)?)
}

/// Greedy maximization of the one-step validation gain. After each pick the
/// hypothetical final layer moves by `−eta·g_pick`, so later gains are
/// measured from the updated point. Returns picks in order and the final
/// validation loss.
pub fn glister_greedy(candidates: &GradMatrix, val: &GlisterValidation, k: usize, eta: f64) -> Result<(Vec<usize>, f64)> {
    if !(eta > 0.0) {
        return Err(Error::InvalidConfig(format!("eta must be > 0, got {eta}")));
    }
    if k > candidates.rows {
        return Err(Error::SubsetTooLarge { k, n: candidates.rows });
    }
    if candidates.dim != val.grad_dim() {
        return Err(Error::ShapeMismatch {
            name: "candidate gradient".into(),
            expected: vec![val.grad_dim()],
            actual: vec![candidates.dim],
        });
    }
    let dirs: Vec<Vec<f64>> = (0..candidates.rows).map(|i| val.logit_direction(candidates.row(i))).collect();
    let mut z = val.logits_with(&val.weight, &val.bias);
    let mut used = vec![false; candidates.rows];
    let mut picks = Vec::with_capacity(k);
    let mut trial = vec![0.0; z.len()];
    for _ in 0..k {
        let base = val.nll(&z);
        let mut best: Option<(usize, f64)> = None;
        for (j, d) in dirs.iter().enumerate() {
            if used[j] {
                continue;
            }
            for ((t, &zv), &dv) in trial.iter_mut().zip(&z).zip(d) {
                *t = zv - eta * dv;
            }
            let gain = base - val.nll(&trial);
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((j, gain));
            }
        }
        let (j, _) = best.expect("k <= number of candidates");
        used[j] = true;
        picks.push(j);
        for (zv, &dv) in z.iter_mut().zip(&dirs[j]) {
            *zv -= eta * dv;
        }
    }
    Ok((picks, val.nll(&z)))
}

/// Adversarial GLISTER round: perturbs the validation set once, computes
/// adversarial last-layer gradients for every training example, then picks
/// `ceil(fraction·n)` examples greedily. All weights are 1.
pub fn select_adv_glister(
    model: &ModelSpec,
    params: &ParamSet,
    train: &Dataset,
    val: &Dataset,
    cfg: &SelectorConfig,
    seed: u64,
) -> Result<SubsetSelection> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if val.is_empty() {
        return Err(Error::InvalidConfig("glister needs a non-empty validation set".into()));
    }
    let start = Instant::now();
    let k = cfg.subset_size(train.len());
    let attack = &cfg.selection_attack;
    let val_adv = perturb_all(model, params, val, attack, rng::mix(seed, 1), cfg.batch_size)?;
    let hv = penultimate_features(model, params, &val_adv)?;
    let validation = GlisterValidation::new(&hv, &val.labels, params)?;
    let train_adv = perturb_all(model, params, train, attack, rng::mix(seed, 0), cfg.batch_size)?;
    let ht = penultimate_features(model, params, &train_adv)?;
    let grads = last_layer_gradients_from_features(&ht, &train.labels, params)?;
    let (picks, objective) = glister_greedy(&grads, &validation, k, cfg.glister_eta)?;
    Ok(SubsetSelection::from_picks(
        picks.into_iter().map(|i| (i, 1.0)).collect(),
        objective,
        start.elapsed().as_secs_f64(),
    ))
}
