//! Weighted training-subset selection: uniform random sampling,
//! adversarial GLISTER (validation-loss greedy) and adversarial
//! GRAD-MATCH (gradient matching via orthogonal matching pursuit).
//!
//! Both informed selectors work on per-example gradients of the final
//! dense layer, evaluated at adversarially perturbed inputs.

mod glister;
mod gradmatch;
mod omp;

use std::str::FromStr;

use rand::seq::index;

use crate::attacks::{pgd_attack, AttackLoss, AttackSpec};
use crate::data::Dataset;
use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::models::{penultimate_features, ModelSpec};
use crate::rng;

pub use glister::{glister_gain, glister_greedy, select_adv_glister, GlisterValidation};
pub use gradmatch::select_adv_gradmatch;
pub use omp::{omp_solve, OmpSolution, OmpWarning};

/// A weighted subset of the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetSelection {
    /// Sorted, unique indices into the training set.
    pub indices: Vec<usize>,
    /// One non-negative weight per index.
    pub weights: Vec<f32>,
    /// Final value of the selection objective.
    pub objective: f64,
    pub select_seconds: f64,
}

impl SubsetSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks the type invariants against a population of `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.indices.len() != self.weights.len() {
            return Err(Error::ShapeMismatch {
                name: "selection weights".into(),
                expected: vec![self.indices.len()],
                actual: vec![self.weights.len()],
            });
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("selection indices must be sorted and unique".into()));
        }
        if self.indices.last().is_some_and(|&i| i >= n) {
            return Err(Error::InvalidConfig(format!("selection index out of range for {n} examples")));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("selection weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Builds a selection from picks in arbitrary order, sorting by index.
    pub(crate) fn from_picks(mut picks: Vec<(usize, f32)>, objective: f64, select_seconds: f64) -> Self {
        picks.sort_by_key(|p| p.0);
        Self {
            indices: picks.iter().map(|p| p.0).collect(),
            weights: picks.iter().map(|p| p.1).collect(),
            objective,
            select_seconds,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectorKind {
    Random,
    Glister,
    GradMatch,
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "random" => Ok(Self::Random),
            "glister" | "advglister" => Ok(Self::Glister),
            "gradmatch" | "advgradmatch" => Ok(Self::GradMatch),
            other => Err(Error::InvalidConfig(format!("unknown selector `{other}`"))),
        }
    }
}

impl std::fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Glister => "glister",
            Self::GradMatch => "gradmatch",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorConfig {
    pub kind: SelectorKind,
    /// Subset size as a fraction of the training set, in (0, 1].
    pub fraction: f64,
    /// Attack used to perturb examples before computing gradients.
    pub selection_attack: AttackSpec,
    /// Step size of GLISTER's hypothetical final-layer update.
    pub glister_eta: f64,
    /// Ridge regularizer of the OMP weight fit.
    pub omp_lambda: f64,
    /// OMP stops once the residual norm falls to this value.
    pub omp_tol: f64,
    /// Examples per attack batch during selection.
    pub batch_size: usize,
}

impl SelectorConfig {
    pub fn new(kind: SelectorKind, fraction: f64, epsilon: f32) -> Self {
        Self {
            kind,
            fraction,
            selection_attack: AttackSpec::probe(epsilon),
            glister_eta: 0.01,
            omp_lambda: 0.5,
            omp_tol: 1e-4,
            batch_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "selector fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        if !(self.omp_tol >= 0.0) || !(self.omp_lambda >= 0.0) {
            return Err(Error::InvalidConfig("omp_tol and omp_lambda must be >= 0".into()));
        }
        if !(self.glister_eta > 0.0) {
            return Err(Error::InvalidConfig("glister_eta must be > 0".into()));
        }
        self.selection_attack.validate()
    }

    pub fn subset_size(&self, n: usize) -> usize {
        subset_size(n, self.fraction)
    }
}

/// `ceil(fraction · n)`, clamped to `[1, n]`.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    let k = (fraction * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1.min(n), n)
}

/// Uniform sample of `k` of `n` indices without replacement, unit weights.
pub fn select_random(n: usize, k: usize, seed: u64) -> Result<SubsetSelection> {
    if k > n {
        return Err(Error::SubsetTooLarge { k, n });
    }
    let start = std::time::Instant::now();
    let mut r = rng::stream(seed, rng::tag::INITIAL_SUBSET);
    let mut picks = index::sample(&mut r, n, k).into_vec();
    picks.sort_unstable();
    Ok(SubsetSelection {
        weights: vec![1.0; picks.len()],
        indices: picks,
        objective: 0.0,
        select_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Row-major matrix of per-example gradient vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl GradMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows * dim != data.len() {
            return Err(Error::ValueCount {
                name: "gradient matrix".into(),
                shape: vec![rows, dim],
                expected: rows * dim,
                actual: data.len(),
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Index-ordered sum of all rows, accumulated in f64.
    pub fn row_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0f64; self.dim];
        for i in 0..self.rows {
            for (a, &v) in s.iter_mut().zip(self.row(i)) {
                *a += v as f64;
            }
        }
        s
    }
}

/// Per-example cross-entropy gradients of the final dense layer.
///
/// For row `i` with penultimate features `h` and softmax output `p`, the
/// pre-activation gradient is `e = p − onehot(y)`; the returned vector is
/// `vec(h ⊗ e)` (laid out like `head.weight`, `[F, K]` row-major)
/// followed by `e` (the bias part), dimension `K·(F+1)`.
pub fn last_layer_gradients(
    model: &ModelSpec,
    params: &ParamSet,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<GradMatrix> {
    if inputs.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let h = penultimate_features(model, params, inputs)?;
    last_layer_gradients_from_features(&h, labels, params)
}

pub(crate) fn head(params: &ParamSet) -> (&Tensor, &Tensor) {
    let n = params.len();
    (params.tensor(n - 2), params.tensor(n - 1))
}

pub(crate) fn last_layer_gradients_from_features(
    h: &Tensor,
    labels: &[usize],
    params: &ParamSet,
) -> Result<GradMatrix> {
    let (w, b) = head(params);
    let (n, f) = (h.rows(), h.row_len());
    let k = b.len();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            name: "labels".into(),
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    let dim = k * (f + 1);
    let mut data = Vec::with_capacity(n * dim);
    let mut z = vec![0.0f64; k];
    for i in 0..n {
        let y = labels[i];
        if y >= k {
            return Err(Error::LabelOutOfRange { row: i, label: y, classes: k });
        }
        let hi = h.row(i);
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = 0.0f64;
            for (fi, &hv) in hi.iter().enumerate() {
                s += hv as f64 * w.data()[fi * k + j] as f64;
            }
            *zj = s + b.data()[j] as f64;
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let e: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(j, v)| (v - m).exp() / total - if j == y { 1.0 } else { 0.0 })
            .collect();
        for &hv in hi {
            for &ej in &e {
                data.push((hv as f64 * ej) as f32);
            }
        }
        data.extend(e.iter().map(|&v| v as f32));
    }
    GradMatrix::new(n, dim, data)
}

/// Adversarial versions of `data`'s examples under `attack` (cross-entropy
/// objective), in chunks of `batch_size`. Noise keys derive from `seed` and
/// the example index.
pub(crate) fn perturb_all(
    model: &ModelSpec,
    params: &ParamSet,
    data: &Dataset,
    attack: &AttackSpec,
    seed: u64,
    batch_size: usize,
) -> Result<Tensor> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let keys = rng::example_keys(seed, chunk);
        parts.push(pgd_attack(model, params, &x, &y, attack, AttackLoss::CrossEntropy, &keys)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}
