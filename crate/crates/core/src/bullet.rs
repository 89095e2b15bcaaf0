//! Per-example attack budgets driven by a cheap robustness probe.
//!
//! Each probed example falls in exactly one category: *outlier* (already
//! misclassified without attack), *boundary* (correct clean, wrong under
//! the probe attack) or *robust* (correct under both). Training then spends
//! a category-dependent number of PGD steps on each example.

use std::str::FromStr;

use crate::attacks::{pgd_attack, AttackLoss, AttackSpec};
use crate::data::Dataset;
use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::models::{predict, ModelSpec};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExampleCategory {
    Outlier,
    Boundary,
    Robust,
}

impl ExampleCategory {
    pub fn classify(clean_correct: bool, adversarial_correct: bool) -> Self {
        match (clean_correct, adversarial_correct) {
            (false, _) => Self::Outlier,
            (true, false) => Self::Boundary,
            (true, true) => Self::Robust,
        }
    }
}

impl FromStr for ExampleCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outlier" => Ok(Self::Outlier),
            "boundary" => Ok(Self::Boundary),
            "robust" => Ok(Self::Robust),
            other => Err(Error::InvalidConfig(format!("unknown category `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CategoryCounts {
    pub outlier: usize,
    pub boundary: usize,
    pub robust: usize,
}

impl CategoryCounts {
    pub fn from_categories(cats: &[ExampleCategory]) -> Self {
        let mut c = Self::default();
        for cat in cats {
            match cat {
                ExampleCategory::Outlier => c.outlier += 1,
                ExampleCategory::Boundary => c.boundary += 1,
                ExampleCategory::Robust => c.robust += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.outlier + self.boundary + self.robust
    }
}

/// PGD steps spent on each category during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetPolicy {
    pub outlier_steps: usize,
    pub boundary_steps: usize,
    pub robust_steps: usize,
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        Self {
            outlier_steps: 0,
            boundary_steps: 10,
            robust_steps: 1,
        }
    }
}

impl BudgetPolicy {
    pub fn uniform(steps: usize) -> Self {
        Self {
            outlier_steps: steps,
            boundary_steps: steps,
            robust_steps: steps,
        }
    }

    pub fn steps_for(&self, cat: ExampleCategory) -> usize {
        match cat {
            ExampleCategory::Outlier => self.outlier_steps,
            ExampleCategory::Boundary => self.boundary_steps,
            ExampleCategory::Robust => self.robust_steps,
        }
    }
}

/// Categories of the probed examples, in probe order.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorization {
    pub indices: Vec<usize>,
    pub categories: Vec<ExampleCategory>,
    pub counts: CategoryCounts,
}

/// Probes `data[indices]` with `probe` (cross-entropy PGD). Noise keys
/// derive from `seed` and the dataset index, so the result does not depend
/// on batch composition.
pub fn categorize_examples(
    model: &ModelSpec,
    params: &ParamSet,
    data: &Dataset,
    indices: &[usize],
    probe: &AttackSpec,
    seed: u64,
    batch_size: usize,
) -> Result<Categorization> {
    probe.validate()?;
    let mut categories = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let clean = predict(model, params, &x)?;
        let keys = rng::example_keys(seed, chunk);
        let adv = pgd_attack(model, params, &x, &y, probe, AttackLoss::CrossEntropy, &keys)?;
        let attacked = predict(model, params, &adv)?;
        for i in 0..chunk.len() {
            categories.push(ExampleCategory::classify(clean[i] == y[i], attacked[i] == y[i]));
        }
    }
    Ok(Categorization {
        indices: indices.to_vec(),
        counts: CategoryCounts::from_categories(&categories),
        categories,
    })
}

/// Per-example training attacks: `base` with the step count replaced by the
/// policy's budget for each example's category.
pub fn allocate_attack_budget(categories: &[ExampleCategory], policy: &BudgetPolicy, base: &AttackSpec) -> Vec<AttackSpec> {
    categories.iter().map(|&c| base.with_steps(policy.steps_for(c))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrackingRow {
    pub epoch: usize,
    pub n_outlier: usize,
    pub n_boundary: usize,
    pub n_robust: usize,
}

impl TrackingRow {
    pub fn total(&self) -> usize {
        self.n_outlier + self.n_boundary + self.n_robust
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackingTable {
    pub rows: Vec<TrackingRow>,
}

/// Builds the per-epoch table, checking that every row accounts for all
/// `probed` examples.
pub fn track_dynamics(history: &[(usize, CategoryCounts)], probed: usize) -> Result<TrackingTable> {
    if history.is_empty() {
        return Err(Error::InvalidConfig("tracking needs at least one recorded epoch".into()));
    }
    let mut rows = Vec::with_capacity(history.len());
    for &(epoch, c) in history {
        if c.total() != probed {
            return Err(Error::InvalidConfig(format!(
                "epoch {epoch}: category counts sum to {}, expected {probed}",
                c.total()
            )));
        }
        rows.push(TrackingRow {
            epoch,
            n_outlier: c.outlier,
            n_boundary: c.boundary,
            n_robust: c.robust,
        });
    }
    Ok(TrackingTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_table() {
        assert_eq!(ExampleCategory::classify(false, true), ExampleCategory::Outlier);
        assert_eq!(ExampleCategory::classify(false, false), ExampleCategory::Outlier);
        assert_eq!(ExampleCategory::classify(true, false), ExampleCategory::Boundary);
        assert_eq!(ExampleCategory::classify(true, true), ExampleCategory::Robust);
    }

    #[test]
    fn default_policy_lookup() {
        let p = BudgetPolicy::default();
        let base = AttackSpec::training(0.1);
        let specs = allocate_attack_budget(
            &[ExampleCategory::Outlier, ExampleCategory::Boundary, ExampleCategory::Robust],
            &p,
            &base,
        );
        assert_eq!(specs.iter().map(|s| s.steps).collect::<Vec<_>>(), vec![0, 10, 1]);
        assert!(specs.iter().all(|s| s.epsilon == base.epsilon && s.alpha == base.alpha));
    }

    #[test]
    fn all_robust_batch_costs_one_step_each() {
        let cats = vec![ExampleCategory::Robust; 64];
        let specs = allocate_attack_budget(&cats, &BudgetPolicy::default(), &AttackSpec::training(0.1));
        let total: usize = specs.iter().map(|s| s.steps).sum();
        assert_eq!(total, 64);
        assert_eq!(64 * AttackSpec::training(0.1).steps / total, 10);
    }

    #[test]
    fn tracking_rows_sum() {
        let c = CategoryCounts { outlier: 10, boundary: 20, robust: 70 };
        let t = track_dynamics(&[(0, c)], 100).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].total(), 100);
        assert!(track_dynamics(&[(0, c)], 99).is_err());
        assert!(track_dynamics(&[], 0).is_err());
    }
}
