use std::time::Instant;

use rand::seq::SliceRandom;

use super::{last_layer_gradients_from_features, omp_solve, perturb_all, SelectorConfig, SubsetSelection};
use crate::data::Dataset;
use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::models::{penultimate_features, ModelSpec};
use crate::rng;

/// Adversarial GRAD-MATCH round: matches the summed adversarial last-layer
/// gradient of the whole training set with a weighted subset found by OMP.
///
/// When OMP stops early (tolerance reached or no useful column left) the
/// subset is filled up to `ceil(fraction·n)` with seeded random unused
/// indices at weight 0. The objective is the final residual norm. With
/// `fraction = 1` every example is kept at weight 1.
pub fn select_adv_gradmatch(
    model: &ModelSpec,
    params: &ParamSet,
    train: &Dataset,
    cfg: &SelectorConfig,
    seed: u64,
) -> Result<SubsetSelection> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let n = train.len();
    let k = cfg.subset_size(n);
    let adv = perturb_all(model, params, train, &cfg.selection_attack, rng::mix(seed, 0), cfg.batch_size)?;
    let h = penultimate_features(model, params, &adv)?;
    let grads = last_layer_gradients_from_features(&h, &train.labels, params)?;
    let target: Vec<f32> = grads.row_sum().iter().map(|&v| v as f32).collect();

    if k == n {
        // unit weights reproduce the target exactly
        let sum = grads.row_sum();
        let objective = sum.iter().zip(&target).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>().sqrt();
        return Ok(SubsetSelection::from_picks(
            (0..n).map(|i| (i, 1.0)).collect(),
            objective,
            start.elapsed().as_secs_f64(),
        ));
    }
    let sol = omp_solve(&grads, &target, k, cfg.omp_lambda, cfg.omp_tol)?;
    let mut picks: Vec<(usize, f32)> = sol.indices.iter().copied().zip(sol.weights.iter().copied()).collect();
    if picks.len() < k {
        let mut taken = vec![false; n];
        for &(i, _) in &picks {
            taken[i] = true;
        }
        let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
        rest.shuffle(&mut rng::stream(seed, rng::tag::SELECTION));
        picks.extend(rest.into_iter().take(k - picks.len()).map(|i| (i, 0.0)));
    }
    Ok(SubsetSelection::from_picks(
        picks,
        sol.residual_norm as f64,
        start.elapsed().as_secs_f64(),
    ))
}
