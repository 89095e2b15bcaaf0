use advprune_core::attacks::AttackSpec;
use advprune_core::data::Dataset;
use advprune_core::diffcore::Tensor;
use advprune_core::models::{init_model, penultimate_features, ModelSpec};
use advprune_core::selection::{
    glister_greedy, last_layer_gradients, omp_solve, select_adv_glister, select_adv_gradmatch, select_random,
    GlisterValidation, GradMatrix, SelectorConfig, SelectorKind,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Solves the ridge normal equations by Gaussian elimination with partial
/// pivoting, clamps negative weights, and returns the residual norm.
fn ls_residual(cols: &[Vec<f64>], support: &[usize], t: &[f64], lambda: f64, clamp: bool) -> (Vec<f64>, f64) {
    let m = support.len();
    let mut a = vec![vec![0.0; m + 1]; m];
    for i in 0..m {
        for j in 0..m {
            a[i][j] = cols[support[i]].iter().zip(&cols[support[j]]).map(|(x, y)| x * y).sum();
        }
        a[i][i] += lambda;
        a[i][m] = cols[support[i]].iter().zip(t).map(|(x, y)| x * y).sum();
    }
    for c in 0..m {
        let p = (c..m).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()).unwrap();
        a.swap(c, p);
        for r in 0..m {
            if r != c {
                let f = a[r][c] / a[c][c];
                for q in c..=m {
                    a[r][q] -= f * a[c][q];
                }
            }
        }
    }
    let mut w: Vec<f64> = (0..m).map(|i| a[i][m] / a[i][i]).collect();
    if clamp {
        w.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let mut r = t.to_vec();
    for (&j, &wj) in support.iter().zip(&w) {
        for (ri, &c) in r.iter_mut().zip(&cols[j]) {
            *ri -= wj * c;
        }
    }
    (w, r.iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn random_matrix(m: usize, d: usize, r: &mut ChaCha8Rng) -> GradMatrix {
    GradMatrix::new(m, d, (0..m * d).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn to_f64(g: &GradMatrix) -> Vec<Vec<f64>> {
    (0..g.rows).map(|i| g.row(i).iter().map(|&v| v as f64).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn omp_residuals_never_increase(seed in 0u64..10_000, m in 2usize..9, d in 2usize..7, k in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(m, d, &mut r);
        let t: Vec<f32> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let s = omp_solve(&a, &t, k.min(m), 0.0, 0.0).unwrap();
        prop_assert!(s.residual_history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(s.weights.iter().all(|&w| w >= 0.0));
        let mut sorted = s.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), s.indices.len());
    }

    #[test]
    fn omp_residual_is_the_fit_on_its_support(seed in 0u64..10_000, lambda in 0.0f64..1.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(6, 5, &mut r);
        let t: Vec<f32> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
        let s = omp_solve(&a, &t, 3, lambda, 0.0).unwrap();
        let t64: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let (_, res) = ls_residual(&to_f64(&a), &s.indices, &t64, lambda, true);
        prop_assert!((res - s.residual_norm as f64).abs() <= 1e-5 * (1.0 + res));
    }
}

#[test]
fn omp_single_column_target_is_recovered() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let a = random_matrix(6, 4, &mut r);
        let j = r.gen_range(0..6);
        let s = omp_solve(&a, a.row(j), 2, 0.0, 0.0).unwrap();
        assert_eq!(s.indices[0], j);
        assert!(s.residual_norm <= 1e-6);
    }
}

#[test]
fn omp_three_by_four_matches_exhaustive_pairs_on_greedy_support() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = random_matrix(4, 3, &mut r);
        let t: Vec<f32> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s = omp_solve(&a, &t, 2, 0.0, 0.0).unwrap();
        let t64: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let cols = to_f64(&a);
        // every pair containing the first greedy pick
        let first = s.indices[0];
        let best = (0..4)
            .filter(|&j| j != first)
            .map(|j| ls_residual(&cols, &[first, j], &t64, 0.0, false).1)
            .fold(f64::INFINITY, f64::min);
        let (w, unclamped) = ls_residual(&cols, &s.indices, &t64, 0.0, false);
        if w.iter().all(|&v| v >= 0.0) {
            // OMP's second column is the one whose addition fits best, up to
            // correlation-vs-fit ordering; it can never beat the optimum
            assert!(s.residual_norm as f64 >= best - 1e-6);
            assert!((s.residual_norm as f64 - unclamped).abs() < 1e-5);
        }
        assert!(s.residual_history.windows(2).all(|h| h[1] <= h[0]));
    }
}

fn toy(n: usize, seed: u64) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let centre = if c == 0 { 0.3 } else { 0.7 };
        x.push((centre + r.gen_range(-0.15f32..0.15)).clamp(0.0, 1.0));
        x.push((centre + r.gen_range(-0.15f32..0.15)).clamp(0.0, 1.0));
        y.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 2], x).unwrap(), y, 2).unwrap()
}

fn cfg(kind: SelectorKind, fraction: f64) -> SelectorConfig {
    SelectorConfig::new(kind, fraction, 0.05)
}

#[test]
fn random_selection_frequencies_are_uniform() {
    let (n, k) = (10_000, 3_000);
    let mut counts = vec![0u32; n];
    for seed in 0..100 {
        for i in select_random(n, k, seed).unwrap().indices {
            counts[i] += 1;
        }
    }
    // each count is Binomial(100, 0.3); allow the 0.3 ± 0.03 band to be
    // crossed by the rare index, but not systematically
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / (100.0 * n as f64);
    assert!((mean - 0.3).abs() < 1e-12);
    let inside = counts.iter().filter(|&&c| (27..=33).contains(&c)).count();
    assert!(inside as f64 / n as f64 > 0.5);
    assert!(counts.iter().all(|&c| (10..=50).contains(&c)));
}

#[test]
fn gradmatch_full_fraction_matches_target() {
    let data = toy(40, 1);
    let spec = ModelSpec::default_mlp(2, 2);
    let params = init_model(&spec, 1).unwrap();
    let mut c = cfg(SelectorKind::GradMatch, 1.0);
    c.omp_lambda = 0.0;
    let s = select_adv_gradmatch(&spec, &params, &data, &c, 3).unwrap();
    s.validate(40).unwrap();
    assert_eq!(s.indices, (0..40).collect::<Vec<_>>());
    let g = last_layer_gradients(&spec, &params, &data.features, &data.labels).unwrap();
    let norm = g.row_sum().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(s.objective <= 1e-5 * norm.max(1e-12) || s.objective == 0.0, "{} vs {}", s.objective, norm);
}

#[test]
fn gradmatch_identical_examples_need_one_index() {
    let x = Tensor::new(vec![5, 2], [0.2f32, 0.6].repeat(5)).unwrap();
    let data = Dataset::new(x, vec![1; 5], 2).unwrap();
    let spec = ModelSpec::default_mlp(2, 2);
    let params = init_model(&spec, 2).unwrap();
    let mut c = cfg(SelectorKind::GradMatch, 0.2);
    c.omp_lambda = 0.0;
    c.selection_attack = AttackSpec { steps: 0, ..c.selection_attack };
    let s = select_adv_gradmatch(&spec, &params, &data, &c, 0).unwrap();
    assert_eq!(s.indices, vec![0]);
    assert!((s.weights[0] - 5.0).abs() < 1e-4);
    assert!(s.objective < 1e-5);
}

#[test]
fn gradmatch_six_examples_two_picks() {
    let data = toy(6, 5);
    let spec = ModelSpec::mlp(2, vec![8], 2);
    let params = init_model(&spec, 5).unwrap();
    let mut c = cfg(SelectorKind::GradMatch, 2.0 / 6.0);
    c.omp_lambda = 0.0;
    c.omp_tol = 0.0;
    c.selection_attack = AttackSpec { steps: 0, ..c.selection_attack };
    let s = select_adv_gradmatch(&spec, &params, &data, &c, 0).unwrap();
    assert_eq!(s.len(), 2);
    let g = last_layer_gradients(&spec, &params, &data.features, &data.labels).unwrap();
    let cols = to_f64(&g);
    let t = g.row_sum();
    let t32: Vec<f64> = t.iter().map(|&v| v as f32 as f64).collect();
    // the reported objective is the clamped least-squares fit on the chosen pair
    let (_, res) = ls_residual(&cols, &s.indices, &t32, 0.0, true);
    assert!((res - s.objective).abs() <= 1e-4 * (1.0 + res));
    // and no single column does better
    let single = (0..6).map(|j| ls_residual(&cols, &[j], &t32, 0.0, true).1).fold(f64::INFINITY, f64::min);
    assert!(s.objective <= single + 1e-6);
}

#[test]
fn glister_full_fraction_selects_everything() {
    let data = toy(30, 3);
    let val = toy(10, 4);
    let spec = ModelSpec::default_mlp(2, 2);
    let params = init_model(&spec, 3).unwrap();
    let s = select_adv_glister(&spec, &params, &data, &val, &cfg(SelectorKind::Glister, 1.0), 1).unwrap();
    assert_eq!(s.indices, (0..30).collect::<Vec<_>>());
    assert!(s.weights.iter().all(|&w| w == 1.0));
    assert!(select_adv_glister(&spec, &params, &data, &val.subset(&[]), &cfg(SelectorKind::Glister, 0.5), 1).is_err());
}

#[test]
fn selectors_are_deterministic() {
    let data = toy(50, 6);
    let val = toy(10, 7);
    let spec = ModelSpec::default_mlp(2, 2);
    let params = init_model(&spec, 6).unwrap();
    let c = cfg(SelectorKind::Glister, 0.3);
    let a = select_adv_glister(&spec, &params, &data, &val, &c, 4).unwrap();
    let b = select_adv_glister(&spec, &params, &data, &val, &c, 4).unwrap();
    assert_eq!((a.indices, a.weights, a.objective), (b.indices, b.weights, b.objective));
    let c = cfg(SelectorKind::GradMatch, 0.3);
    let a = select_adv_gradmatch(&spec, &params, &data, &c, 4).unwrap();
    let b = select_adv_gradmatch(&spec, &params, &data, &c, 4).unwrap();
    a.validate(50).unwrap();
    assert_eq!(a.len(), 15);
    assert_eq!((a.indices, a.weights, a.objective), (b.indices, b.weights, b.objective));
}

#[test]
fn glister_prefers_the_validation_clone() {
    // validation = copies of training point 0; every other training point
    // has a last-layer gradient orthogonal to it
    let spec = ModelSpec::mlp(2, vec![], 2);
    let mut params = init_model(&spec, 0).unwrap();
    params.get_mut("head.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let h = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let val = GlisterValidation::new(&h, &[0, 0, 0], &params).unwrap();
    let train_h = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let mut grads = advprune_core::selection::last_layer_gradients(&spec, &params, &train_h, &[1, 0, 1]).unwrap();
    // zero the bias part of the distractors so only the clone has a useful direction
    for i in [0, 2] {
        let d = grads.dim;
        grads.data[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
    }
    let (picks, _) = glister_greedy(&grads, &val, 1, 0.5).unwrap();
    assert_eq!(picks, vec![1]);
    let h2 = penultimate_features(&spec, &params, &train_h).unwrap();
    assert_eq!(h2, train_h);
}
