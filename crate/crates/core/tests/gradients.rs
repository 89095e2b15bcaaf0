use advprune_core::diffcore::{
    differentiate, finite_difference_gradient, gradient_check_ratio, Graph, Network, Objective, ParamSet, Tensor,
    Var, Wants,
};
use advprune_core::losses::{CrossEntropyObjective, KlObjective, LossConfig, LossKind, TrainingObjective};
use advprune_core::models::{forward_logits, ModelKind, ModelSpec};
use advprune_core::selection::last_layer_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const REL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
/// Instances with a ReLU input or max-pool gap closer than this to a switch
/// point are redrawn; a central difference across a kink is meaningless.
const KINK: f64 = 5e-3;

fn random_params(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let params = spec
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect();
            (name, Tensor::new(shape, data).unwrap())
        })
        .collect();
    ParamSet::new(params).unwrap()
}

fn random_batch(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Vec<usize>) {
    let mut shape = vec![n];
    shape.extend(&spec.input_shape);
    let len = n * spec.input_len();
    let x = Tensor::new(shape, (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let y = (0..n).map(|_| rng.gen_range(0..spec.classes)).collect();
    (x, y)
}

fn kink_margin(spec: &ModelSpec, params: &ParamSet<f64>, x: &Tensor<f64>, obj: &dyn Objective<f64>) -> f64 {
    let mut g = Graph::new();
    let p: Vec<Var> = params.iter().map(|p| g.leaf(p.value.clone(), true)).collect();
    let xv = g.leaf(x.clone(), true);
    obj.build(&mut g, spec, &p, xv).unwrap();
    g.kink_margin().unwrap_or(f64::INFINITY)
}

/// Smallest gap between the two largest non-true logits of any row.
fn second_max_gap(z: &Tensor<f64>, labels: &[usize]) -> f64 {
    (0..z.rows())
        .map(|i| {
            let mut others: Vec<f64> = z.row(i).iter().enumerate().filter(|(k, _)| *k != labels[i]).map(|(_, &v)| v).collect();
            others.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if others.len() < 2 {
                f64::INFINITY
            } else {
                others[0] - others[1]
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn check(spec: &ModelSpec, params: &ParamSet<f64>, x: &Tensor<f64>, obj: &dyn Objective<f64>) {
    let analytic = differentiate(spec, params, x, obj, Wants::ALL).unwrap();
    let numeric = finite_difference_gradient(spec, params, x, obj, H).unwrap();
    for (i, (a, f)) in analytic.param_grads.iter().zip(&numeric.param_grads).enumerate() {
        let r = gradient_check_ratio(a, f, REL, FLOOR);
        assert!(r <= 1.0, "param {i}: ratio {r}");
    }
    let r = gradient_check_ratio(analytic.input_grad.as_ref().unwrap(), numeric.input_grad.as_ref().unwrap(), REL, FLOOR);
    assert!(r <= 1.0, "input: ratio {r}");
}

fn specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::mlp(3, vec![5, 4], 3),
        ModelSpec {
            kind: ModelKind::TinyCnn { channels: [2, 3] },
            input_shape: vec![1, 8, 8],
            classes: 3,
        },
    ]
}

fn run_loss(kind: &str, instances: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed ^ kind.len() as u64);
    for spec in specs() {
        let mut done = 0;
        while done < instances {
            let params = random_params(&spec, &mut rng);
            let (x, y) = random_batch(&spec, 2, &mut rng);
            let noise: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-0.05..0.05)).collect();
            let adv = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&noise).map(|(a, b)| a + b).collect()).unwrap();
            let reference = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let cfg = |kind| LossConfig { kind, beta: 1.5, lambda_mart: 2.0 };
            let ce = CrossEntropyObjective { labels: &y, weights: None };
            let kl = KlObjective { reference: &reference };
            let trades = TrainingObjective { config: cfg(LossKind::Trades), clean: &x, labels: &y, weights: None };
            let mart = TrainingObjective { config: cfg(LossKind::Mart), clean: &x, labels: &y, weights: None };
            let (obj, input): (&dyn Objective<f64>, &Tensor<f64>) = match kind {
                "ce" => (&ce, &x),
                "kl" => (&kl, &x),
                "trades" => (&trades, &adv),
                "mart" => (&mart, &adv),
                _ => unreachable!(),
            };
            if kink_margin(&spec, &params, input, obj) < KINK {
                continue;
            }
            if kind == "mart" && second_max_gap(&forward_logits(&spec, &params, input).unwrap(), &y) < KINK {
                continue;
            }
            check(&spec, &params, input, obj);
            done += 1;
        }
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    run_loss("ce", 5);
}

#[test]
fn kl_gradients_match_finite_differences() {
    run_loss("kl", 5);
}

#[test]
fn trades_gradients_match_finite_differences() {
    run_loss("trades", 5);
}

#[test]
fn mart_gradients_match_finite_differences() {
    run_loss("mart", 5);
}

#[test]
fn weighted_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = ModelSpec::mlp(2, vec![6], 2);
    let params = random_params(&spec, &mut rng);
    let (x, y) = random_batch(&spec, 4, &mut rng);
    let w = [0.5, 2.0, 0.0, 1.25];
    let obj = CrossEntropyObjective { labels: &y, weights: Some(&w) };
    assert!(kink_margin(&spec, &params, &x, &obj) > 1e-2);
    check(&spec, &params, &x, &obj);
}

#[test]
fn zero_linear_model_gives_log_k_and_zero_input_gradient() {
    let spec = ModelSpec::mlp(4, vec![], 5);
    let params = ParamSet::new(
        spec.param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::<f64>::zeros(s)))
            .collect(),
    )
    .unwrap();
    let x = Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7, 0.6]).unwrap();
    let y = [1, 4];
    let rec = differentiate(&spec, &params, &x, &CrossEntropyObjective { labels: &y, weights: None }, Wants::ALL).unwrap();
    assert!((rec.loss_value - 5f64.ln()).abs() < 1e-12);
    assert!(rec.input_grad.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn duplicated_batch_gives_identical_mean_loss_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = ModelSpec::mlp(3, vec![4], 3);
    let params = random_params(&spec, &mut rng);
    let (x, y) = random_batch(&spec, 3, &mut rng);
    let xx = Tensor::concat_rows(&[&x, &x]).unwrap();
    let yy: Vec<usize> = y.iter().chain(&y).copied().collect();
    let a = differentiate(&spec, &params, &x, &CrossEntropyObjective { labels: &y, weights: None }, Wants::PARAMS).unwrap();
    let b = differentiate(&spec, &params, &xx, &CrossEntropyObjective { labels: &yy, weights: None }, Wants::PARAMS).unwrap();
    assert!((a.loss_value - b.loss_value).abs() < 1e-12);
    for (ga, gb) in a.param_grads.iter().zip(&b.param_grads) {
        assert!(gradient_check_ratio(ga, gb, 1e-10, 1e-14) <= 1.0);
    }
}

#[test]
fn gradients_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = specs().remove(1);
    let params = random_params(&spec, &mut rng).cast::<f32>();
    let (x, y) = random_batch(&spec, 2, &mut rng);
    let x = x.cast::<f32>();
    let obj = CrossEntropyObjective { labels: &y, weights: None };
    let a = differentiate(&spec, &params, &x, &obj, Wants::ALL).unwrap();
    let b = differentiate(&spec, &params, &x, &obj, Wants::ALL).unwrap();
    assert_eq!(a, b);
}

/// Network that exposes only the final dense layer, fed with fixed features.
struct HeadOnly;

impl Network<f32> for HeadOnly {
    fn forward(&self, g: &mut Graph<f32>, params: &[Var], input: Var) -> advprune_core::Result<Var> {
        let z = g.matmul(input, params[0])?;
        g.add_bias(z, params[1])
    }
}

#[test]
fn last_layer_gradients_match_autodiff() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for spec in specs() {
        let params = random_params(&spec, &mut rng).cast::<f32>();
        let (x, y) = random_batch(&spec, 5, &mut rng);
        let x = x.cast::<f32>();
        let grads = last_layer_gradients(&spec, &params, &x, &y).unwrap();
        let h = advprune_core::models::penultimate_features(&spec, &params, &x).unwrap();
        let n = params.len();
        let head = ParamSet::new(vec![
            ("w".into(), params.tensor(n - 2).clone()),
            ("b".into(), params.tensor(n - 1).clone()),
        ])
        .unwrap();
        for i in 0..5 {
            let hi = h.select_rows(&[i]);
            let rec = differentiate(&HeadOnly, &head, &hi, &CrossEntropyObjective { labels: &y[i..=i], weights: None }, Wants::PARAMS)
                .unwrap();
            let expected: Vec<f32> = rec.param_grads.iter().flat_map(|t| t.data().to_vec()).collect();
            for (a, b) in grads.row(i).iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
            }
        }
    }
}
