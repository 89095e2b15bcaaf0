use super::graph::{Graph, Var};
use super::tensor::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// A differentiable architecture: builds its forward pass on a graph from
/// parameter handles (in [`ParamSet`] order) and an input handle.
pub trait Network<T: Scalar> {
    fn forward(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Var>;
}

/// A scalar training or attack objective evaluated on a batch.
///
/// `input` is the (possibly perturbed) batch being differentiated; any
/// other data the objective needs (labels, clean inputs, reference logits,
/// weights) is carried by the implementor.
pub trait Objective<T: Scalar> {
    fn build(
        &self,
        g: &mut Graph<T>,
        net: &dyn Network<T>,
        params: &[Var],
        input: Var,
    ) -> Result<Var>;
}

/// Loss value with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord<T = f32> {
    /// One tensor per parameter, shape-matched. Empty when not requested.
    pub param_grads: Vec<Tensor<T>>,
    /// Shape-matched to the input batch. `None` when not requested.
    pub input_grad: Option<Tensor<T>>,
    pub loss_value: T,
    /// Per-example loss values, when the objective reports them.
    pub per_example: Vec<T>,
}

/// Which gradients to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wants {
    pub params: bool,
    pub input: bool,
}

impl Wants {
    pub const ALL: Wants = Wants { params: true, input: true };
    pub const PARAMS: Wants = Wants { params: true, input: false };
    pub const INPUT: Wants = Wants { params: false, input: true };
    pub const NONE: Wants = Wants { params: false, input: false };
}

fn check_finite<T: Scalar>(v: T) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { value: v.f64() })
    }
}

/// Forward and backward pass of `objective` at `(params, inputs)`.
/// Pure: neither `params` nor `inputs` is modified.
pub fn differentiate<T: Scalar>(
    net: &dyn Network<T>,
    params: &ParamSet<T>,
    inputs: &Tensor<T>,
    objective: &dyn Objective<T>,
    wants: Wants,
) -> Result<GradientRecord<T>> {
    let mut g = Graph::new();
    let pvars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.value.clone(), wants.params))
        .collect();
    let x = g.leaf(inputs.clone(), wants.input);
    let root = objective.build(&mut g, net, &pvars, x)?;
    let loss_value = g.value(root).data()[0];
    check_finite(loss_value)?;
    let per_example = g.per_example(root).map(<[T]>::to_vec).unwrap_or_default();

    if !wants.params && !wants.input {
        return Ok(GradientRecord {
            param_grads: Vec::new(),
            input_grad: None,
            loss_value,
            per_example,
        });
    }
    let mut grads = g.backward(root)?;
    let param_grads = if wants.params {
        pvars
            .iter()
            .zip(params.iter())
            .map(|(&v, p)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect()
    } else {
        Vec::new()
    };
    let input_grad = if wants.input {
        Some(
            grads
                .take(x)
                .unwrap_or_else(|| Tensor::zeros(inputs.shape().to_vec())),
        )
    } else {
        None
    };
    Ok(GradientRecord {
        param_grads,
        input_grad,
        loss_value,
        per_example,
    })
}

/// Loss, parameter gradients and input gradients in one pass.
pub fn evaluate_with_gradients<T: Scalar>(
    net: &dyn Network<T>,
    params: &ParamSet<T>,
    inputs: &Tensor<T>,
    objective: &dyn Objective<T>,
) -> Result<GradientRecord<T>> {
    differentiate(net, params, inputs, objective, Wants::ALL)
}

/// Loss value only (no backward sweep).
pub fn evaluate_loss<T: Scalar>(
    net: &dyn Network<T>,
    params: &ParamSet<T>,
    inputs: &Tensor<T>,
    objective: &dyn Objective<T>,
) -> Result<T> {
    Ok(differentiate(net, params, inputs, objective, Wants::NONE)?.loss_value)
}

/// Central-difference gradient oracle: `(L(θ+h·e_i) − L(θ−h·e_i)) / 2h`
/// for every parameter scalar and every input scalar.
pub fn finite_difference_gradient<T: Scalar>(
    net: &dyn Network<T>,
    params: &ParamSet<T>,
    inputs: &Tensor<T>,
    objective: &dyn Objective<T>,
    h: T,
) -> Result<GradientRecord<T>> {
    if !(h > T::zero()) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let two_h = h + h;
    let centre = differentiate(net, params, inputs, objective, Wants::NONE)?;

    let mut work = params.clone();
    let mut param_grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params.tensor(pi).shape().to_vec());
        for j in 0..grad.len() {
            let orig = work.tensor(pi).data()[j];
            work.tensor_mut(pi).data_mut()[j] = orig + h;
            let plus = evaluate_loss(net, &work, inputs, objective)?;
            work.tensor_mut(pi).data_mut()[j] = orig - h;
            let minus = evaluate_loss(net, &work, inputs, objective)?;
            work.tensor_mut(pi).data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / two_h;
        }
        param_grads.push(grad);
    }

    let mut x = inputs.clone();
    let mut input_grad = Tensor::zeros(inputs.shape().to_vec());
    for j in 0..x.len() {
        let orig = x.data()[j];
        x.data_mut()[j] = orig + h;
        let plus = evaluate_loss(net, params, &x, objective)?;
        x.data_mut()[j] = orig - h;
        let minus = evaluate_loss(net, params, &x, objective)?;
        x.data_mut()[j] = orig;
        input_grad.data_mut()[j] = (plus - minus) / two_h;
    }

    Ok(GradientRecord {
        param_grads,
        input_grad: Some(input_grad),
        loss_value: centre.loss_value,
        per_example: centre.per_example,
    })
}

/// Largest element-wise violation of `|a − b| ≤ max(abs_floor, rel_tol·max(|a|,|b|))`,
/// reported as the ratio `|a − b| / max(abs_floor, rel_tol·max(|a|,|b|))`.
/// Values ≤ 1 pass.
pub fn gradient_check_ratio<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, rel_tol: f64, abs_floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.f64(), y.f64());
            let allowed = (rel_tol * x.abs().max(y.abs())).max(abs_floor);
            (x - y).abs() / allowed
        })
        .fold(0.0, f64::max)
}
