//! Fixed small architectures: an MLP for 2-D toy data and a tiny CNN for
//! small images.
//!
//! Parameter order (and therefore update order) is fixed by
//! [`ModelSpec::param_shapes`]. The final dense layer is always the last
//! two entries, `head.weight` `[F, K]` and `head.bias` `[K]`, which the
//! subset selectors rely on.

use std::io::{Read, Write};

use rand::Rng as _;

use crate::diffcore::{Graph, Network, ParamSet, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Dense ReLU layers of the given widths, then a linear head.
    Mlp { hidden: Vec<usize> },
    /// conv3x3(c0) → ReLU → pool → conv3x3(c1) → ReLU → pool → dense head.
    TinyCnn { channels: [usize; 2] },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Per-example input shape: `[d]` for the MLP, `[C, H, W]` for the CNN.
    pub input_shape: Vec<usize>,
    pub classes: usize,
}

const KERNEL: usize = 3;

impl ModelSpec {
    pub fn mlp(inputs: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp { hidden },
            input_shape: vec![inputs],
            classes,
        }
    }

    /// The default toy MLP: `d → 64 → 64 → K`.
    pub fn default_mlp(inputs: usize, classes: usize) -> Self {
        Self::mlp(inputs, vec![64, 64], classes)
    }

    pub fn tiny_cnn(channels: usize, side: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::TinyCnn { channels: [16, 32] },
            input_shape: vec![channels, side, side],
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 classes, got {}", self.classes)));
        }
        match &self.kind {
            ModelKind::Mlp { hidden } => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(Error::InvalidSpec(format!(
                        "mlp input shape must be [d] with d > 0, got {:?}",
                        self.input_shape
                    )));
                }
                if hidden.contains(&0) {
                    return Err(Error::InvalidSpec("mlp hidden widths must be positive".into()));
                }
            }
            ModelKind::TinyCnn { channels } => {
                let s = &self.input_shape;
                if s.len() != 3 || s[0] == 0 || s[1] != s[2] || s[1] < 8 {
                    return Err(Error::InvalidSpec(format!(
                        "tiny_cnn input must be square [C, S, S] with S >= 8, got {s:?}"
                    )));
                }
                if channels.contains(&0) {
                    return Err(Error::InvalidSpec("tiny_cnn channel counts must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Width of the representation feeding the final dense layer.
    pub fn feature_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Mlp { hidden } => hidden.last().copied().unwrap_or(self.input_shape[0]),
            ModelKind::TinyCnn { channels } => {
                let side = self.input_shape[1] / 2 / 2;
                channels[1] * side * side
            }
        }
    }

    /// `(name, shape)` of every parameter in ParamSet order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match &self.kind {
            ModelKind::Mlp { hidden } => {
                let mut prev = self.input_shape[0];
                for (i, &h) in hidden.iter().enumerate() {
                    out.push((format!("fc{i}.weight"), vec![prev, h]));
                    out.push((format!("fc{i}.bias"), vec![h]));
                    prev = h;
                }
            }
            ModelKind::TinyCnn { channels } => {
                let c = self.input_shape[0];
                out.push(("conv1.weight".into(), vec![channels[0], c, KERNEL, KERNEL]));
                out.push(("conv1.bias".into(), vec![channels[0]]));
                out.push(("conv2.weight".into(), vec![channels[1], channels[0], KERNEL, KERNEL]));
                out.push(("conv2.bias".into(), vec![channels[1]]));
            }
        }
        out.push(("head.weight".into(), vec![self.feature_dim(), self.classes]));
        out.push(("head.bias".into(), vec![self.classes]));
        out
    }

    fn check_params<T: Scalar>(&self, g: &Graph<T>, params: &[Var]) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::ShapeMismatch {
                name: "parameter list".into(),
                expected: vec![shapes.len()],
                actual: vec![params.len()],
            });
        }
        for ((name, shape), &v) in shapes.iter().zip(params) {
            g.value(v).expect_shape(name, shape)?;
        }
        Ok(())
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.rows()];
            expected.extend(&self.input_shape);
            return Err(Error::ShapeMismatch {
                name: "inputs".into(),
                expected,
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Builds the forward pass up to (not including) the final dense layer;
    /// returns a `[B, feature_dim]` handle.
    pub fn forward_features<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Var> {
        self.check_params(g, params)?;
        self.check_input(g.value(input))?;
        match &self.kind {
            ModelKind::Mlp { hidden } => {
                let mut h = input;
                for i in 0..hidden.len() {
                    let z = g.matmul(h, params[2 * i])?;
                    let z = g.add_bias(z, params[2 * i + 1])?;
                    h = g.relu(z);
                }
                Ok(h)
            }
            ModelKind::TinyCnn { .. } => {
                let z = g.conv2d(input, params[0], params[1])?;
                let z = g.relu(z);
                let z = g.max_pool2(z)?;
                let z = g.conv2d(z, params[2], params[3])?;
                let z = g.relu(z);
                let z = g.max_pool2(z)?;
                g.flatten(z)
            }
        }
    }
}

impl<T: Scalar> Network<T> for ModelSpec {
    fn forward(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Var> {
        let h = self.forward_features(g, params, input)?;
        let n = params.len();
        let z = g.matmul(h, params[n - 2])?;
        g.add_bias(z, params[n - 1])
    }
}

/// Deterministic initialization: weights uniform in `±sqrt(6 / fan_in)`,
/// biases zero.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ParamSet<f32>> {
    spec.validate()?;
    let mut rng = rng::stream(seed, rng::tag::INIT);
    let mut out = Vec::new();
    for (name, shape) in spec.param_shapes() {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[0]
            };
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape, data)?
        };
        out.push((name, t));
    }
    ParamSet::new(out)
}

/// Zero-valued parameters shaped for `spec`.
pub fn zero_model(spec: &ModelSpec) -> Result<ParamSet<f32>> {
    spec.validate()?;
    ParamSet::new(
        spec.param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect(),
    )
}

fn constant_params<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>) -> Vec<Var> {
    params.iter().map(|p| g.constant(p.value.clone())).collect()
}

/// Logits `[B, K]` for a batch. Pure.
pub fn forward_logits<T: Scalar>(spec: &ModelSpec, params: &ParamSet<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = constant_params(&mut g, params);
    let x = g.constant(inputs.clone());
    let z = spec.forward(&mut g, &p, x)?;
    Ok(g.value(z).clone())
}

/// Penultimate representation `[B, F]` (the final layer's input).
pub fn penultimate_features<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    inputs: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = constant_params(&mut g, params);
    let x = g.constant(inputs.clone());
    let h = spec.forward_features(&mut g, &p, x)?;
    Ok(g.value(h).clone())
}

/// Argmax with ties resolved toward the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn predict_from_logits<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

pub fn predict<T: Scalar>(spec: &ModelSpec, params: &ParamSet<T>, inputs: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(predict_from_logits(&forward_logits(spec, params, inputs)?))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVPCKPT";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Checkpoint layout (all integers u32 LE):
/// magic `ADVPCKPT`, version, kind (0 = mlp, 1 = tiny_cnn), classes,
/// input rank + dims, layer-width count + widths, parameter count, then per
/// parameter: name length + UTF-8 name, rank + dims, f32 LE values.
pub fn write_checkpoint(w: &mut impl Write, spec: &ModelSpec, params: &ParamSet<f32>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION as usize)?;
    let widths: Vec<usize> = match &spec.kind {
        ModelKind::Mlp { hidden } => {
            put_u32(w, 0)?;
            hidden.clone()
        }
        ModelKind::TinyCnn { channels } => {
            put_u32(w, 1)?;
            channels.to_vec()
        }
    };
    put_u32(w, spec.classes)?;
    put_u32(w, spec.input_shape.len())?;
    for &d in &spec.input_shape {
        put_u32(w, d)?;
    }
    put_u32(w, widths.len())?;
    for &d in &widths {
        put_u32(w, d)?;
    }
    put_u32(w, params.len())?;
    for p in params.iter() {
        put_u32(w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(w, d)?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(ModelSpec, ParamSet<f32>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = get_u32(r)?;
    let classes = get_u32(r)?;
    let rank = get_u32(r)?;
    let input_shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let nw = get_u32(r)?;
    let widths = (0..nw).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let kind = match kind {
        0 => ModelKind::Mlp { hidden: widths },
        1 if widths.len() == 2 => ModelKind::TinyCnn {
            channels: [widths[0], widths[1]],
        },
        other => return Err(Error::Checkpoint(format!("unknown model kind {other}"))),
    };
    let spec = ModelSpec { kind, input_shape, classes };
    spec.validate()?;
    let count = get_u32(r)?;
    let expected = spec.param_shapes();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {count}",
            expected.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (ename, eshape) in expected {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        if name != ename || shape != eshape {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` {shape:?} does not match expected `{ename}` {eshape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok((spec, ParamSet::new(params)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mlp_parameter_count() {
        let spec = ModelSpec::default_mlp(2, 2);
        let p = init_model(&spec, 0).unwrap();
        assert_eq!(p.scalar_count(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2);
        assert_eq!(p.scalar_count(), 4482);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = ModelSpec::default_mlp(2, 3);
        assert_eq!(init_model(&spec, 5).unwrap(), init_model(&spec, 5).unwrap());
        assert_ne!(init_model(&spec, 5).unwrap(), init_model(&spec, 6).unwrap());
    }

    #[test]
    fn init_uses_fan_in_bounds_and_zero_bias() {
        let spec = ModelSpec::tiny_cnn(1, 8, 4);
        let p = init_model(&spec, 1).unwrap();
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(p.get("conv1.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(p.get("conv2.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ModelSpec::mlp(2, vec![8], 1).validate().is_err());
        assert!(ModelSpec::tiny_cnn(1, 6, 2).validate().is_err());
        let rect = ModelSpec {
            kind: ModelKind::TinyCnn { channels: [4, 4] },
            input_shape: vec![1, 8, 10],
            classes: 2,
        };
        assert!(init_model(&rect, 0).is_err());
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let spec = ModelSpec::default_mlp(2, 3);
        let p = zero_model(&spec).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.5, 0.5]).unwrap();
        let z = forward_logits(&spec, &p, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(predict(&spec, &p, &x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn argmax_tie_break_and_order() {
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0f32, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }

    #[test]
    fn wrong_input_shape_names_inputs() {
        let spec = ModelSpec::default_mlp(2, 2);
        let p = init_model(&spec, 0).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        match forward_logits(&spec, &p, &x) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "inputs"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for spec in [ModelSpec::mlp(2, vec![5, 3], 3), ModelSpec::tiny_cnn(2, 8, 4)] {
            let p = init_model(&spec, 9).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &spec, &p).unwrap();
            let (s2, p2) = read_checkpoint(&mut buf.as_slice()).unwrap();
            assert_eq!(s2, spec);
            assert_eq!(p2, p);
            assert!(read_checkpoint(&mut &buf[..buf.len() - 1]).is_err());
        }
    }
}
