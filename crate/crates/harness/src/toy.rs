//! Synthetic datasets.
//!
//! The 2-D sets have balanced classes (example `i` has class `i mod K`) and
//! features in `[0, 1]²`. `stripes` produces 1×8×8 images of horizontal or
//! vertical stripes for the CNN.

use std::f32::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use advprune_core::data::Dataset;
use advprune_core::diffcore::Tensor;
use advprune_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::save_dataset;
use crate::error::{HarnessError, Result};

const TOY_TAG: u64 = 0x2002;
pub const STRIPES_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    TwoGaussians,
    Spiral,
    Checkerboard,
    Stripes,
}

impl ToyKind {
    pub const ALL: [ToyKind; 4] = [Self::TwoGaussians, Self::Spiral, Self::Checkerboard, Self::Stripes];
}

impl FromStr for ToyKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "two_gaussians" => Ok(Self::TwoGaussians),
            "spiral" => Ok(Self::Spiral),
            "checkerboard" => Ok(Self::Checkerboard),
            "stripes" => Ok(Self::Stripes),
            other => Err(HarnessError::config("kind", format!("unknown toy dataset `{other}`"))),
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoGaussians => "two_gaussians",
            Self::Spiral => "spiral",
            Self::Checkerboard => "checkerboard",
            Self::Stripes => "stripes",
        })
    }
}

fn gauss(r: &mut impl Rng) -> f32 {
    r.sample(StandardNormal)
}

/// Two discs of radius 0.18 around (0.3, 0.3) and (0.7, 0.7), plus
/// Gaussian jitter of std `noise`.
fn two_gaussians(i: usize, noise: f32, r: &mut impl Rng) -> ([f32; 2], usize) {
    let c = i % 2;
    let centre = if c == 0 { 0.3 } else { 0.7 };
    let rad = 0.18 * r.gen::<f32>().sqrt();
    let th = r.gen_range(0.0..2.0 * PI);
    (
        [centre + rad * th.cos() + noise * gauss(r), centre + rad * th.sin() + noise * gauss(r)],
        c,
    )
}

/// Two interleaved arms, one and a half turns each.
fn spiral(i: usize, noise: f32, r: &mut impl Rng) -> ([f32; 2], usize) {
    let c = i % 2;
    let t: f32 = r.gen_range(0.15..1.0);
    let th = 3.0 * PI * t + c as f32 * PI;
    let rad = 0.45 * t;
    (
        [0.5 + rad * th.cos() + noise * gauss(r), 0.5 + rad * th.sin() + noise * gauss(r)],
        c,
    )
}

/// 2×2 board; points are drawn until they land on a cell of the wanted class.
fn checkerboard(i: usize, noise: f32, r: &mut impl Rng) -> ([f32; 2], usize) {
    let c = i % 2;
    loop {
        let (x, y): (f32, f32) = (r.gen(), r.gen());
        let cell = (x * 2.0).min(1.0) as usize + (y * 2.0).min(1.0) as usize;
        if cell % 2 == c {
            return ([x + noise * gauss(r), y + noise * gauss(r)], c);
        }
    }
}

fn stripes(i: usize, noise: f32, r: &mut impl Rng, out: &mut Vec<f32>) -> usize {
    let c = i % 2;
    let period = r.gen_range(2..=4usize);
    let phase = r.gen_range(0..period);
    let (lo, hi) = (r.gen_range(0.1f32..0.35), r.gen_range(0.65f32..0.9));
    for row in 0..STRIPES_SIDE {
        for col in 0..STRIPES_SIDE {
            let k = if c == 0 { row } else { col };
            let on = (k + phase) % period < period.div_ceil(2);
            let v = if on { hi } else { lo } + noise * gauss(r);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    c
}

/// Generates `n` examples. `noise` is the std of additive Gaussian jitter.
pub fn generate_toy(kind: ToyKind, n: usize, noise: f32, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(HarnessError::config("n", format!("need at least 10 examples, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(HarnessError::config("noise", format!("must be >= 0, got {noise}")));
    }
    let mut r = rng::stream(seed, TOY_TAG);
    let mut features = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = match kind {
            ToyKind::Stripes => stripes(i, noise, &mut r, &mut features),
            _ => {
                let (p, y) = match kind {
                    ToyKind::TwoGaussians => two_gaussians(i, noise, &mut r),
                    ToyKind::Spiral => spiral(i, noise, &mut r),
                    _ => checkerboard(i, noise, &mut r),
                };
                features.extend(p.map(|v| v.clamp(0.0, 1.0)));
                y
            }
        };
        labels.push(y);
    }
    let shape = match kind {
        ToyKind::Stripes => vec![n, 1, STRIPES_SIDE, STRIPES_SIDE],
        _ => vec![n, 2],
    };
    Ok(Dataset::new(Tensor::new(shape, features)?, labels, 2)?)
}

/// Generates a toy dataset and writes it to `path`.
pub fn generate_toy_dataset(kind: ToyKind, n: usize, noise: f32, seed: u64, path: &Path) -> Result<Dataset> {
    let data = generate_toy(kind, n, noise, seed)?;
    save_dataset(path, &data)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_in_range() {
        for kind in ToyKind::ALL {
            let d = generate_toy(kind, 1000, 0.05, 1).unwrap();
            assert_eq!(d.class_counts(), vec![500, 500], "{kind}");
            assert!(d.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in ToyKind::ALL {
            assert_eq!(kind.to_string().parse::<ToyKind>().unwrap(), kind);
        }
        assert!("moons".parse::<ToyKind>().is_err());
        assert!(generate_toy(ToyKind::Spiral, 9, 0.0, 0).is_err());
    }

    #[test]
    fn stripes_have_the_labelled_orientation() {
        let d = generate_toy(ToyKind::Stripes, 20, 0.0, 3).unwrap();
        for i in 0..20 {
            let img = d.features.row(i);
            // constant along the stripe direction
            let along = |a: usize, b: usize| if d.labels[i] == 0 { img[a * 8 + b] } else { img[b * 8 + a] };
            for a in 0..8 {
                assert!((0..8).all(|b| along(a, b) == along(a, 0)));
            }
        }
    }
}
