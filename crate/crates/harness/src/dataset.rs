//! Binary dataset files.
//!
//! Layout, all little-endian:
//!
//! | field      | type              |
//! |------------|-------------------|
//! | magic      | `b"ADVPDS01"`     |
//! | n          | u32               |
//! | classes    | u32               |
//! | rank       | u32               |
//! | dims       | `rank` × u32      |
//! | features   | `n·Πdims` × f32   |
//! | labels     | `n` × i32         |
//!
//! Features are row-major and lie in `[0, 1]`.

use std::fs;
use std::path::Path;

use advprune_core::data::Dataset;
use advprune_core::diffcore::Tensor;
use advprune_core::rng;
use rand::seq::SliceRandom;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"ADVPDS01";
const SPLIT_TAG: u64 = 0x2001;

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let dims = data.feature_shape();
    let mut out = Vec::with_capacity(20 + 4 * dims.len() + 4 * data.features.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    for v in [data.len(), data.classes, dims.len()].into_iter().chain(dims.iter().copied()) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in data.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &data.labels {
        out.extend_from_slice(&(y as i32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Option<usize> {
        let b = self.bytes.get(self.pos..self.pos + 4)?;
        self.pos += 4;
        Some(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Parses a dataset file image. `name` only labels errors.
pub fn decode_dataset(bytes: &[u8], name: &str) -> Result<Dataset> {
    let bad = |reason: &str| HarnessError::BadHeader {
        source_name: name.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing ADVPDS01 magic"));
    }
    let mut c = Cursor { bytes, pos: MAGIC.len() };
    let (n, classes, rank) = match (c.u32(), c.u32(), c.u32()) {
        (Some(n), Some(k), Some(r)) => (n, k, r),
        _ => return Err(bad("header ends early")),
    };
    if n == 0 {
        return Err(bad("n must be > 0"));
    }
    if classes < 2 {
        return Err(bad("need at least 2 classes"));
    }
    if rank == 0 || rank > 3 {
        return Err(bad("feature rank must be 1, 2 or 3"));
    }
    let dims = (0..rank).map(|_| c.u32()).collect::<Option<Vec<_>>>().ok_or_else(|| bad("header ends early"))?;
    if dims.contains(&0) {
        return Err(bad("feature dimensions must be > 0"));
    }
    let row: usize = dims.iter().product();
    let expected = n
        .checked_mul(row)
        .and_then(|v| v.checked_add(n))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| bad("payload size overflows"))?;
    let payload = &bytes[c.pos..];
    if payload.len() < expected {
        return Err(HarnessError::Truncated {
            source_name: name.to_string(),
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(HarnessError::TrailingBytes {
            source_name: name.to_string(),
            extra: payload.len() - expected,
        });
    }
    let (feat_bytes, label_bytes) = payload.split_at(4 * n * row);
    let features: Vec<f32> = feat_bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    if let Some(i) = features.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(HarnessError::FeatureOutOfRange {
            source_name: name.to_string(),
            row: i / row,
            value: features[i],
        });
    }
    let mut labels = Vec::with_capacity(n);
    for (row, b) in label_bytes.chunks_exact(4).enumerate() {
        let y = i32::from_le_bytes(b.try_into().unwrap());
        if y < 0 || y as usize >= classes {
            return Err(HarnessError::LabelOutOfRange {
                source_name: name.to_string(),
                row,
                label: y as i64,
                classes,
            });
        }
        labels.push(y as usize);
    }
    let mut shape = vec![n];
    shape.extend(dims);
    Ok(Dataset::new(Tensor::new(shape, features)?, labels, classes)?)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_dataset(data))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes, &path.display().to_string())
}

/// Shuffles with `seed`, then puts the first `round(val_fraction·n)`
/// examples in the validation set. Both parts keep the shuffled order.
pub fn split_train_val(data: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(HarnessError::config("val_fraction", format!("must be in [0, 1), got {val_fraction}")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, SPLIT_TAG));
    let n_val = (val_fraction * data.len() as f64).round() as usize;
    let (val, train) = order.split_at(n_val);
    Ok((data.subset(train), data.subset(val)))
}
