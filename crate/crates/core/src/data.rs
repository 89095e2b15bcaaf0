use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// In-memory labelled dataset. `features` is `[n, ...feature_shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().is_empty() || features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                name: "labels".into(),
                expected: vec![features.rows()],
                actual: vec![labels.len()],
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::LabelOutOfRange { row, label, classes });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Features and labels of the given rows, in order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (features, labels) = self.batch(indices);
        Self {
            features,
            labels,
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}
