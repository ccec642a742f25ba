use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Feature vectors with integer class labels and optional per-sample OOD flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    features: Matrix,
    labels: Vec<i32>,
    ood_flags: Option<Vec<bool>>,
}

impl EmbeddingSet {
    pub fn new(features: Matrix, labels: Vec<i32>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            ood_flags: None,
        })
    }

    pub fn with_ood_flags(mut self, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} ood flags for {} samples",
                flags.len(),
                self.labels.len()
            )));
        }
        self.ood_flags = Some(flags);
        Ok(self)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn ood_flags(&self) -> Option<&[bool]> {
        self.ood_flags.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Distinct labels in ascending order.
    pub fn class_ids(&self) -> Vec<i32> {
        self.by_class().into_keys().collect()
    }

    /// Row indices grouped by label, labels ascending, indices in file order.
    pub fn by_class(&self) -> BTreeMap<i32, Vec<usize>> {
        let mut groups: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            groups.entry(y).or_default().push(i);
        }
        groups
    }

    pub fn subset(&self, indices: &[usize]) -> EmbeddingSet {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        EmbeddingSet {
            features: Matrix::from_vec(indices.len(), dim, data).expect("rows of a valid matrix"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ood_flags: self
                .ood_flags
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i]).collect()),
        }
    }

    /// Splits every class into a leading part and a trailing `fraction` holdout.
    /// Classes with fewer than four samples stay entirely in the leading part.
    pub fn split_holdout(&self, fraction: f64) -> (EmbeddingSet, EmbeddingSet) {
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for idx in self.by_class().values() {
            let n_held = if idx.len() >= 4 {
                ((idx.len() as f64 * fraction).round() as usize).clamp(2, idx.len() - 2)
            } else {
                0
            };
            let cut = idx.len() - n_held;
            keep.extend_from_slice(&idx[..cut]);
            held.extend_from_slice(&idx[cut..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        (self.subset(&keep), self.subset(&held))
    }

    /// Applies `f` to every feature row, producing a new set with the same labels.
    pub fn map_rows<F>(&self, out_dim: usize, mut f: F) -> Result<EmbeddingSet>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut data = Vec::with_capacity(self.len() * out_dim);
        for row in self.features.row_iter() {
            let mapped = f(row)?;
            if mapped.len() != out_dim {
                return Err(Error::invalid(format!(
                    "row map produced length {} (expected {out_dim})",
                    mapped.len()
                )));
            }
            data.extend(mapped);
        }
        Ok(EmbeddingSet {
            features: Matrix::from_vec(self.len(), out_dim, data)?,
            labels: self.labels.clone(),
            ood_flags: self.ood_flags.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EmbeddingSet {
        let m = Matrix::from_vec(6, 1, (0..6).map(f64::from).collect()).unwrap();
        EmbeddingSet::new(m, vec![2, 1, 2, 1, 2, 2]).unwrap()
    }

    #[test]
    fn groups_sorted_by_label() {
        let s = toy();
        assert_eq!(s.class_ids(), vec![1, 2]);
        assert_eq!(s.by_class()[&2], vec![0, 2, 4, 5]);
    }

    #[test]
    fn holdout_keeps_small_classes() {
        let (train, held) = toy().split_holdout(0.5);
        assert_eq!(train.labels(), &[2, 1, 2, 1]);
        assert_eq!(held.labels(), &[2, 2]);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let m = Matrix::zeros(2, 3);
        assert!(EmbeddingSet::new(m.clone(), vec![0]).is_err());
        let s = EmbeddingSet::new(m, vec![0, 1]).unwrap();
        assert!(s.with_ood_flags(vec![true]).is_err());
    }
}
