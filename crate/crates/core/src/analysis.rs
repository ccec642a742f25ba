//! Class compactness/separation of pair features (the R² index) and 2-D
//! projections for plotting.
//!
//! With cosine distance `d(a, b) = 1 − sim(a, b)` and classes `k = 1..K` of
//! sizes `M_k`:
//!
//! ```text
//! d_within = Σ_k Σ_{i,j ∈ k} d(p_i, p_j) / (K · M_k²)
//! d_total  = Σ_h Σ_k Σ_{i ∈ h, j ∈ k} d(p_i, p_j) / (K² · M_h · M_k)
//! R²       = 1 − d_within / d_total
//! ```
//!
//! Self-pairs `i = j` are part of the sums.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, PairBatch};
use crate::numeric::{dot, Matrix};

const DEGENERATE_TOTAL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    features: Matrix,
    class_of: Vec<i32>,
}

impl LabeledFeatureSet {
    pub fn new(features: Matrix, class_of: Vec<i32>) -> Result<Self> {
        if features.rows() != class_of.len() {
            return Err(Error::invalid(format!(
                "{} rows but {} labels",
                features.rows(),
                class_of.len()
            )));
        }
        if features.rows() == 0 {
            return Err(Error::invalid("empty feature set"));
        }
        if let Some(r) = features.row_iter().position(|row| dot(row, row) == 0.0) {
            return Err(Error::DegenerateVector(format!("feature row {r} has zero norm")));
        }
        Ok(Self { features, class_of })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn class_of(&self) -> &[i32] {
        &self.class_of
    }

    fn groups(&self) -> Vec<Vec<usize>> {
        let mut g: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.class_of.iter().enumerate() {
            g.entry(c).or_default().push(i);
        }
        g.into_values().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub r2: f64,
    pub d_within: f64,
    pub d_total: f64,
    /// Mean within-class cosine distance per class, classes in ascending label order.
    pub per_class_within: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum R2Method {
    /// Quadratic pairwise evaluation.
    #[default]
    Direct,
    /// `O(M·d)` evaluation through class means of unit vectors.
    MeanDirection,
}

pub fn r2_index(set: &LabeledFeatureSet) -> Result<SeparationReport> {
    r2_index_with(set, R2Method::Direct)
}

pub fn r2_index_with(set: &LabeledFeatureSet, method: R2Method) -> Result<SeparationReport> {
    let groups = set.groups();
    if groups.len() < 2 {
        return Err(Error::invalid("R² needs at least 2 classes"));
    }
    let k = groups.len();
    // block[h][k] = mean cosine distance between class h and class k
    let block = match method {
        R2Method::Direct => direct_blocks(set, &groups),
        R2Method::MeanDirection => mean_direction_blocks(set, &groups),
    };
    let per_class_within: Vec<f64> = (0..k).map(|c| block[c][c]).collect();
    let d_within = per_class_within.iter().sum::<f64>() / k as f64;
    let d_total = block.iter().flatten().sum::<f64>() / (k * k) as f64;
    if d_total <= DEGENERATE_TOTAL {
        return Err(Error::DegenerateGeometry(format!(
            "total cosine spread is {d_total:e}; all features share one direction"
        )));
    }
    Ok(SeparationReport {
        r2: 1.0 - d_within / d_total,
        d_within,
        d_total,
        per_class_within,
    })
}

fn direct_blocks(set: &LabeledFeatureSet, groups: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let f = set.features();
    let sq: Vec<f64> = f.row_iter().map(|r| dot(r, r)).collect();
    let sim = |i: usize, j: usize| (dot(f.row(i), f.row(j)) / (sq[i] * sq[j]).sqrt()).clamp(-1.0, 1.0);
    let k = groups.len();
    let mut block = vec![vec![0.0; k]; k];
    for h in 0..k {
        for c in h..k {
            let mut s = 0.0;
            for &i in &groups[h] {
                for &j in &groups[c] {
                    s += 1.0 - sim(i, j);
                }
            }
            let mean = s / (groups[h].len() * groups[c].len()) as f64;
            block[h][c] = mean;
            block[c][h] = mean;
        }
    }
    block
}

fn mean_direction_blocks(set: &LabeledFeatureSet, groups: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let f = set.features();
    let d = f.cols();
    let means: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut m = vec![0.0; d];
            for &i in g {
                let row = f.row(i);
                let len = dot(row, row).sqrt();
                for (mv, v) in m.iter_mut().zip(row) {
                    *mv += v / len;
                }
            }
            m.iter_mut().for_each(|v| *v /= g.len() as f64);
            m
        })
        .collect();
    let k = groups.len();
    let mut block = vec![vec![0.0; k]; k];
    for h in 0..k {
        for c in 0..k {
            block[h][c] = 1.0 - dot(&means[h], &means[c]);
        }
    }
    block
}

/// Pair features for every pair in `pairs`, labelled 1 (same) / 0 (different).
///
/// Pairs whose feature vector is exactly zero (all head units inactive) have no
/// cosine geometry and are left out; the second value counts them.
pub fn pair_feature_set(params: &ModelParams, pairs: &PairBatch) -> Result<(LabeledFeatureSet, usize)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for m in 0..pairs.len() {
        let out = params.forward_pair(pairs.left.row(m), pairs.right.row(m))?;
        if out.features.iter().all(|&v| v == 0.0) {
            dropped += 1;
            continue;
        }
        rows.extend(out.features);
        labels.push(i32::from(pairs.targets[m].is_same()));
    }
    let n = labels.len();
    if labels.iter().all(|&l| l == 1) || labels.iter().all(|&l| l == 0) {
        return Err(Error::DegenerateGeometry(format!(
            "pair features of {dropped} pairs are zero or only one pair label has nonzero features"
        )));
    }
    let set = LabeledFeatureSet::new(Matrix::from_vec(n, params.architecture().pair_dim(), rows)?, labels)?;
    Ok((set, dropped))
}

/// R² of the same/different clusters in pair-feature space.
pub fn r2_of_pairs(params: &ModelParams, eval_pairs: &PairBatch) -> Result<SeparationReport> {
    if eval_pairs.n_same() == 0 || eval_pairs.n_same() == eval_pairs.len() {
        return Err(Error::invalid("R² of pairs needs both same and different pairs"));
    }
    let (set, _) = pair_feature_set(params, eval_pairs)?;
    r2_index(&set)
}

const POWER_MAX_ITERS: usize = 20_000;
const POWER_TOL: f64 = 1e-13;

/// Projects rows onto the top two principal directions of the centered data.
///
/// Power iteration starts from `v_i ∝ 1 + i` for the first axis and
/// `v_i ∝ (−1)^i (1 + i)` (orthogonalized) for the second. Each axis is signed
/// so that its largest-magnitude component is positive.
pub fn project_2d(set: &LabeledFeatureSet) -> Result<Matrix> {
    let f = set.features();
    let (n, d) = (f.rows(), f.cols());
    if d < 2 {
        return Err(Error::invalid("projection needs feature dimension ≥ 2"));
    }
    let mut mean = vec![0.0; d];
    for row in f.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for row in f.row_iter() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            for b in 0..d {
                cov.set(a, b, cov.get(a, b) + c[a] * c[b] / n as f64);
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    if trace <= 0.0 {
        return Err(Error::DegenerateGeometry("all points are identical".into()));
    }
    let start1: Vec<f64> = (0..d).map(|i| 1.0 + i as f64).collect();
    let v1 = power_iteration(&cov, start1, &[]);
    let start2: Vec<f64> = (0..d)
        .map(|i| if i % 2 == 0 { 1.0 + i as f64 } else { -(1.0 + i as f64) })
        .collect();
    let v2 = power_iteration(&cov, start2, &[&v1]);

    let mut out = Matrix::zeros(n, 2);
    for (r, row) in f.row_iter().enumerate() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        out.set(r, 0, dot(&c, &v1));
        out.set(r, 1, dot(&c, &v2));
    }
    Ok(out)
}

fn orthogonalize(v: &mut [f64], against: &[&Vec<f64>]) {
    for u in against {
        let p = dot(v, u);
        v.iter_mut().zip(u.iter()).for_each(|(x, y)| *x -= p * y);
    }
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let len = dot(&v, &v).sqrt();
    if len < 1e-300 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= len);
    Some(v)
}

fn power_iteration(cov: &Matrix, start: Vec<f64>, against: &[&Vec<f64>]) -> Vec<f64> {
    let mut v = start;
    orthogonalize(&mut v, against);
    let mut v = normalized(v).expect("start vector is not in the span of earlier axes");
    for _ in 0..POWER_MAX_ITERS {
        let mut next = cov.matvec(&v).expect("square covariance");
        orthogonalize(&mut next, against);
        let Some(next) = normalized(next) else {
            // Null direction: the remaining variance is zero; any orthogonal axis will do.
            break;
        };
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    let lead = v
        .iter()
        .copied()
        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}
