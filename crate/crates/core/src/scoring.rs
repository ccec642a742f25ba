//! Fine-tuning-free normality scorers over encoder embeddings.
//!
//! All scores follow "higher = more in-distribution":
//!
//! - prototype MSP: softmax over relational similarities to per-class mean
//!   embeddings, maximum probability;
//! - k-NN: negative distance to the k-th nearest support embedding;
//! - Mahalanobis: negative squared distance to the nearest class mean under a
//!   shared, ridge-regularized covariance.
//!
//! Each scorer counts the comparisons it performs so the reported per-sample
//! cost can be checked against what actually ran.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{ModelParams, SimilarityReadout};
use crate::numeric::{dot, softmax_unchecked, squared_distance, Cholesky, Matrix};

pub const DEFAULT_TPR_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    ProtoMsp,
    Knn,
    Mahalanobis,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 3] = [ScorerKind::ProtoMsp, ScorerKind::Knn, ScorerKind::Mahalanobis];

    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::ProtoMsp => "proto-msp",
            ScorerKind::Knn => "knn",
            ScorerKind::Mahalanobis => "mahalanobis",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proto-msp" => Ok(ScorerKind::ProtoMsp),
            "knn" => Ok(ScorerKind::Knn),
            "mahalanobis" => Ok(ScorerKind::Mahalanobis),
            other => Err(Error::invalid(format!("unknown scorer {other:?}"))),
        }
    }
}

/// Comparisons per test sample: one per class for prototype and Mahalanobis
/// scorers, one per support sample for k-NN.
pub fn count_comparisons(kind: ScorerKind, support: &EmbeddingSet) -> Result<usize> {
    if support.is_empty() {
        return Err(Error::invalid("empty support set"));
    }
    Ok(match kind {
        ScorerKind::ProtoMsp | ScorerKind::Mahalanobis => support.class_ids().len(),
        ScorerKind::Knn => support.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub class_ids: Vec<i32>,
    /// One row per class, in `class_ids` order.
    pub prototypes: Matrix,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Per-class means of already-encoded support embeddings, ascending class id.
pub fn prototypes_from_embeddings(embedded: &EmbeddingSet) -> Result<PrototypeSet> {
    let groups = embedded.by_class();
    if groups.is_empty() {
        return Err(Error::Data("support set has no classes".into()));
    }
    let d = embedded.dim();
    let mut data = Vec::with_capacity(groups.len() * d);
    for idx in groups.values() {
        let mut mean = vec![0.0; d];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(embedded.sample(i)) {
                *m += v;
            }
        }
        data.extend(mean.into_iter().map(|m| m / idx.len() as f64));
    }
    Ok(PrototypeSet {
        class_ids: groups.keys().copied().collect(),
        prototypes: Matrix::from_vec(groups.len(), d, data)?,
    })
}

/// Encodes `support` and averages each class in embedding space.
pub fn build_prototypes(params: &ModelParams, support: &EmbeddingSet) -> Result<PrototypeSet> {
    prototypes_from_embeddings(&params.encode_set(support)?)
}

/// Maximum softmax probability of a logit vector.
pub fn msp(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::DegenerateGeometry("MSP needs at least 2 logits".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(softmax_unchecked(logits).into_iter().fold(0.0, f64::max))
}

pub struct ProtoMspScorer<'a> {
    params: &'a ModelParams,
    protos: &'a PrototypeSet,
    readout: SimilarityReadout,
    comparisons: AtomicU64,
}

impl<'a> ProtoMspScorer<'a> {
    pub fn new(params: &'a ModelParams, protos: &'a PrototypeSet, readout: SimilarityReadout) -> Result<Self> {
        if protos.len() < 2 {
            return Err(Error::DegenerateGeometry("prototype MSP needs at least 2 prototypes".into()));
        }
        Ok(Self {
            params,
            protos,
            readout,
            comparisons: AtomicU64::new(0),
        })
    }

    /// Relational similarity of `z` to every prototype.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        let logits = self
            .protos
            .prototypes
            .row_iter()
            .map(|p| {
                self.comparisons.fetch_add(1, Ordering::Relaxed);
                self.params.score_pair(z, p).map(|o| self.readout.read(&o.score))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(logits)
    }

    pub fn score(&self, z: &[f64]) -> Result<f64> {
        msp(&self.logits(z)?)
    }

    pub fn comparisons(&self) -> u64 {
        self.comparisons.load(Ordering::Relaxed)
    }
}

/// Prototype MSP for a raw test input.
pub fn proto_msp_score(
    params: &ModelParams,
    protos: &PrototypeSet,
    x_test: &[f64],
    readout: SimilarityReadout,
) -> Result<f64> {
    ProtoMspScorer::new(params, protos, readout)?.score(&params.encode(x_test)?)
}

pub struct KnnScorer {
    support: Matrix,
    k: usize,
    normalize: bool,
    comparisons: AtomicU64,
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let len = dot(v, v).sqrt();
    if len == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / len).collect()
    }
}

impl KnnScorer {
    pub fn new(support_embeddings: &Matrix, k: usize, normalize: bool) -> Result<Self> {
        if k == 0 || k > support_embeddings.rows() {
            return Err(Error::invalid(format!(
                "k = {k} must lie in 1..={}",
                support_embeddings.rows()
            )));
        }
        let support = if normalize {
            let data = support_embeddings.row_iter().flat_map(l2_normalized).collect();
            Matrix::from_vec(support_embeddings.rows(), support_embeddings.cols(), data)?
        } else {
            support_embeddings.clone()
        };
        Ok(Self {
            support,
            k,
            normalize,
            comparisons: AtomicU64::new(0),
        })
    }

    pub fn score(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.support.cols() {
            return Err(Error::invalid("query dimension does not match support"));
        }
        let q = if self.normalize { l2_normalized(z) } else { z.to_vec() };
        let mut dists: Vec<f64> = self.support.row_iter().map(|s| squared_distance(s, &q)).collect();
        self.comparisons.fetch_add(dists.len() as u64, Ordering::Relaxed);
        let (_, kth, _) = dists.select_nth_unstable_by(self.k - 1, f64::total_cmp);
        Ok(-kth.sqrt())
    }

    pub fn comparisons(&self) -> u64 {
        self.comparisons.load(Ordering::Relaxed)
    }
}

/// Negative distance from `z_test` to its k-th nearest support embedding.
pub fn knn_score(support_embeddings: &Matrix, z_test: &[f64], k: usize, normalize: bool) -> Result<f64> {
    KnnScorer::new(support_embeddings, k, normalize)?.score(z_test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub class_ids: Vec<i32>,
    pub class_means: Matrix,
    /// Regularized shared covariance.
    pub shared_covariance: Matrix,
    pub epsilon: f64,
    factor: Cholesky,
}

impl GaussianFit {
    /// Builds a fit from explicit parts; `covariance` must be positive definite.
    pub fn from_parts(class_ids: Vec<i32>, class_means: Matrix, covariance: Matrix, epsilon: f64) -> Result<Self> {
        if class_means.cols() != covariance.rows() || class_ids.len() != class_means.rows() {
            return Err(Error::invalid("inconsistent Gaussian fit shapes"));
        }
        let factor = Cholesky::factor(&covariance)?;
        Ok(Self {
            class_ids,
            class_means,
            shared_covariance: covariance,
            epsilon,
            factor,
        })
    }
}

/// Class means and pooled within-class covariance `scatter / (N − K)`, plus a
/// ridge `ε·I` with `ε = epsilon_scale · trace(Σ) / D`.
pub fn mahalanobis_fit_embeddings(embedded: &EmbeddingSet, epsilon_scale: f64) -> Result<GaussianFit> {
    if !(epsilon_scale >= 0.0) || !epsilon_scale.is_finite() {
        return Err(Error::invalid("epsilon_scale must be ≥ 0"));
    }
    let groups = embedded.by_class();
    let (n, k, d) = (embedded.len(), groups.len(), embedded.dim());
    if n < 2 {
        return Err(Error::Fit("need at least 2 samples".into()));
    }
    if n <= k {
        return Err(Error::Fit(format!("{n} samples for {k} classes leaves no degrees of freedom")));
    }
    let protos = prototypes_from_embeddings(embedded)?;
    let mut cov = Matrix::zeros(d, d);
    for (c, idx) in groups.values().enumerate() {
        let mean = protos.prototypes.row(c);
        for &i in idx {
            let diff: Vec<f64> = embedded.sample(i).iter().zip(mean).map(|(v, m)| v - m).collect();
            for a in 0..d {
                let row = cov.row_mut(a);
                for b in 0..d {
                    row[b] += diff[a] * diff[b];
                }
            }
        }
    }
    let dof = (n - k) as f64;
    cov.as_mut_slice().iter_mut().for_each(|v| *v /= dof);
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let epsilon = epsilon_scale * trace / d as f64;
    for i in 0..d {
        cov.set(i, i, cov.get(i, i) + epsilon);
    }
    GaussianFit::from_parts(protos.class_ids, protos.prototypes, cov, epsilon)
        .map_err(|e| Error::Fit(format!("covariance factorization failed: {e}")))
}

/// Encodes `support` and fits the shared-covariance Gaussian model.
pub fn mahalanobis_fit(support: &EmbeddingSet, params: &ModelParams, epsilon_scale: f64) -> Result<GaussianFit> {
    mahalanobis_fit_embeddings(&params.encode_set(support)?, epsilon_scale)
}

pub struct MahalanobisScorer<'a> {
    fit: &'a GaussianFit,
    comparisons: AtomicU64,
}

impl<'a> MahalanobisScorer<'a> {
    pub fn new(fit: &'a GaussianFit) -> Self {
        Self {
            fit,
            comparisons: AtomicU64::new(0),
        }
    }

    pub fn score(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.fit.class_means.cols() {
            return Err(Error::invalid("query dimension does not match fit"));
        }
        let mut best = f64::INFINITY;
        for mean in self.fit.class_means.row_iter() {
            self.comparisons.fetch_add(1, Ordering::Relaxed);
            let diff: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
            best = best.min(self.fit.factor.inverse_quadratic_form(&diff));
        }
        Ok(-best)
    }

    pub fn comparisons(&self) -> u64 {
        self.comparisons.load(Ordering::Relaxed)
    }
}

pub fn mahalanobis_score(fit: &GaussianFit, z_test: &[f64]) -> Result<f64> {
    MahalanobisScorer::new(fit).score(z_test)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringOptions {
    pub k: usize,
    pub normalize: bool,
    pub epsilon_scale: f64,
    pub readout: SimilarityReadout,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            k: 1,
            normalize: true,
            epsilon_scale: 1e-3,
            readout: SimilarityReadout::SameLogit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: ScorerKind,
    pub auroc: f64,
    pub fpr_at_tpr95: f64,
    pub n_comp_per_test: usize,
    /// Comparisons the scorer actually performed, over all test samples.
    pub comparisons_performed: u64,
    /// Score of every test sample, in test-set order.
    pub scores: Vec<f64>,
    pub is_ood: Vec<bool>,
}

impl EvalReport {
    pub fn scores_id(&self) -> Vec<f64> {
        self.select(false)
    }

    pub fn scores_ood(&self) -> Vec<f64> {
        self.select(true)
    }

    fn select(&self, ood: bool) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.is_ood)
            .filter(|(_, &f)| f == ood)
            .map(|(s, _)| *s)
            .collect()
    }

    /// `max − min` over all test scores.
    pub fn score_range(&self) -> f64 {
        let (lo, hi) = self
            .scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        hi - lo
    }
}

/// Scores pre-encoded test embeddings with one scorer. Test samples are scored
/// in parallel; results are collected in order.
pub fn evaluate_embedded(
    kind: ScorerKind,
    params: &ModelParams,
    support_emb: &EmbeddingSet,
    test_emb: &EmbeddingSet,
    opts: &ScoringOptions,
) -> Result<EvalReport> {
    let is_ood = test_emb
        .ood_flags()
        .ok_or_else(|| Error::Data("test set carries no ID/OOD flags".into()))?
        .to_vec();
    let n_comp = count_comparisons(kind, support_emb)?;
    let rows: Vec<&[f64]> = test_emb.features().row_iter().collect();
    let (scores, performed) = match kind {
        ScorerKind::ProtoMsp => {
            let protos = prototypes_from_embeddings(support_emb)?;
            let scorer = ProtoMspScorer::new(params, &protos, opts.readout)?;
            let s: Vec<f64> = rows.par_iter().map(|z| scorer.score(z)).collect::<Result<_>>()?;
            (s, scorer.comparisons())
        }
        ScorerKind::Knn => {
            let scorer = KnnScorer::new(support_emb.features(), opts.k, opts.normalize)?;
            let s: Vec<f64> = rows.par_iter().map(|z| scorer.score(z)).collect::<Result<_>>()?;
            (s, scorer.comparisons())
        }
        ScorerKind::Mahalanobis => {
            let fit = mahalanobis_fit_embeddings(support_emb, opts.epsilon_scale)?;
            let scorer = MahalanobisScorer::new(&fit);
            let s: Vec<f64> = rows.par_iter().map(|z| scorer.score(z)).collect::<Result<_>>()?;
            (s, scorer.comparisons())
        }
    };
    let mut report = EvalReport {
        scorer: kind,
        auroc: 0.0,
        fpr_at_tpr95: 0.0,
        n_comp_per_test: n_comp,
        comparisons_performed: performed,
        scores,
        is_ood,
    };
    let (id, ood) = (report.scores_id(), report.scores_ood());
    report.auroc = metrics::auroc(&id, &ood)?;
    report.fpr_at_tpr95 = metrics::fpr_at_tpr(&id, &ood, DEFAULT_TPR_LEVEL)?;
    Ok(report)
}

/// Encodes support and test inputs with `params` and evaluates one scorer.
pub fn evaluate(
    kind: ScorerKind,
    params: &ModelParams,
    support: &EmbeddingSet,
    test: &EmbeddingSet,
    opts: &ScoringOptions,
) -> Result<EvalReport> {
    let support_emb = params.encode_set(support)?;
    let test_emb = params.encode_set(test)?;
    evaluate_embedded(kind, params, &support_emb, &test_emb, opts)
}
