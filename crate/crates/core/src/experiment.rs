//! Sweeps, reports and the plumbing behind the command-line verbs.
//!
//! A sweep cell trains one model for a `(loss, seed)` pair on a shared
//! benchmark, measures the R² index of its pair features on held-out
//! pre-training pairs, and evaluates every requested scorer on the support/test
//! split. Cells are independent and run on a rayon pool; rows are merged in
//! grid order, so the output does not depend on scheduling.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{pair_feature_set, project_2d, r2_index, SeparationReport};
use crate::data::EmbeddingSet;
use crate::datagen::{apply_shift, gen_benchmark, BenchmarkConfig, BenchmarkSplit, DomainShift};
use crate::error::{Error, Result};
use crate::io::{read_embedding_set, write_oodf};
use crate::losses::LossSpec;
use crate::metrics;
use crate::model::{sample_pairs, train, ModelParams, PairBatch, TrainConfig};
use crate::numeric::Rng;
use crate::scoring::{evaluate_embedded, EvalReport, ScorerKind, ScoringOptions};

const STREAM_R2_PAIRS: u64 = 20;
pub const THREADS_ENV: &str = "MARGINLAB_THREADS";

/// The loss grid swept by default.
pub fn default_loss_grid() -> Vec<LossSpec> {
    vec![
        LossSpec::Sce,
        LossSpec::Bce,
        LossSpec::Focal { gamma: 1.0 },
        LossSpec::Focal { gamma: 2.0 },
        LossSpec::Focal { gamma: 3.0 },
        LossSpec::MseCs { c: 1.0 },
        LossSpec::MseCs { c: 10.0 },
        LossSpec::MseCs { c: 50.0 },
        LossSpec::Hinge { delta: 1.0 },
        LossSpec::Hinge { delta: 0.1 },
        LossSpec::Hinge { delta: 0.01 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub losses: Vec<LossSpec>,
    /// Training seeds; the benchmark itself is fixed by `benchmark.seed`.
    pub seeds: Vec<u64>,
    pub benchmark: BenchmarkConfig,
    pub scorers: Vec<ScorerKind>,
    /// Template for every cell; `loss` and `seed` are overwritten.
    pub train: TrainConfig,
    pub scoring: ScoringOptions,
    /// Number of pairs whose features enter the R² index.
    pub r2_pairs: usize,
    /// Fraction of each pre-training class held out from training.
    pub holdout_fraction: f64,
    /// Measure R² on training pairs instead of held-out ones.
    pub r2_on_train: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            losses: default_loss_grid(),
            seeds: (0..5).collect(),
            benchmark: BenchmarkConfig::default(),
            scorers: vec![ScorerKind::ProtoMsp],
            train: TrainConfig::new(LossSpec::Sce, 0),
            scoring: ScoringOptions::default(),
            r2_pairs: 1000,
            holdout_fraction: 0.2,
            r2_on_train: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() || self.seeds.is_empty() || self.scorers.is_empty() {
            return Err(Error::Config("sweep grid, seeds and scorers must be nonempty".into()));
        }
        for loss in &self.losses {
            loss.validate()?;
        }
        self.benchmark.validate()?;
        self.train.validate()?;
        if self.r2_pairs < 2 {
            return Err(Error::Config("r2_pairs must be ≥ 2".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, loss: LossSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            loss,
            seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// Training produced non-finite loss or parameters.
    Diverged,
    /// Pair features had no cosine geometry (for instance, every head unit dead).
    DegenerateR2,
    /// The scorer could not be fitted on the learned embeddings.
    ScorerFailed,
}

impl RowStatus {
    pub fn is_ok(self) -> bool {
        self == RowStatus::Ok
    }

    pub fn name(self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Diverged => "diverged",
            RowStatus::DegenerateR2 => "degenerate_r2",
            RowStatus::ScorerFailed => "scorer_failed",
        }
    }
}

/// One `(loss, seed, scorer)` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: String,
    pub kind: String,
    pub hyperparam: Option<f64>,
    pub seed: u64,
    pub scorer: ScorerKind,
    pub status: RowStatus,
    pub r2: f64,
    pub d_within: f64,
    pub d_total: f64,
    pub auroc: f64,
    pub fpr95: f64,
    pub n_comp: usize,
    /// Seconds spent on the whole cell. Kept out of `sweep.csv`.
    #[serde(skip)]
    pub wall_time: f64,
}

impl SweepRow {
    pub fn diverged(&self) -> bool {
        self.status == RowStatus::Diverged
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        self.loss.parse()
    }
}

/// Everything a sweep cell produces.
#[derive(Debug)]
pub struct CellOutcome {
    pub loss: LossSpec,
    pub seed: u64,
    pub params: Option<ModelParams>,
    pub loss_curve: Vec<f64>,
    pub separation: Option<SeparationReport>,
    pub dropped_pairs: usize,
    pub reports: Vec<(ScorerKind, Result<EvalReport>)>,
    pub rows: Vec<SweepRow>,
    pub wall_time: f64,
}

/// Benchmark data shared by every cell: the training part and R²-holdout of
/// the pre-training pool, plus support and test sets.
#[derive(Debug, Clone)]
pub struct SweepData {
    pub train: EmbeddingSet,
    pub holdout: EmbeddingSet,
    pub support: EmbeddingSet,
    pub test: EmbeddingSet,
}

impl SweepData {
    pub fn from_split(split: &BenchmarkSplit, holdout_fraction: f64) -> Self {
        let (train, holdout) = split.pretrain.split_holdout(holdout_fraction);
        Self {
            train,
            holdout,
            support: split.support.clone(),
            test: split.test.clone(),
        }
    }

    pub fn generate(config: &SweepConfig) -> Result<Self> {
        Ok(Self::from_split(&gen_benchmark(&config.benchmark)?, config.holdout_fraction))
    }
}

/// Pairs used for the R² index of a cell.
pub fn r2_pairs(data: &SweepData, n: usize, seed: u64, on_train: bool) -> Result<PairBatch> {
    let source = if on_train { &data.train } else { &data.holdout };
    sample_pairs(source, n, &mut Rng::derive(seed, STREAM_R2_PAIRS))
}

fn row(loss: &LossSpec, seed: u64, scorer: ScorerKind, status: RowStatus) -> SweepRow {
    SweepRow {
        loss: loss.to_string(),
        kind: loss.kind().to_string(),
        hyperparam: loss.hyperparam(),
        seed,
        scorer,
        status,
        r2: f64::NAN,
        d_within: f64::NAN,
        d_total: f64::NAN,
        auroc: f64::NAN,
        fpr95: f64::NAN,
        n_comp: 0,
        wall_time: 0.0,
    }
}

/// Train → R² of held-out pairs → evaluate each scorer.
///
/// Divergence and degenerate geometry are recorded in the row status; other
/// errors abort the cell.
pub fn run_cell(config: &SweepConfig, data: &SweepData, loss: LossSpec, seed: u64) -> Result<CellOutcome> {
    let started = Instant::now();
    let mut outcome = CellOutcome {
        loss,
        seed,
        params: None,
        loss_curve: Vec::new(),
        separation: None,
        dropped_pairs: 0,
        reports: Vec::new(),
        rows: Vec::new(),
        wall_time: 0.0,
    };
    let trained = match train(&config.train_config(loss, seed), &data.train) {
        Ok(t) => t,
        Err(Error::Diverged { .. }) => {
            outcome.rows = config
                .scorers
                .iter()
                .map(|&s| row(&loss, seed, s, RowStatus::Diverged))
                .collect();
            outcome.wall_time = started.elapsed().as_secs_f64();
            outcome.rows.iter_mut().for_each(|r| r.wall_time = outcome.wall_time);
            return Ok(outcome);
        }
        Err(e) => return Err(e),
    };
    let params = trained.checkpoint.params;
    outcome.loss_curve = trained.loss_curve;

    let pairs = r2_pairs(data, config.r2_pairs, seed, config.r2_on_train)?;
    match pair_feature_set(&params, &pairs).and_then(|(set, dropped)| Ok((r2_index(&set)?, dropped))) {
        Ok((rep, dropped)) => {
            outcome.separation = Some(rep);
            outcome.dropped_pairs = dropped;
        }
        Err(Error::DegenerateGeometry(_)) => {}
        Err(e) => return Err(e),
    }

    let support_emb = params.encode_set(&data.support)?;
    let test_emb = params.encode_set(&data.test)?;
    for &scorer in &config.scorers {
        let result = evaluate_embedded(scorer, &params, &support_emb, &test_emb, &config.scoring);
        let mut r = row(&loss, seed, scorer, RowStatus::Ok);
        if let Some(sep) = &outcome.separation {
            r.r2 = sep.r2;
            r.d_within = sep.d_within;
            r.d_total = sep.d_total;
        } else {
            r.status = RowStatus::DegenerateR2;
        }
        match &result {
            Ok(rep) => {
                r.auroc = rep.auroc;
                r.fpr95 = rep.fpr_at_tpr95;
                r.n_comp = rep.n_comp_per_test;
            }
            Err(Error::Fit(_) | Error::NotPositiveDefinite { .. } | Error::DegenerateVector(_)) => {
                r.status = RowStatus::ScorerFailed;
            }
            Err(_) => return Err(result.unwrap_err()),
        }
        outcome.rows.push(r);
        outcome.reports.push((scorer, result));
    }
    outcome.params = Some(params);
    outcome.wall_time = started.elapsed().as_secs_f64();
    outcome.rows.iter_mut().for_each(|r| r.wall_time = outcome.wall_time);
    Ok(outcome)
}

/// Thread count for sweeps: `MARGINLAB_THREADS` if set to a positive integer,
/// otherwise rayon's default.
pub fn sweep_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerSummary {
    pub scorer: ScorerKind,
    pub rows_used: usize,
    pub rows_excluded: usize,
    /// Spearman correlation of R² with AUROC over usable rows.
    pub spearman_r2_auroc: Option<f64>,
    pub sign: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub loss: String,
    pub scorer: ScorerKind,
    pub runs: usize,
    pub mean_r2: f64,
    pub mean_auroc: f64,
    pub mean_fpr95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub scorers: Vec<ScorerSummary>,
    pub losses: Vec<LossSummary>,
    /// `loss@seed/scorer: status` for every excluded row.
    pub excluded: Vec<String>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn summarize(rows: &[SweepRow]) -> SweepSummary {
    let mut scorers: Vec<ScorerKind> = rows.iter().map(|r| r.scorer).collect();
    scorers.sort();
    scorers.dedup();
    let mut losses: Vec<String> = Vec::new();
    for r in rows {
        if !losses.contains(&r.loss) {
            losses.push(r.loss.clone());
        }
    }
    let scorer_summaries = scorers
        .iter()
        .map(|&s| {
            let used: Vec<&SweepRow> = rows.iter().filter(|r| r.scorer == s && r.status.is_ok()).collect();
            let excluded = rows.iter().filter(|r| r.scorer == s && !r.status.is_ok()).count();
            let r2: Vec<f64> = used.iter().map(|r| r.r2).collect();
            let auc: Vec<f64> = used.iter().map(|r| r.auroc).collect();
            let rho = metrics::spearman(&r2, &auc).ok();
            let sign = match rho {
                Some(x) if x < 0.0 => "negative",
                Some(x) if x > 0.0 => "positive",
                Some(_) => "zero",
                None => "undefined",
            };
            ScorerSummary {
                scorer: s,
                rows_used: used.len(),
                rows_excluded: excluded,
                spearman_r2_auroc: rho,
                sign: sign.to_string(),
            }
        })
        .collect();
    let mut loss_summaries = Vec::new();
    for loss in &losses {
        for &s in &scorers {
            let used: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| &r.loss == loss && r.scorer == s && r.status.is_ok())
                .collect();
            loss_summaries.push(LossSummary {
                loss: loss.clone(),
                scorer: s,
                runs: used.len(),
                mean_r2: mean(&used.iter().map(|r| r.r2).collect::<Vec<_>>()),
                mean_auroc: mean(&used.iter().map(|r| r.auroc).collect::<Vec<_>>()),
                mean_fpr95: mean(&used.iter().map(|r| r.fpr95).collect::<Vec<_>>()),
            });
        }
    }
    let excluded = rows
        .iter()
        .filter(|r| !r.status.is_ok())
        .map(|r| format!("{}@{}/{}: {:?}", r.loss, r.seed, r.scorer, r.status))
        .collect();
    SweepSummary {
        scorers: scorer_summaries,
        losses: loss_summaries,
        excluded,
    }
}

impl SweepSummary {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.scorers {
            let rho = s
                .spearman_r2_auroc
                .map_or_else(|| "undefined".to_string(), |x| format!("{x:+.4}"));
            out.push_str(&format!(
                "{}: spearman(r2, auroc) = {rho} ({}) over {} runs, {} excluded\n",
                s.scorer, s.sign, s.rows_used, s.rows_excluded
            ));
        }
        out.push_str(&format!(
            "{:<14} {:<12} {:>4} {:>8} {:>8} {:>8}\n",
            "loss", "scorer", "runs", "r2", "auroc", "fpr95"
        ));
        for l in &self.losses {
            out.push_str(&format!(
                "{:<14} {:<12} {:>4} {:>8.4} {:>8.4} {:>8.4}\n",
                l.loss, l.scorer, l.runs, l.mean_r2, l.mean_auroc, l.mean_fpr95
            ));
        }
        for e in &self.excluded {
            out.push_str(&format!("excluded {e}\n"));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

/// Runs every `(loss, seed)` cell, in parallel up to `threads`.
pub fn run_sweep(config: &SweepConfig, threads: Option<usize>) -> Result<SweepResult> {
    use rayon::prelude::*;

    config.validate()?;
    let data = SweepData::generate(config)?;
    let cells: Vec<(LossSpec, u64)> = config
        .losses
        .iter()
        .flat_map(|&l| config.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<Vec<SweepRow>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(loss, seed)| run_cell(config, &data, loss, seed).map(|o| o.rows))
            .collect()
    });
    let mut rows = Vec::with_capacity(cells.len() * config.scorers.len());
    for o in outcomes {
        rows.extend(o?);
    }
    let summary = summarize(&rows);
    Ok(SweepResult { rows, summary })
}

fn write_csv<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    read_csv(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub loss: String,
    pub seed: u64,
    pub wall_time: f64,
}

/// Per-cell wall times, one line per `(loss, seed)`.
pub fn write_timings_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let mut records: Vec<TimingRecord> = Vec::new();
    for r in rows {
        if records.last().map_or(true, |t| t.loss != r.loss || t.seed != r.seed) {
            records.push(TimingRecord {
                loss: r.loss.clone(),
                seed: r.seed,
                wall_time: r.wall_time,
            });
        }
    }
    write_csv(path, &records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub scorer: ScorerKind,
    pub sample_index: usize,
    pub is_ood: u8,
    pub score: f64,
}

pub fn score_records(report: &EvalReport) -> Vec<ScoreRecord> {
    report
        .scores
        .iter()
        .zip(&report.is_ood)
        .enumerate()
        .map(|(i, (&score, &ood))| ScoreRecord {
            scorer: report.scorer,
            sample_index: i,
            is_ood: u8::from(ood),
            score,
        })
        .collect()
}

pub fn write_scores_csv(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    write_csv(path, records)
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let records: Vec<ScoreRecord> = read_csv(&path)?;
    if let Some(bad) = records.iter().find(|r| r.is_ood > 1 || !r.score.is_finite()) {
        return Err(Error::Data(format!(
            "{}: sample {} has is_ood={} score={}",
            path.as_ref().display(),
            bad.sample_index,
            bad.is_ood,
            bad.score
        )));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Record {
    pub loss_kind: String,
    pub hyperparam: Option<f64>,
    pub seed: u64,
    pub r2: f64,
    pub d_within: f64,
    pub d_total: f64,
    pub n_pairs: usize,
    pub n_dropped: usize,
}

pub fn write_r2_csv(path: impl AsRef<Path>, records: &[R2Record]) -> Result<()> {
    write_csv(path, records)
}

pub fn read_r2_csv(path: impl AsRef<Path>) -> Result<Vec<R2Record>> {
    read_csv(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub x: f64,
    pub y: f64,
    /// 1 for a same-class pair, 0 otherwise.
    pub pair_label: i32,
}

pub fn write_projection_csv(path: impl AsRef<Path>, records: &[ProjectionRecord]) -> Result<()> {
    write_csv(path, records)
}

pub fn read_projection_csv(path: impl AsRef<Path>) -> Result<Vec<ProjectionRecord>> {
    read_csv(path)
}

/// R² of the pair features of `pairs` plus their 2-D projection.
pub fn r2_report(
    params: &ModelParams,
    loss: &LossSpec,
    seed: u64,
    pairs: &PairBatch,
) -> Result<(R2Record, Vec<ProjectionRecord>)> {
    let (set, dropped) = pair_feature_set(params, pairs)?;
    let rep = r2_index(&set)?;
    let proj = project_2d(&set)?;
    let points = (0..proj.rows())
        .map(|i| ProjectionRecord {
            x: proj.get(i, 0),
            y: proj.get(i, 1),
            pair_label: set.class_of()[i],
        })
        .collect();
    let record = R2Record {
        loss_kind: loss.kind().to_string(),
        hyperparam: loss.hyperparam(),
        seed,
        r2: rep.r2,
        d_within: rep.d_within,
        d_total: rep.d_total,
        n_pairs: pairs.len(),
        n_dropped: dropped,
    };
    Ok((record, points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: Vec<HistBin>,
    /// Set when every score is identical and a single bin is emitted.
    pub warning: Option<String>,
}

/// Fixed-width bins over `[min, max]` of the union of both series.
pub fn histogram(id: &[f64], ood: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::invalid("histogram needs ≥ 1 bin"));
    }
    if id.is_empty() && ood.is_empty() {
        return Err(Error::invalid("histogram of no scores"));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::invalid("histogram scores must be finite"));
    }
    let (lo, hi) = id
        .iter()
        .chain(ood)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if lo == hi {
        return Ok(Histogram {
            lo,
            hi,
            bins: vec![HistBin {
                lo,
                hi,
                id_count: id.len(),
                ood_count: ood.len(),
            }],
            warning: Some(format!("all scores equal {lo}; emitting a single bin")),
        });
    }
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<HistBin> = (0..n_bins)
        .map(|b| HistBin {
            lo: lo + b as f64 * width,
            hi: if b + 1 == n_bins { hi } else { lo + (b + 1) as f64 * width },
            id_count: 0,
            ood_count: 0,
        })
        .collect();
    let index = |s: f64| (((s - lo) / (hi - lo) * n_bins as f64) as usize).min(n_bins - 1);
    for &s in id {
        bins[index(s)].id_count += 1;
    }
    for &s in ood {
        bins[index(s)].ood_count += 1;
    }
    Ok(Histogram {
        lo,
        hi,
        bins,
        warning: None,
    })
}

pub fn write_hist_csv(path: impl AsRef<Path>, hist: &Histogram) -> Result<()> {
    write_csv(path, &hist.bins)
}

pub fn read_hist_csv(path: impl AsRef<Path>) -> Result<Vec<HistBin>> {
    read_csv(path)
}

/// Plain SVG bar chart: ID bars left, OOD bars right within each bin.
pub fn hist_svg(hist: &Histogram, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 60.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let max_count = hist
        .bins
        .iter()
        .map(|b| b.id_count.max(b.ood_count))
        .max()
        .unwrap_or(0)
        .max(1);
    let bin_w = plot_w / hist.bins.len() as f64;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    ));
    for (i, b) in hist.bins.iter().enumerate() {
        let x0 = LEFT + i as f64 * bin_w;
        for (j, (count, colour)) in [(b.id_count, "#3b6fb6"), (b.ood_count, "#e08a2c")].iter().enumerate() {
            let h = plot_h * *count as f64 / max_count as f64;
            s.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{colour}\"/>\n",
                x0 + j as f64 * bin_w / 2.0,
                TOP + plot_h - h,
                bin_w / 2.0,
                h
            ));
        }
    }
    let axis_y = TOP + plot_h;
    s.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{axis_y}\" x2=\"{}\" y2=\"{axis_y}\" stroke=\"black\"/>\n",
        LEFT + plot_w
    ));
    s.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{axis_y}\" stroke=\"black\"/>\n"
    ));
    let label = |x: f64, y: f64, anchor: &str, text: String| {
        format!(
            "<text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\" font-size=\"12\">{text}</text>\n"
        )
    };
    s.push_str(&label(LEFT, axis_y + 16.0, "start", format!("{:.6}", hist.lo)));
    s.push_str(&label(LEFT + plot_w, axis_y + 16.0, "end", format!("{:.6}", hist.hi)));
    s.push_str(&label(
        LEFT + plot_w / 2.0,
        axis_y + 40.0,
        "middle",
        format!("score (range {:.6})", hist.hi - hist.lo),
    ));
    s.push_str(&label(LEFT - 6.0, TOP + 4.0, "end", max_count.to_string()));
    s.push_str(&label(LEFT - 6.0, axis_y, "end", "0".to_string()));
    s.push_str(&label(LEFT + plot_w, TOP - 6.0, "end", "ID (blue) / OOD (orange)".to_string()));
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainRow {
    pub scorer: ScorerKind,
    pub n_comp_intra: usize,
    pub n_comp_cross: usize,
    pub auroc_intra: f64,
    pub auroc_cross: f64,
    /// `auroc_cross − auroc_intra`.
    pub delta: f64,
    pub fpr95_intra: f64,
    pub fpr95_cross: f64,
}

/// Evaluates every scorer on `test` and on its shifted copy with the same model.
/// `shift = None` leaves both arms identical.
pub fn cross_domain(
    params: &ModelParams,
    support: &EmbeddingSet,
    test: &EmbeddingSet,
    shift: Option<&DomainShift>,
    shift_seed: u64,
    scorers: &[ScorerKind],
    opts: &ScoringOptions,
) -> Result<Vec<CrossDomainRow>> {
    let shifted = match shift {
        Some(s) => apply_shift(test, s, shift_seed)?,
        None => test.clone(),
    };
    let support_emb = params.encode_set(support)?;
    let intra_emb = params.encode_set(test)?;
    let cross_emb = params.encode_set(&shifted)?;
    scorers
        .iter()
        .map(|&s| {
            let a = evaluate_embedded(s, params, &support_emb, &intra_emb, opts)?;
            let b = evaluate_embedded(s, params, &support_emb, &cross_emb, opts)?;
            Ok(CrossDomainRow {
                scorer: s,
                n_comp_intra: a.n_comp_per_test,
                n_comp_cross: b.n_comp_per_test,
                auroc_intra: a.auroc,
                auroc_cross: b.auroc,
                delta: b.auroc - a.auroc,
                fpr95_intra: a.fpr_at_tpr95,
                fpr95_cross: b.fpr_at_tpr95,
            })
        })
        .collect()
}

pub fn write_crossdomain_csv(path: impl AsRef<Path>, rows: &[CrossDomainRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_crossdomain_csv(path: impl AsRef<Path>) -> Result<Vec<CrossDomainRow>> {
    read_csv(path)
}

pub const PRETRAIN_FILE: &str = "pretrain.oodf";
pub const SUPPORT_FILE: &str = "support.oodf";
pub const TEST_FILE: &str = "test.oodf";
pub const CONFIG_FILE: &str = "config.json";

/// Writes the three splits and the generating config into `dir`.
pub fn write_benchmark(dir: impl AsRef<Path>, config: &BenchmarkConfig, split: &BenchmarkSplit) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_oodf(&split.pretrain, dir.join(PRETRAIN_FILE))?;
    write_oodf(&split.support, dir.join(SUPPORT_FILE))?;
    write_oodf(&split.test, dir.join(TEST_FILE))?;
    write_json(dir.join(CONFIG_FILE), config)
}

/// Reads a directory written by [`write_benchmark`]. The config is optional.
pub fn read_benchmark(dir: impl AsRef<Path>) -> Result<(Option<BenchmarkConfig>, BenchmarkSplit)> {
    let dir = dir.as_ref();
    let split = BenchmarkSplit {
        pretrain: read_embedding_set(dir.join(PRETRAIN_FILE))?,
        support: read_embedding_set(dir.join(SUPPORT_FILE))?,
        test: read_embedding_set(dir.join(TEST_FILE))?,
    };
    if split.test.ood_flags().is_none() {
        return Err(Error::Data(format!("{} carries no ID/OOD flags", dir.join(TEST_FILE).display())));
    }
    let cfg_path = dir.join(CONFIG_FILE);
    let config = if cfg_path.exists() {
        Some(serde_json::from_slice(&fs::read(cfg_path)?)?)
    } else {
        None
    };
    Ok((config, split))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
