use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use marginlab::datagen::{gen_benchmark, BenchmarkConfig, DomainShift, ShiftSpec};
use marginlab::experiment::{
    cross_domain, hist_svg, histogram, r2_pairs, r2_report, read_benchmark, read_scores_csv,
    run_sweep, score_records, sweep_threads, write_benchmark, write_crossdomain_csv, write_hist_csv,
    write_json, write_projection_csv, write_r2_csv, write_scores_csv, write_sweep_csv, write_timings_csv,
    SweepConfig, SweepData,
};
use marginlab::model::{load_checkpoint, save_checkpoint, train, SimilarityReadout, TrainConfig};
use marginlab::scoring::{evaluate, ScorerKind, ScoringOptions};
use marginlab::{Error, LossSpec, Result};

#[derive(Parser)]
#[command(name = "marginlab", version, about = "Relational pre-training, class separation and OOD scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark (pretrain/support/test OODF files + config.json).
    Gen(GenArgs),
    /// Train a relational model on the pre-training split.
    Pretrain(PretrainArgs),
    /// Score the test split with one scorer.
    Evaluate(EvaluateArgs),
    /// R² index and 2-D projection of a model's pair features.
    R2(R2Args),
    /// Loss × seed sweep with R² and AUROC per run.
    Sweep(SweepArgs),
    /// Histogram of ID and OOD scores.
    Hist(HistArgs),
    /// Intra- vs cross-domain evaluation of every scorer.
    Crossdomain(CrossdomainArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Shift applied to the test split, e.g. `rot,bias=0.5,noise=2`.
    #[arg(long)]
    shift: Option<String>,
    /// Benchmark config JSON; `--seed` and `--shift` override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of each pre-training class held out for R².
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "hinge:d=0.01")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Readout {
    /// Scalar score, or the "same" logit of a two-logit head.
    Same,
    /// `same − different` for a two-logit head.
    Diff,
}

#[derive(Args)]
struct ScoringArgs {
    /// Neighbour rank for k-NN (default 1).
    #[arg(long)]
    k: Option<usize>,
    /// Score k-NN on raw rather than L2-normalized embeddings.
    #[arg(long)]
    no_normalize: bool,
    /// Similarity read off a two-logit head (default `same`).
    #[arg(long, value_enum)]
    sce_readout: Option<Readout>,
    /// Mahalanobis ridge as a fraction of mean variance (default 1e-3).
    #[arg(long)]
    epsilon_scale: Option<f64>,
}

impl ScoringArgs {
    fn apply(&self, mut opts: ScoringOptions) -> ScoringOptions {
        if let Some(k) = self.k {
            opts.k = k;
        }
        if self.no_normalize {
            opts.normalize = false;
        }
        if let Some(e) = self.epsilon_scale {
            opts.epsilon_scale = e;
        }
        if let Some(r) = self.sce_readout {
            opts.readout = match r {
                Readout::Same => SimilarityReadout::SameLogit,
                Readout::Diff => SimilarityReadout::LogitDifference,
            };
        }
        opts
    }

    fn options(&self) -> ScoringOptions {
        self.apply(ScoringOptions::default())
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "proto-msp")]
    scorer: String,
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Directory for report.json and scores.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct R2Args {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Seed of the pair sample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Sample pairs from the training part instead of the holdout.
    #[arg(long)]
    r2_on_train: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep config JSON; other flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Semicolon-separated loss specs (default: the full grid).
    #[arg(long)]
    loss: Option<String>,
    /// Comma-separated training seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Benchmark seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated scorers.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long)]
    shift: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    r2_on_train: bool,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HistArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Scorer to plot when the file holds several.
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long)]
    title: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrossdomainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Shift for the cross-domain arm; omitted means both arms are identical.
    #[arg(long)]
    shift: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated scorers (default: all).
    #[arg(long)]
    scorer: Option<String>,
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::R2(a) => cmd_r2(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Hist(a) => cmd_hist(a),
        Command::Crossdomain(a) => cmd_crossdomain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={:?}", e.kind(), msg);
            ExitCode::FAILURE
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str, sep: char) -> Result<Vec<T>> {
    s.split(sep).map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e| Error::InvalidArgument(format!("seed {p:?}: {e}"))))
        .collect()
}

fn shift_for(spec: &str, dim: usize, seed: u64) -> Result<DomainShift> {
    DomainShift::from_spec(dim, &spec.parse::<ShiftSpec>()?, seed)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut config: BenchmarkConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => BenchmarkConfig::default(),
    };
    config.seed = a.seed;
    if let Some(s) = &a.shift {
        config.shift = Some(shift_for(s, config.input_dim, a.seed)?);
    }
    let split = gen_benchmark(&config)?;
    write_benchmark(&a.out, &config, &split)?;
    println!(
        "wrote {} pretrain, {} support, {} test samples to {}",
        split.pretrain.len(),
        split.support.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_config(loss: LossSpec, seed: u64, t: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig::new(loss, seed);
    if let Some(e) = t.epochs {
        cfg.epochs = e;
    }
    if let Some(p) = t.pairs_per_epoch {
        cfg.pairs_per_epoch = p;
    }
    if let Some(lr) = t.lr {
        cfg.learning_rate = lr;
    }
    cfg
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let loss: LossSpec = a.loss.parse()?;
    let (_, split) = read_benchmark(&a.data)?;
    let data = SweepData::from_split(&split, a.train.holdout);
    let outcome = train(&train_config(loss, a.seed, &a.train), &data.train)?;
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    println!(
        "loss={} epochs={} final_loss={} -> {}",
        loss,
        outcome.loss_curve.len(),
        outcome.checkpoint.final_loss,
        a.out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let scorer: ScorerKind = a.scorer.parse()?;
    let (_, split) = read_benchmark(&a.data)?;
    let ckpt = load_checkpoint(&a.model)?;
    let report = evaluate(scorer, &ckpt.params, &split.support, &split.test, &a.scoring.options())?;
    std::fs::create_dir_all(&a.out)?;
    write_scores_csv(a.out.join("scores.csv"), &score_records(&report))?;
    write_json(
        a.out.join("report.json"),
        &serde_json::json!({
            "scorer": report.scorer,
            "auroc": report.auroc,
            "fpr_at_tpr95": report.fpr_at_tpr95,
            "n_comp": report.n_comp_per_test,
            "comparisons_performed": report.comparisons_performed,
            "score_range": report.score_range(),
        }),
    )?;
    println!(
        "scorer={} auroc={:.6} fpr95={:.6} n.comp={}",
        report.scorer, report.auroc, report.fpr_at_tpr95, report.n_comp_per_test
    );
    Ok(())
}

fn cmd_r2(a: R2Args) -> Result<()> {
    let (_, split) = read_benchmark(&a.data)?;
    let ckpt = load_checkpoint(&a.model)?;
    let data = SweepData::from_split(&split, a.holdout);
    let pairs = r2_pairs(&data, a.pairs, a.seed, a.r2_on_train)?;
    let (record, points) = r2_report(&ckpt.params, &ckpt.config.loss, a.seed, &pairs)?;
    std::fs::create_dir_all(&a.out)?;
    write_r2_csv(a.out.join("r2_report.csv"), std::slice::from_ref(&record))?;
    write_projection_csv(a.out.join("projection.csv"), &points)?;
    println!(
        "r2={:.6} d_within={:.6} d_total={:.6} pairs={} dropped={}",
        record.r2, record.d_within, record.d_total, record.n_pairs, record.n_dropped
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg: SweepConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SweepConfig::default(),
    };
    if let Some(l) = &a.loss {
        cfg.losses = parse_list(l, ';')?;
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(s) = a.seed {
        cfg.benchmark.seed = s;
    }
    if let Some(s) = &a.scorer {
        cfg.scorers = parse_list(s, ',')?;
    }
    if let Some(s) = &a.shift {
        cfg.benchmark.shift = Some(shift_for(s, cfg.benchmark.input_dim, cfg.benchmark.seed)?);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.r2_on_train |= a.r2_on_train;
    cfg.scoring = a.scoring.apply(cfg.scoring);
    let result = run_sweep(&cfg, sweep_threads()?)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(a.out.join("config.json"), &cfg)?;
    write_sweep_csv(a.out.join("sweep.csv"), &result.rows)?;
    write_json(a.out.join("summary.json"), &result.summary)?;
    let text = result.summary.render();
    std::fs::write(a.out.join("summary.txt"), &text)?;
    write_timings_csv(a.out.join("timings.csv"), &result.rows)?;
    print!("{text}");
    Ok(())
}

fn cmd_hist(a: HistArgs) -> Result<()> {
    let mut records = read_scores_csv(&a.scores)?;
    let mut scorers: Vec<ScorerKind> = records.iter().map(|r| r.scorer).collect();
    scorers.sort();
    scorers.dedup();
    let scorer = match &a.scorer {
        Some(s) => s.parse()?,
        None if scorers.len() == 1 => scorers[0],
        None if scorers.is_empty() => {
            return Err(Error::Data(format!("{} holds no scores", a.scores.display())))
        }
        None => return Err(Error::InvalidArgument("scores file holds several scorers; pass --scorer".into())),
    };
    records.retain(|r| r.scorer == scorer);
    let id: Vec<f64> = records.iter().filter(|r| r.is_ood == 0).map(|r| r.score).collect();
    let ood: Vec<f64> = records.iter().filter(|r| r.is_ood == 1).map(|r| r.score).collect();
    let hist = histogram(&id, &ood, a.bins)?;
    if let Some(w) = &hist.warning {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&a.out)?;
    write_hist_csv(a.out.join("hist.csv"), &hist)?;
    let title = a.title.unwrap_or_else(|| format!("{scorer} scores"));
    std::fs::write(a.out.join("hist.svg"), hist_svg(&hist, &title))?;
    println!(
        "scorer={scorer} bins={} range=[{}, {}] width={}",
        hist.bins.len(),
        hist.lo,
        hist.hi,
        hist.hi - hist.lo
    );
    Ok(())
}

fn cmd_crossdomain(a: CrossdomainArgs) -> Result<()> {
    let (_, split) = read_benchmark(&a.data)?;
    let ckpt = load_checkpoint(&a.model)?;
    let scorers = match &a.scorer {
        Some(s) => parse_list(s, ',')?,
        None => ScorerKind::ALL.to_vec(),
    };
    let shift = a
        .shift
        .as_deref()
        .map(|s| shift_for(s, split.test.dim(), a.seed))
        .transpose()?;
    let rows = cross_domain(
        &ckpt.params,
        &split.support,
        &split.test,
        shift.as_ref(),
        a.seed,
        &scorers,
        &a.scoring.options(),
    )?;
    std::fs::create_dir_all(&a.out)?;
    write_crossdomain_csv(a.out.join("crossdomain.csv"), &rows)?;
    for r in &rows {
        println!(
            "scorer={} auroc_intra={:.6} auroc_cross={:.6} delta={:+.6} n.comp={}",
            r.scorer, r.auroc_intra, r.auroc_cross, r.delta, r.n_comp_intra
        );
    }
    Ok(())
}
