//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Gated criteria abort the run on FAIL. Trend criteria on the synthetic
//! benchmark are reported only; see the README.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use marginlab::analysis::{r2_index, LabeledFeatureSet};
use marginlab::datagen::{gen_benchmark, BenchmarkConfig};
use marginlab::experiment::{run_cell, run_sweep, SweepConfig, SweepData};
use marginlab::losses::{check_gradient, relative_error, LossSpec, PairTarget};
use marginlab::metrics::{auroc, fpr_at_tpr, spearman};
use marginlab::model::{sample_pairs, Architecture, ModelParams, PairCombine};
use marginlab::scoring::{evaluate, ScorerKind, ScoringOptions};
use marginlab::{Matrix, Rng};

struct Outcome {
    name: &'static str,
    gated: bool,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn check<F>(results: &mut Vec<Outcome>, name: &'static str, gated: bool, budget: Option<Duration>, f: F)
where
    F: FnOnce() -> (bool, String),
{
    let started = Instant::now();
    let (mut pass, mut detail) = f();
    let elapsed = started.elapsed();
    if let Some(limit) = budget {
        if elapsed > limit {
            pass = false;
            detail.push_str(&format!("; over budget {:.0?}", limit));
        }
    }
    let tag = if pass { "PASS" } else { "FAIL" };
    let kind = if gated { "" } else { " (reported)" };
    println!("{tag} {name}{kind}: {detail} [{:.2?}]", elapsed);
    results.push(Outcome { name, gated, pass, detail, elapsed });
}

fn five_losses() -> [LossSpec; 5] {
    [
        LossSpec::Bce,
        LossSpec::Sce,
        LossSpec::Focal { gamma: 2.0 },
        LossSpec::MseCs { c: 10.0 },
        LossSpec::Hinge { delta: 0.1 },
    ]
}

fn loss_gradients() -> (bool, String) {
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    let mut points = 0;
    for spec in five_losses() {
        let mut done = 0;
        while done < 100 {
            let target = PairTarget::new(rng.below(2) == 1);
            let output: Vec<f64> = (0..spec.head_outputs()).map(|_| rng.uniform(-4.0, 4.0)).collect();
            if let LossSpec::Hinge { delta } = spec {
                let kink = if target.is_same() { delta } else { -delta };
                if (output[0] - kink).abs() < 1e-3 {
                    continue;
                }
            }
            // A flat loss leaves only rounding noise in the central difference.
            let grad = spec.evaluate(&output, target).unwrap().grad;
            if grad.iter().all(|g| g.abs() < 1e-6) {
                continue;
            }
            worst = worst.max(check_gradient(&spec, &output, target, 1e-4).unwrap());
            done += 1;
            points += 1;
        }
    }
    (worst < 1e-4, format!("{points} points, max rel err {worst:.2e}"))
}

fn end_to_end_backprop() -> (bool, String) {
    let arch = Architecture {
        encoder_dims: vec![32, 64, 32],
        head_dims: vec![64, 32],
        head_outputs: 1,
        combine: PairCombine::Concat,
    };
    let split = gen_benchmark(&BenchmarkConfig::default()).unwrap();
    let batch = sample_pairs(&split.pretrain, 32, &mut Rng::new(5)).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (li, loss) in five_losses().into_iter().filter(LossSpec::is_smooth).enumerate() {
        let arch = Architecture { head_outputs: loss.head_outputs(), ..arch.clone() };
        let params = ModelParams::init(arch.clone(), 17 + li as u64).unwrap();
        let (_, grads) = params.batch_loss_and_grad(&batch, &loss).unwrap();
        let flat = params.flatten();
        let gflat = grads.flatten();
        let mut rng = Rng::new(100 + li as u64);
        for _ in 0..20 {
            let w = rng.below(flat.len());
            let mut probe = flat.clone();
            probe[w] = flat[w] + h;
            let up = ModelParams::from_flat(arch.clone(), &probe).unwrap().batch_loss(&batch, &loss).unwrap();
            probe[w] = flat[w] - h;
            let down = ModelParams::from_flat(arch.clone(), &probe).unwrap().batch_loss(&batch, &loss).unwrap();
            let numeric = (up - down) / (2.0 * h);
            // Near-zero gradients are compared absolutely.
            let err = if gflat[w].abs().max(numeric.abs()) < 1e-6 {
                (gflat[w] - numeric).abs()
            } else {
                relative_error(gflat[w], numeric)
            };
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst < 1e-4, format!("{checked} weights over 4 smooth losses, max rel err {worst:.2e}"))
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn naive_r2(rows: &[Vec<f64>], labels: &[i32]) -> f64 {
    let mut classes: Vec<i32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len() as f64;
    let mut d_within = 0.0;
    let mut d_total = 0.0;
    for &h in &classes {
        for &c in &classes {
            let mut sum = 0.0;
            let mut count = 0.0;
            for i in 0..rows.len() {
                for j in 0..rows.len() {
                    if labels[i] == h && labels[j] == c {
                        sum += cosine_distance(&rows[i], &rows[j]);
                        count += 1.0;
                    }
                }
            }
            d_total += sum / count;
            if h == c {
                d_within += sum / count;
            }
        }
    }
    1.0 - (d_within / k) / (d_total / (k * k))
}

fn r2_oracle() -> (bool, String) {
    let mut rng = Rng::new(77);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = 4 + rng.below(47);
        let d = 1 + rng.below(8);
        let k = 2 + rng.below(4);
        let labels: Vec<i32> = (0..n).map(|i| if i < k { i as i32 } else { rng.below(k) as i32 }).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| loop {
                let r: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                if r.iter().any(|&x| x.abs() > 1e-3) {
                    break r;
                }
            })
            .collect();
        let set = LabeledFeatureSet::new(Matrix::from_rows(&rows).unwrap(), labels.clone()).unwrap();
        worst = worst.max((r2_index(&set).unwrap().r2 - naive_r2(&rows, &labels)).abs());
    }
    let hand = LabeledFeatureSet::new(
        Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap(),
        vec![0, 0, 1],
    )
    .unwrap();
    let hand_r2 = r2_index(&hand).unwrap().r2;
    (
        worst < 1e-9 && hand_r2 == 5.0 / 7.0,
        format!("50 sets, max |diff| {worst:.2e}; hand example {hand_r2}"),
    )
}

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

fn auroc_oracle() -> (bool, String) {
    let mut rng = Rng::new(31);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let levels = 1 + rng.below(10);
        let draw = |rng: &mut Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.below(levels) as f64 * 0.5).collect() };
        let n_id = 1 + rng.below(60);
        let n_ood = 1 + rng.below(60);
        let id = draw(&mut rng, n_id);
        let ood = draw(&mut rng, n_ood);
        worst = worst.max((auroc(&id, &ood).unwrap() - brute_auroc(&id, &ood)).abs());
    }
    let id: Vec<f64> = (1..=20).map(f64::from).collect();
    let fpr = fpr_at_tpr(&id, &[0.5, 2.5, 18.5], 0.95).unwrap();
    (
        worst < 1e-12 && (fpr - 2.0 / 3.0).abs() < 1e-15,
        format!("200 instances with ties, max |diff| {worst:.2e}; hand fpr {fpr:.6}"),
    )
}

fn n_comp_accounting() -> (bool, String) {
    let cfg = BenchmarkConfig::default();
    let split = gen_benchmark(&cfg).unwrap();
    let arch = Architecture::desk_default(cfg.input_dim, 1);
    let params = ModelParams::init(arch, 0).unwrap();
    let opts = ScoringOptions::default();
    let n_test = split.test.len() as u64;
    let proto = evaluate(ScorerKind::ProtoMsp, &params, &split.support, &split.test, &opts).unwrap();
    let knn = evaluate(ScorerKind::Knn, &params, &split.support, &split.test, &opts).unwrap();
    let pass = proto.n_comp_per_test == 25
        && knn.n_comp_per_test == 4100
        && proto.comparisons_performed == 25 * n_test
        && knn.comparisons_performed == 4100 * n_test;
    (
        pass,
        format!(
            "proto {} (counted {}), knn {} (counted {}), {} test samples",
            proto.n_comp_per_test, proto.comparisons_performed, knn.n_comp_per_test, knn.comparisons_performed, n_test
        ),
    )
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_marginlab"))
        .args(args)
        .env("MARGINLAB_THREADS", "1")
        .output()
        .expect("spawn marginlab");
    assert!(status.status.success(), "marginlab {args:?}: {}", String::from_utf8_lossy(&status.stderr));
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "timings.csv")
        .collect();
    names.sort();
    for name in &names {
        if std::fs::read(a.join(name)).unwrap() != std::fs::read(b.join(name)).unwrap() {
            return Err(format!("{} differs", name.to_string_lossy()));
        }
    }
    Ok(names.len())
}

fn determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let s = |p: &str| root.join(p).display().to_string();
        run_cli(&["gen", "--seed", "3", "--out", &s("data")]);
        run_cli(&["pretrain", "--data", &s("data"), "--loss", "sce", "--seed", "1", "--epochs", "3", "--out", &s("model.oodm")]);
        run_cli(&[
            "sweep", "--seed", "3", "--loss", "sce;hinge:d=0.01", "--seeds", "0,1", "--epochs", "2", "--scorer",
            "proto-msp,knn", "--out", &s("sweep"),
        ]);
    }
    let model = |run: &str| std::fs::read(tmp.path().join(run).join("model.oodm")).unwrap();
    if model("a") != model("b") {
        return (false, "model.oodm differs".into());
    }
    compared += 1;
    for sub in ["data", "sweep"] {
        match same_tree(&tmp.path().join("a").join(sub), &tmp.path().join("b").join(sub)) {
            Ok(n) => compared += n,
            Err(e) => return (false, format!("{sub}: {e}")),
        }
    }
    (true, format!("gen, pretrain, sweep: {compared} files byte-identical"))
}

fn main() {
    let mut results = Vec::new();
    let secs = |s| Some(Duration::from_secs(s));

    check(&mut results, "gradient correctness", true, secs(5), loss_gradients);
    check(&mut results, "end-to-end backprop", true, secs(30), end_to_end_backprop);
    check(&mut results, "r2 oracle equivalence", true, secs(5), r2_oracle);
    check(&mut results, "auroc oracle equivalence", true, secs(5), auroc_oracle);
    check(&mut results, "n.comp accounting", true, None, n_comp_accounting);
    check(&mut results, "determinism", true, None, determinism);

    let config = SweepConfig::default();
    let started = Instant::now();
    let sweep = run_sweep(&config, Some(1)).expect("default sweep");
    let sweep_time = started.elapsed();
    let proto: Vec<_> = sweep
        .rows
        .iter()
        .filter(|r| r.scorer == ScorerKind::ProtoMsp && r.status.is_ok())
        .collect();

    check(&mut results, "r2 vs auroc trend", false, None, || {
        let r2: Vec<f64> = proto.iter().map(|r| r.r2).collect();
        let au: Vec<f64> = proto.iter().map(|r| r.auroc).collect();
        let rho = spearman(&r2, &au).unwrap();
        let in_time = sweep_time < Duration::from_secs(600);
        (
            rho <= -0.3 && in_time,
            format!("spearman {rho:+.4} over {} runs (need <= -0.3); sweep {:.1?} single-threaded", proto.len(), sweep_time),
        )
    });

    check(&mut results, "hinge vs sce / mse", false, None, || {
        let per_seed = |loss: &str| -> Vec<f64> {
            config
                .seeds
                .iter()
                .map(|&s| proto.iter().find(|r| r.loss == loss && r.seed == s).map_or(f64::NAN, |r| r.auroc))
                .collect()
        };
        let hinge = per_seed("hinge:d=0.01");
        let sce = per_seed("sce");
        let mse = per_seed("mse:c=10");
        let wins = hinge.iter().zip(&sce).filter(|(h, s)| h >= s).count();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mh, mm) = (mean(&hinge), mean(&mse));
        (
            wins >= 4 && mh >= mm - 0.01,
            format!("hinge >= sce in {wins}/5 seeds; mean auroc hinge {mh:.4} vs mse c=10 {mm:.4}"),
        )
    });

    check(&mut results, "score range (hinge vs sce)", false, None, || {
        let data = SweepData::generate(&config).unwrap();
        let cell = |loss| {
            let out = run_cell(&config, &data, loss, 0).unwrap();
            let (_, report) = out.reports.into_iter().next().unwrap();
            report.unwrap()
        };
        let hinge = cell(LossSpec::Hinge { delta: 0.01 });
        let sce = cell(LossSpec::Sce);
        let (rh, rs) = (hinge.score_range(), sce.score_range());
        (
            rh < rs && hinge.auroc >= sce.auroc - 0.02,
            format!(
                "seed 0: range hinge {rh:.4} vs sce {rs:.4}; auroc hinge {:.4} vs sce {:.4}",
                hinge.auroc, sce.auroc
            ),
        )
    });

    let gated_failures: Vec<&Outcome> = results.iter().filter(|o| o.gated && !o.pass).collect();
    let reported_failures = results.iter().filter(|o| !o.gated && !o.pass).count();
    let total: Duration = results.iter().map(|o| o.elapsed).sum();
    println!(
        "acceptance: {} passed, {} gated failures, {} reported failures ({:.1?} in checks)",
        results.iter().filter(|o| o.pass).count(),
        gated_failures.len(),
        reported_failures,
        total
    );
    if !gated_failures.is_empty() {
        for o in gated_failures {
            eprintln!("gated failure: {} ({})", o.name, o.detail);
        }
        std::process::exit(1);
    }
}
