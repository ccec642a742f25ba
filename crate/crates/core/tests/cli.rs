use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use marginlab::experiment::{read_crossdomain_csv, read_hist_csv, read_scores_csv, write_scores_csv, ScoreRecord};
use marginlab::model::{load_checkpoint, ModelParams};
use marginlab::scoring::ScorerKind;

fn marginlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marginlab"))
        .args(args)
        .env("MARGINLAB_THREADS", "1")
        .output()
        .expect("spawn marginlab")
}

fn ok(args: &[&str]) -> String {
    let out = marginlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen", "--seed", seed, "--out", p(&data)]);
    data
}

#[test]
fn gen_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen", "--seed", "7", "--out", p(&a)]);
    ok(&["gen", "--seed", "7", "--out", p(&b)]);
    for name in ["pretrain.oodf", "support.oodf", "test.oodf", "config.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = tmp.path().join("c");
    ok(&["gen", "--seed", "8", "--out", p(&c)]);
    assert_ne!(std::fs::read(a.join("test.oodf")).unwrap(), std::fs::read(c.join("test.oodf")).unwrap());
}

#[test]
fn zero_epoch_pretrain_is_init() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "1");
    let model = tmp.path().join("m.oodm");
    ok(&["pretrain", "--data", p(&data), "--loss", "hinge:d=0.01", "--epochs", "0", "--seed", "4", "--out", p(&model)]);
    let ckpt = load_checkpoint(&model).unwrap();
    let arch = ckpt.config.architecture.resolve(32, &ckpt.config.loss);
    let mut init = ModelParams::init(arch, 4).unwrap();
    init.quantize_f32();
    assert_eq!(ckpt.params, init);
    assert!(ckpt.final_loss.is_nan());
}

#[test]
fn evaluate_reports_comparisons_and_hist_renders() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "2");
    let model = tmp.path().join("m.oodm");
    ok(&["pretrain", "--data", p(&data), "--loss", "sce", "--epochs", "2", "--out", p(&model)]);
    let eval = tmp.path().join("eval");
    let line = ok(&["evaluate", "--data", p(&data), "--model", p(&model), "--scorer", "proto-msp", "--out", p(&eval)]);
    assert!(line.trim_end().ends_with("n.comp=25"), "{line}");
    let knn = ok(&["evaluate", "--data", p(&data), "--model", p(&model), "--scorer", "knn", "--out", p(&tmp.path().join("k"))]);
    assert!(knn.trim_end().ends_with("n.comp=4100"), "{knn}");

    let scores = read_scores_csv(eval.join("scores.csv")).unwrap();
    assert_eq!(scores.len(), 1000);
    let hist_dir = tmp.path().join("hist");
    ok(&["hist", "--scores", p(&eval.join("scores.csv")), "--bins", "10", "--out", p(&hist_dir)]);
    let bins = read_hist_csv(hist_dir.join("hist.csv")).unwrap();
    assert_eq!(bins.len(), 10);
    let id: usize = bins.iter().map(|b| b.id_count).sum();
    let ood: usize = bins.iter().map(|b| b.ood_count).sum();
    assert_eq!(id + ood, 1000);
    assert_eq!(ood, scores.iter().filter(|r| r.is_ood == 1).count());
    let svg = std::fs::read_to_string(hist_dir.join("hist.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("range"));
}

#[test]
fn hist_extremes_and_identical_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for i in 0..200 {
        let ood = i >= 100;
        records.push(ScoreRecord {
            scorer: ScorerKind::ProtoMsp,
            sample_index: i,
            is_ood: u8::from(ood),
            score: if ood { 0.1 } else { 0.9 },
        });
    }
    let scores = tmp.path().join("scores.csv");
    write_scores_csv(&scores, &records).unwrap();
    let out = tmp.path().join("h");
    ok(&["hist", "--scores", p(&scores), "--bins", "8", "--out", p(&out)]);
    let bins = read_hist_csv(out.join("hist.csv")).unwrap();
    assert_eq!(bins.len(), 8);
    assert_eq!((bins[0].id_count, bins[0].ood_count), (0, 100));
    assert_eq!((bins[7].id_count, bins[7].ood_count), (100, 0));
    assert!(bins[1..7].iter().all(|b| b.id_count + b.ood_count == 0));

    for r in &mut records {
        r.score = 0.5;
    }
    write_scores_csv(&scores, &records).unwrap();
    let res = marginlab(&["hist", "--scores", p(&scores), "--bins", "8", "--out", p(&out)]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("warning"));
    assert_eq!(read_hist_csv(out.join("hist.csv")).unwrap().len(), 1);
}

#[test]
fn crossdomain_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "3");
    let model = tmp.path().join("m.oodm");
    ok(&["pretrain", "--data", p(&data), "--loss", "bce", "--epochs", "10", "--out", p(&model)]);

    let none = tmp.path().join("none");
    ok(&["crossdomain", "--data", p(&data), "--model", p(&model), "--out", p(&none)]);
    let rows = read_crossdomain_csv(none.join("crossdomain.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r.delta.abs() < 1e-12, "{r:?}");
        assert_eq!(r.n_comp_intra, r.n_comp_cross);
    }

    let strong = tmp.path().join("strong");
    ok(&["crossdomain", "--data", p(&data), "--model", p(&model), "--shift", "rot,bias=1,noise=3", "--out", p(&strong)]);
    for r in read_crossdomain_csv(strong.join("crossdomain.csv")).unwrap() {
        assert!(r.auroc_cross < r.auroc_intra, "{r:?}");
        assert_eq!(r.n_comp_intra, r.n_comp_cross);
    }
}

#[test]
fn sweep_rows_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "sweep", "--loss", "hinge:d=0.1", "--seeds", "0", "--epochs", "2", "--scorer", "proto-msp,knn,mahalanobis",
            "--out", p(&out),
        ]);
        out
    };
    let a = run("a");
    let b = run("b");
    let csv = std::fs::read_to_string(a.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_eq!(csv, std::fs::read_to_string(b.join("sweep.csv")).unwrap());
    assert!(a.join("summary.txt").exists() && a.join("timings.csv").exists());
}

#[test]
fn errors_are_single_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("data");
    std::fs::create_dir_all(&bad).unwrap();
    std::fs::write(bad.join("support.oodf"), b"OODF\x01\x05\x00").unwrap();
    std::fs::write(bad.join("test.oodf"), b"").unwrap();
    std::fs::write(bad.join("pretrain.oodf"), b"").unwrap();
    let out = marginlab(&["pretrain", "--data", p(&bad), "--out", p(&tmp.path().join("m"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=format"), "{err}");

    let out = marginlab(&["evaluate", "--data", p(&bad), "--model", "missing.oodm", "--scorer", "nope", "--out", "x"]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}
