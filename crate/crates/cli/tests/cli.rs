use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use plrn_core::data::Dataset;
use plrn_core::head::{write_predictions, PredictionRow};

fn plrn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plrn"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = plrn(dir, args);
    assert_eq!(o.status.code(), Some(0), "{args:?}\n{}{}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn setup(dir: &Path) {
    fs::write(dir.join("syn.txt"), "samples = 60\nraw_dim = 8\nmin_frames = 12\nmax_frames = 16\nseed = 1\n").unwrap();
    fs::write(dir.join("train.txt"), "preset = tiny\nepochs = 2\nbatch_size = 4\n").unwrap();
    ok(dir, &["gen-data", "--config", "syn.txt", "--out", "data"]);
}

#[test]
fn every_subcommand_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 6] = [
        ("gen-data", &["--config", "--out"]),
        ("train", &["--config", "--data", "--out", "--set"]),
        ("predict", &["--checkpoint", "--data", "--out", "--split", "--config", "--dump-attention"]),
        ("evaluate", &["--pred", "--data", "--thresholds", "--out"]),
        ("grad-check", &["--config", "--tolerance", "--max-per-param", "--seed", "--step"]),
        ("report", &["--logs", "--out"]),
    ];
    for (sub, flags) in cases {
        let help = ok(dir.path(), &[sub, "--help"]);
        for f in flags {
            assert!(help.contains(f), "{sub} --help lacks {f}:\n{help}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["evaluate", "--bogus"], &["train"], &[]] {
        let o = plrn(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_files_exit_two_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = plrn(dir.path(), &["gen-data", "--config", "absent.txt", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.txt"));
    setup(dir.path());
    let o = plrn(dir.path(), &["evaluate", "--pred", "nothing.csv", "--data", "data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nothing.csv"));
}

#[test]
fn invalid_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let o = plrn(dir.path(), &["train", "--config", "train.txt", "--data", "data", "--out", "r", "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
    fs::write(dir.path().join("bad.txt"), "samples = 10\nsigma = -1\n").unwrap();
    let o = plrn(dir.path(), &["gen-data", "--config", "bad.txt", "--out", "d"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = plrn(dir.path(), &["evaluate", "--pred", "p.csv", "--data", "data", "--thresholds", "0.5,1.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_on_copied_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let data = Dataset::load(&dir.path().join("data")).unwrap();
    let rows: Vec<PredictionRow> = data
        .samples
        .iter()
        .map(|s| {
            let (g_s, g_e) = s.boundary();
            PredictionRow {
                sample_id: s.sample_id.to_string(),
                tau_s: g_s,
                tau_e: g_e,
                tau_c: 0.5 * (g_s + g_e),
                tau_w: g_e - g_s,
            }
        })
        .collect();
    write_predictions(&dir.path().join("gt.csv"), &rows).unwrap();
    let out = ok(dir.path(), &["evaluate", "--pred", "gt.csv", "--data", "data"]);
    assert!(
        out.contains("R@0.3=100.00 R@0.5=100.00 R@0.7=100.00 mIoU=100.00"),
        "{out}"
    );
}

#[test]
fn pipeline_is_deterministic_and_rerunnable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let mut metrics = Vec::new();
    for run in ["a", "b", "a"] {
        let data = format!("data_{run}");
        ok(d, &["gen-data", "--config", "syn.txt", "--out", &data]);
        ok(d, &["train", "--config", "train.txt", "--data", &data, "--out", run]);
        let ckpt = format!("{run}/checkpoint.plrn");
        let pred = format!("{run}.csv");
        ok(d, &["predict", "--checkpoint", &ckpt, "--data", &data, "--out", &pred, "--dump-attention", run]);
        metrics.push(ok(d, &["evaluate", "--pred", &pred, "--data", &data, "--thresholds", "0.1,0.3,0.5"]));
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(metrics[0], metrics[2]);
    assert_eq!(fs::read(d.join("a/checkpoint.plrn")).unwrap(), fs::read(d.join("b/checkpoint.plrn")).unwrap());
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());
    assert!(d.join("a/temporal_attention.csv").exists());
    assert!(d.join("a/word_attention.csv").exists());
}

#[test]
fn predict_rejects_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["train", "--config", "train.txt", "--data", "data", "--out", "run"]);
    fs::write(d.join("other.txt"), "preset = tiny\nd = 16\n").unwrap();
    let o = plrn(d, &["predict", "--checkpoint", "run/checkpoint.plrn", "--data", "data", "--out", "p.csv", "--config", "other.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`d`"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes_on_desk_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("desk.txt"), "preset = desk\n").unwrap();
    let out = ok(dir.path(), &["grad-check", "--config", "desk.txt", "--max-per-param", "20"]);
    assert!(out.contains("max relative error"));
    assert!(out.contains("pass"));
}

#[test]
fn report_builds_ablation_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(d, &["train", "--config", "train.txt", "--data", "data", "--out", "full"]);
    ok(d, &["train", "--config", "train.txt", "--data", "data", "--out", "no_gcn", "--set", "use_gcn=false"]);
    ok(d, &["report", "--logs", "full", "no_gcn", "--out", "rep"]);
    let summary = fs::read_to_string(d.join("rep/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("full,1,1,1,1,1,1,1,"));
    assert!(lines[2].starts_with("no_gcn,1,1,1,1,0,1,1,"));
    let curves = fs::read_to_string(d.join("rep/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 2);
    assert!(d.join("rep/losses.csv").exists());
}
