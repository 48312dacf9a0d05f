use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mea_core::io::{load_dataset, KeyValues};

fn mea(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mea"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = mea(args, dir);
    assert!(
        out.status.success(),
        "mea {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen(dir: &Path, out: &str, shift: &str, n: &str, seed: &str) {
    ok(
        &[
            "gen-data",
            "--shift",
            shift,
            "--n",
            n,
            "--seed",
            seed,
            "--image-size",
            "16",
            "--out",
            out,
        ],
        dir,
    );
}

/// Victim trained for one epoch on 64 shift-0 samples.
fn quick_victim(dir: &Path) {
    gen(dir, "victim_data", "0", "64", "1");
    ok(
        &[
            "train-victim",
            "--data",
            "victim_data",
            "--max-epochs",
            "1",
            "--l1-threshold",
            "1.0",
            "--out",
            "victim",
        ],
        dir,
    );
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "a", "0.5", "8", "7");
    gen(tmp.path(), "b", "0.5", "8", "7");
    gen(tmp.path(), "c", "0.5", "8", "8");
    for f in ["manifest.txt", "inputs.i2it", "targets.i2it"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap()
        );
    }
    assert_ne!(
        fs::read(tmp.path().join("a/inputs.i2it")).unwrap(),
        fs::read(tmp.path().join("c/inputs.i2it")).unwrap()
    );
    assert_eq!(load_dataset(&tmp.path().join("a")).unwrap().len(), 8);
}

#[test]
fn out_of_range_shift_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mea(&["gen-data", "--shift", "1.2", "--n", "4", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = mea(&["ablate", "--shift", "1.2", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mea(&["train-victim", "--data", "nowhere", "--out", "v"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unreachable_victim_threshold_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", "0", "16", "1");
    let out = mea(
        &[
            "train-victim",
            "--data",
            "d",
            "--max-epochs",
            "1",
            "--l1-threshold",
            "0.0",
            "--out",
            "v",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn victim_evaluated_against_itself_has_zero_fidelity_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    quick_victim(dir);
    gen(dir, "test", "0", "32", "9");
    ok(
        &[
            "eval", "--attack", "victim", "--victim", "victim", "--test", "test", "--out", "eval",
        ],
        dir,
    );
    let kv = KeyValues::read(&dir.join("eval/report.txt")).unwrap();
    assert_eq!(kv.get("fidelity.L1"), Some("0.0"));
    assert_eq!(kv.get("fidelity.PSNR"), Some("inf"));
    assert!(dir.join("eval/metrics.csv").exists());
}

#[test]
fn extract_then_landscape_centre_matches_reported_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    quick_victim(dir);
    gen(dir, "attacker", "1", "32", "3");
    gen(dir, "test", "0", "32", "4");
    ok(
        &[
            "extract", "--victim", "victim", "--data", "attacker", "--test", "test", "--arm", "full", "--budget", "32",
            "--epochs", "2", "--out", "run",
        ],
        dir,
    );
    let report = KeyValues::read(&dir.join("run/report.txt")).unwrap();
    assert_eq!(report.get("queries").unwrap().parse::<f64>().unwrap(), 32.0);
    assert!(dir.join("run/triptych0.pgm").exists());
    let reported: f64 = report.get("final.generator_loss").unwrap().parse().unwrap();

    let out = ok(
        &[
            "landscape",
            "--checkpoint",
            "run/checkpoint",
            "--data",
            "run/attack_data",
            "--grid",
            "3",
            "--out",
            "slice.i2it",
        ],
        dir,
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let centre: f64 = stdout.trim().strip_prefix("center=").unwrap().parse().unwrap();
    assert!(
        (centre - reported).abs() <= 1e-9 * reported.abs().max(1.0),
        "{centre} vs {reported}"
    );
    assert_eq!(fs::read_to_string(dir.join("slice.csv")).unwrap().lines().count(), 3);
}

#[test]
fn extract_beyond_budget_stops_with_budget_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    quick_victim(dir);
    gen(dir, "attacker", "1", "32", "3");
    gen(dir, "test", "0", "32", "4");
    let out = mea(
        &[
            "extract", "--victim", "victim", "--data", "attacker", "--test", "test", "--arm", "baseline", "--budget",
            "31", "--out", "run",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}
