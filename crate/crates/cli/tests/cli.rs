//! End-to-end checks of the pvadv binary: stage chaining, config-file
//! precedence, exit codes, and artifact determinism.

use std::path::Path;
use std::process::{Command, Output};

fn pvadv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvadv"))
        .args(args)
        .output()
        .expect("spawn pvadv")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const DATA: &str = "synthetic:120:8:8:3";

#[test]
fn staged_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();

    ok(&pvadv(&[
        "train-classifier", "--data", DATA, "--arch", "tiny", "--epochs", "5",
        "--batch-size", "30", "--seed", "1", "--out", &p("model.ckpt"),
    ]));
    ok(&pvadv(&[
        "attack", "--model", &p("model.ckpt"), "--data", DATA, "--attack", "pgd",
        "--epsilon", "0.3", "--seed", "1", "--out", &p("adv.ckpt"),
    ]));
    ok(&pvadv(&[
        "train-vulnmap", "--model", &p("model.ckpt"), "--data", DATA, "--source", "fgsm",
        "--beta", "0.3", "--max-iters", "10", "--batch-size", "40", "--seed", "1",
        "--out", &p("vuln.ckpt"),
    ]));
    ok(&pvadv(&[
        "gen-adv", "--model", &p("model.ckpt"), "--vuln", &p("vuln.ckpt"), "--data", DATA,
        "--source", "fgsm", "--variant", "topk", "--seed", "1", "--out", &p("masked.ckpt"),
    ]));
    ok(&pvadv(&[
        "train-detector", "--model", &p("model.ckpt"), "--advset", &p("adv.ckpt"),
        "--seed", "1", "--out", &p("det.ckpt"),
    ]));
    ok(&pvadv(&[
        "evaluate", "--model", &p("model.ckpt"), "--advset", &p("masked.ckpt"),
        "--detector", &p("det.ckpt"), "--beta", "0.3", "--variant", "topk",
        "--out", &p("report.csv"),
    ]));
    ok(&pvadv(&[
        "export-maps", "--vuln", &p("vuln.ckpt"), "--data", DATA, "--limit", "2",
        "--outdir", &p("maps"),
    ]));

    for f in ["model.ckpt", "adv.ckpt", "vuln.ckpt", "masked.ckpt", "det.ckpt", "report.csv", "report.json"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    assert!(dir.path().join("maps/map_0000.pgm").exists());
    assert!(dir.path().join("maps/map_0001.csv").exists());
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.starts_with("attack,beta,variant,adv_acc"));
    assert!(report.contains("pvadv_fgsm,0.3,topk,"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{"data": "{DATA}", "arch": "tiny", "epochs": 5, "batch-size": 30, "seed": 1}}"#
        ),
    )
    .unwrap();
    let out_a = dir.path().join("a.ckpt").display().to_string();
    let out_b = dir.path().join("b.ckpt").display().to_string();
    // epochs comes from the config
    ok(&pvadv(&["train-classifier", "--config", cfg_path.to_str().unwrap(), "--out", &out_a]));
    // explicit --seed overrides the config value; artifact must differ
    ok(&pvadv(&[
        "train-classifier", "--config", cfg_path.to_str().unwrap(), "--seed", "2", "--out", &out_b,
    ]));
    let a = std::fs::read(dir.path().join("a.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b.ckpt")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.ckpt").display().to_string();

    // unknown flag: usage error 2
    let r = pvadv(&["train-classifier", "--data", DATA, "--out", &out, "--bogus"]);
    assert_eq!(r.status.code(), Some(2));

    // out-of-range beta: usage error 2
    let r = pvadv(&["run", "--data", DATA, "--beta", "1.5", "--outdir", &out]);
    assert_eq!(r.status.code(), Some(2));

    // missing model checkpoint: data error 3, message names the path
    let r = pvadv(&["attack", "--model", "/nonexistent/m.ckpt", "--data", DATA, "--attack", "fgsm", "--out", &out]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("/nonexistent/m.ckpt"));

    // a non-checkpoint file: data error 3
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let r = pvadv(&["attack", "--model", junk.to_str().unwrap(), "--data", DATA, "--attack", "fgsm", "--out", &out]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn pipeline_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&pvadv(&[
            "run", "--data", DATA, "--arch", "tiny", "--source", "fgsm", "--epochs", "4",
            "--batch-size", "30", "--max-iters", "8", "--seed", "3",
            "--outdir", out.to_str().unwrap(),
        ]));
        out
    };
    let (a, b) = (run("r1"), run("r2"));
    for f in ["model.ckpt", "vuln.ckpt", "detector.ckpt", "advset_masked.ckpt", "report.csv", "report.json"] {
        let fa = std::fs::read(a.join(f)).unwrap();
        let fb = std::fs::read(b.join(f)).unwrap();
        assert_eq!(fa, fb, "artifact {f} differs between runs");
    }
}

#[test]
fn evaluate_writes_provenance_sidecar_with_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("run");
    ok(&pvadv(&[
        "run", "--data", DATA, "--arch", "tiny", "--source", "fgsm", "--epochs", "4",
        "--batch-size", "30", "--max-iters", "8", "--seed", "4",
        "--outdir", outdir.to_str().unwrap(),
    ]));
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outdir.join("report.json")).unwrap()).unwrap();
    let inputs = sidecar["inputs"].as_object().unwrap();
    for key in ["model", "vuln", "detector", "advset_masked"] {
        let hash = inputs[key].as_str().unwrap();
        assert_eq!(hash.len(), 64, "sha256 hex for {key}");
        assert!(Path::new(&outdir).join(format!("{}.ckpt", if key == "advset_masked" { "advset_masked" } else { key })).exists());
    }
}
