use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"images_per_concept": 4},
  "train": {"steps": 30, "batch_size": 8},
  "classifier": {"images_per_pair": 4, "steps": 20, "gate": 0.0, "sampler": {"num_steps": 5}},
  "unlearn": {"outer_steps": 2, "S": 3, "sampler": {"num_steps": 5}},
  "eval": {"seeds_per_concept": 5, "images_per_seed": 4, "sampler": {"num_steps": 5}},
  "paths": {"base": "base", "classifier": "clf"}
}"#;

fn advanchor(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advanchor"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn advanchor")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = advanchor(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn workspace(config: &str) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("lab.json"), config).unwrap();
    tmp
}

fn with_tiny(edit: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    edit(&mut v);
    v.to_string()
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = workspace(&with_tiny(|v| v["unlearn"]["lamda"] = 3.into()));
    let o = advanchor(tmp.path(), &["--config", "lab.json", "train-base"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn missing_data_section_is_named() {
    let tmp = workspace(&with_tiny(|v| {
        v.as_object_mut().unwrap().remove("data");
    }));
    let o = advanchor(tmp.path(), &["--config", "lab.json", "train-base"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = advanchor(tmp.path(), &["--config", "nope.json", "unlearn"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn classifier_gate_failure_exits_3() {
    let tmp = workspace(&with_tiny(|v| v["classifier"]["gate"] = 1.01.into()));
    ok(tmp.path(), &["--config", "lab.json", "train-base"]);
    let o = advanchor(tmp.path(), &["--config", "lab.json", "train-classifier"]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(tmp.path().join("clf/report.json").exists());
}

#[test]
fn train_base_is_reproducible_and_refuses_overwrite() {
    let tmp = workspace(TINY);
    let p = tmp.path();
    ok(p, &["--config", "lab.json", "train-base"]);
    assert!(p.join("base/denoiser.safetensors").exists());
    let o = advanchor(p, &["--config", "lab.json", "train-base"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    ok(p, &["--config", "lab.json", "train-base", "--out", "base2"]);
    let a = fs::read_to_string(p.join("base/manifest.json")).unwrap();
    let b = fs::read_to_string(p.join("base2/manifest.json")).unwrap();
    assert_eq!(a, b);
    ok(
        p,
        &[
            "--config",
            "lab.json",
            "train-base",
            "--out",
            "base3",
            "--seed",
            "99",
        ],
    );
    let c = fs::read(p.join("base3/denoiser.safetensors")).unwrap();
    assert_ne!(fs::read(p.join("base/denoiser.safetensors")).unwrap(), c);
}

#[test]
fn pipeline_runs_are_deterministic_and_identity_evaluates_to_zero() {
    let tmp = workspace(TINY);
    let p = tmp.path();
    ok(p, &["--config", "lab.json", "train-base"]);
    ok(p, &["--config", "lab.json", "train-classifier"]);

    ok(
        p,
        &[
            "--config", "lab.json", "unlearn", "--runs", "3", "--out", "u",
        ],
    );
    let agg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("u/manifest.json")).unwrap()).unwrap();
    assert_eq!(agg["runs"].as_array().unwrap().len(), 3);
    for r in 0..3 {
        let run = p.join(format!("u/run_{r}"));
        for f in [
            "before/denoiser.safetensors",
            "after/denoiser.safetensors",
            "loss_trace.csv",
            "anchor_trace.csv",
        ] {
            assert!(run.join(f).exists(), "{f}");
        }
    }

    ok(
        p,
        &[
            "--config", "lab.json", "unlearn", "--runs", "3", "--out", "u2",
        ],
    );
    for r in 0..3 {
        let a = fs::read_to_string(p.join(format!("u/run_{r}/manifest.json"))).unwrap();
        let b = fs::read_to_string(p.join(format!("u2/run_{r}/manifest.json"))).unwrap();
        assert_eq!(a, b);
    }

    ok(p, &["evaluate", "u"]);
    let report = fs::read_to_string(p.join("u/report.csv")).unwrap();
    for concept in ["style_A", "style_B", "style_F"] {
        assert!(report.contains(concept), "{concept}");
    }
    assert!(report.contains(",erase,") && report.contains(",preserve,"));
    ok(p, &["evaluate", "u", "--out", "again"]);
    assert_eq!(
        report,
        fs::read_to_string(p.join("again/report.csv")).unwrap()
    );

    // after == before
    let run = p.join("u2/run_0");
    for f in ["denoiser.safetensors", "denoiser.json"] {
        fs::copy(run.join("before").join(f), run.join("after").join(f)).unwrap();
    }
    ok(p, &["evaluate", "u2/run_0"]);
    let rows = fs::read_to_string(run.join("report.csv")).unwrap();
    let fids: Vec<f64> = rows
        .lines()
        .filter(|l| l.contains(",fid_analog,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(!fids.is_empty());
    assert!(fids.iter().all(|&f| f == 0.0), "{fids:?}");

    ok(p, &["plot", "u"]);
    assert!(p.join("u/run_0/loss_trace.png").exists());
}

#[test]
fn cyclical_trace_visits_inputs_round_robin() {
    let tmp = workspace(&with_tiny(|v| {
        v["unlearn"]["strategy"] = "cyclical".into();
        v["unlearn"]["outer_steps"] = 3.into();
    }));
    let p = tmp.path();
    ok(p, &["--config", "lab.json", "train-base"]);
    ok(
        p,
        &[
            "--config", "lab.json", "unlearn", "--runs", "1", "--out", "c",
        ],
    );
    let trace = fs::read_to_string(p.join("c/anchor_trace.csv")).unwrap();
    let inputs: Vec<usize> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(inputs.len() >= 3);
    for w in inputs.windows(2).take(2) {
        assert_eq!(w[1], (w[0] + 1) % 3);
    }
}
