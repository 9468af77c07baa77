use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn mcfuse(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcfuse"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env_remove("MCFUSE_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> serde_json::Value {
    let o = mcfuse(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn build(out: &Path) -> PathBuf {
    let data = out.join("data");
    let kb = fixtures().join("kb.jsonl");
    let vcr = fixtures().join("vcr.jsonl");
    ok(
        out,
        &[
            "build-dataset",
            "--kb",
            kb.to_str().unwrap(),
            "--vcr",
            vcr.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
            "--dev-fraction",
            "0.3",
        ],
    );
    data
}

#[test]
fn help_version_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let help = mcfuse(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("build-dataset"));
    assert_eq!(mcfuse(dir.path(), &["--version"]).status.code(), Some(0));

    for args in [&["--bogus"][..], &["frobnicate"], &["eval"], &["--backend", "captioner=blip", "eval", "--data", "x"]] {
        let o = mcfuse(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let stderr = String::from_utf8(o.stderr).unwrap();
        assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
        let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
        assert_eq!(v["error"], "UsageError");
    }
}

#[test]
fn runtime_errors_exit_one_with_a_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = mcfuse(dir.path(), &["eval", "--data", "/definitely/missing.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"], "StorageError");
}

#[test]
fn pipeline_reports_accuracy_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let data = build(out);
    let d = data.to_str().unwrap();
    let train = ok(out, &["train", "--data", d, "--batch", "4", "--lr", "0.2", "--epochs", "1"]);
    assert_eq!(train["steps"], 8);
    let ckpt = out.join("adapters.ckpt");
    let c = ckpt.to_str().unwrap();
    let summary = ok(out, &["eval", "--data", d, "--adapters", c]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy"], summary["accuracy"]);
    assert_eq!(report["lambda"], 0.35);

    let manifest_path = out.join("run_manifest.eval.json");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "eval");
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config"]["command"]["eval"]["lambda"], 0.35);
    assert!(manifest["input_digests"].as_object().unwrap().len() >= 2);

    let predictions = std::fs::read(out.join("predictions.jsonl")).unwrap();
    let ckpt_bytes = std::fs::read(&ckpt).unwrap();
    std::fs::remove_file(out.join("predictions.jsonl")).unwrap();
    ok(out, &["replay", manifest_path.to_str().unwrap()]);
    assert_eq!(std::fs::read(out.join("predictions.jsonl")).unwrap(), predictions);
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_bytes, "inputs untouched");
}

#[test]
fn environment_variables_set_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mcfuse"))
        .args(["--echo-config", "sweep", "--data", "d.jsonl"])
        .env("MCFUSE_SEED", "17")
        .env("MCFUSE_SWEEP_GRID", "0,0.5,1")
        .env("MCFUSE_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["global"]["seed"], 17);
    assert_eq!(v["command"]["sweep"]["grid"], "0,0.5,1");
    let expected = dir.path().join("sweep.json");
    assert_eq!(v["command"]["sweep"]["report"], expected.to_str().unwrap());
    assert!(!dir.path().join("run_manifest.sweep.json").exists());
}

#[test]
fn plots_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let data = build(out);
    let d = data.to_str().unwrap();
    ok(out, &["sweep", "--data", d, "--text-channel", "joint"]);
    let csv = out.join("sweep_curve.csv");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 22);
    let a = out.join("a.svg");
    let b = out.join("b.svg");
    ok(out, &["visualize", "--input", csv.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    ok(out, &["visualize", "--input", csv.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    let svg = std::fs::read(&a).unwrap();
    assert_eq!(svg, std::fs::read(&b).unwrap());
    assert!(String::from_utf8(svg).unwrap().contains("best lambda="));

    let empty = out.join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let o = mcfuse(out, &["visualize", "--input", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(v["error"], "SchemaError");
}

#[test]
fn analysis_modes_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let data = build(out);
    let d = data.to_str().unwrap();
    ok(out, &["analyze", "--mode", "relevance", "--data", d]);
    let rel: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("analysis_relevance.json")).unwrap()).unwrap();
    let r = rel["rows"][0]["mean_relevance"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&r));
    assert_eq!(rel["schema_version"], 1);

    let summary = ok(out, &["analyze", "--mode", "attention", "--data", d, "--erase", "100", "--limit", "2"]);
    assert_eq!(summary["artifacts"], 2);
    let pngs = std::fs::read_dir(out.join("attention"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 2);

    let o = mcfuse(out, &["analyze", "--mode", "attention", "--data", d, "--erase", "196"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mcfuse(out, &["analyze", "--mode", "helpful-harmful", "--data", d, "--lambda", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn public_benchmark_formats_load() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let piqa = out.join("piqa.jsonl");
    std::fs::write(
        &piqa,
        concat!(
            r#"{"goal":"open a jar","sol1":"twist the lid","sol2":"eat the lid","label":0}"#,
            "\n",
            r#"{"goal":"dry wet hair","sol1":"use a towel","sol2":"use a fork","label":0}"#,
            "\n"
        ),
    )
    .unwrap();
    let p = piqa.to_str().unwrap();
    let s = ok(
        out,
        &["--backend", "text_scorer=stub", "eval", "--data", p, "--format", "piqa", "--n-choices", "2", "--lambda", "0"],
    );
    assert_eq!(s["evaluated"], 2);
    let o = mcfuse(out, &["eval", "--data", p, "--format", "piqa"]);
    assert_eq!(o.status.code(), Some(2), "--format needs --n-choices");
}
