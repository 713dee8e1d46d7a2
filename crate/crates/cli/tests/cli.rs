use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use moe_align::pipeline::{PipelineConfig, RunSummary};
use moe_align::routing::LayerRange;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-align"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flops_stage_writes_the_reference_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--stage", "flops", "--out", path(dir.path())]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("flops/flops.json")).unwrap())
            .unwrap();
    assert_eq!(doc["gflops"]["base"], "6597.1");
    assert_eq!(doc["gflops"]["lora"], "103.1");
}

#[test]
fn missing_upstream_artifact_fails_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["--stage", "pretrain", "--out", path(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("pretrain.jsonl") && err.contains("gen-data"),
        "{err}"
    );
}

#[test]
fn dumped_config_carries_overrides_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.json");
    let out = cli(&[
        "--seed",
        "4",
        "--lambda",
        "0.5",
        "--k-experts",
        "3",
        "--ablate",
        "all-layers",
        "--dump-config",
        path(&p),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cfg = PipelineConfig::load(&p).unwrap();
    assert_eq!((cfg.train.seed, cfg.train.lambda, cfg.train.k), (4, 0.5, 3));
    assert!(cfg.train.ablation.all_layers && !cfg.train.ablation.no_align);
    assert_eq!(cfg.method_name(), "ra-moe-all-layers-lambda0.5-seed4");

    let again = dir.path().join("again.json");
    assert!(cli(&["--config", path(&p), "--dump-config", path(&again)])
        .status
        .success());
    assert_eq!(PipelineConfig::load(&again).unwrap(), cfg);
}

#[test]
fn bad_config_and_missing_stage_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"train": {"lambda": -1.0}}"#).unwrap();
    assert!(!cli(&["--config", path(&p), "--stage", "flops"])
        .status
        .success());
    assert!(!cli(&[]).status.success());
}

#[test]
fn compare_prints_gains_against_sft() {
    let dir = tempfile::tempdir().unwrap();
    let summary = |method: &str, acc: f64, div: f64| RunSummary {
        method: method.into(),
        seed: Some(0),
        accuracy_src: 1.0,
        accuracy_tgt: acc,
        ci_proportion: 0.3,
        mid_layers: LayerRange(1, 2),
        divergence: vec![0.2, div, div, 0.3],
        mid_divergence: div,
        selection_rate: 0.5,
        eval_set_hash: "same".into(),
        relative_gain: None,
        divergence_delta: None,
    };
    for (name, acc, div) in [("sft-seed0", 0.5, 0.02), ("ra-moe-seed0", 0.6, 0.01)] {
        let d = dir.path().join(name);
        fs::create_dir(&d).unwrap();
        fs::write(
            d.join("summary.json"),
            serde_json::to_string(&summary(name, acc, div)).unwrap(),
        )
        .unwrap();
    }
    let out = cli(&[
        "--compare",
        path(&dir.path().join("sft-seed0")),
        path(&dir.path().join("ra-moe-seed0")),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("method\t"));
    assert!(lines[1].starts_with("sft-seed0\t") && lines[1].contains("+0.0000"));
    assert!(
        lines[2].starts_with("ra-moe-seed0\t")
            && lines[2].contains("+0.2000")
            && lines[2].contains("-0.010000")
    );
}
