use std::fs;
use std::path::Path;

use moe_align::error::Error;
use moe_align::pipeline::*;

fn small(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        run_dir: dir.to_path_buf(),
        ..PipelineConfig::default()
    };
    cfg.corpus.n_pretrain_src = 3000;
    cfg.corpus.n_pretrain_tgt = 300;
    cfg.corpus.n_task = 40;
    cfg.corpus.n_eval = 24;
    cfg.corpus.n_general_eval = 12;
    cfg.model.d_model = 16;
    cfg.model.d_expert = 16;
    cfg.model.n_layers = 4;
    cfg.model.n_experts = 4;
    cfg.pretrain.epochs = 2;
    cfg.train.epochs = 1;
    cfg.train.k = 2;
    cfg.train.adapter_rank = 2;
    cfg.eval.monitor_size = 8;
    cfg
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn two_runs_produce_identical_manifests_and_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = run_all(&small(a.path())).unwrap();
    let db = run_all(&small(b.path())).unwrap();
    assert_eq!(da.len(), db.len());
    for (x, y) in da.iter().zip(&db) {
        assert_eq!(
            read(x.join("manifest.json")),
            read(y.join("manifest.json")),
            "{}",
            x.display()
        );
    }
    let method = small(a.path()).method_name();
    let ma = read_metrics(a.path().join("finetune").join(&method)).unwrap();
    assert_eq!(
        ma,
        read_metrics(b.path().join("finetune").join(&method)).unwrap()
    );
    assert!(ma.last().unwrap().selection_rate.is_some());

    let table: Vec<RunSummary> =
        serde_json::from_str(&read(a.path().join("report/comparison.json"))).unwrap();
    let names: Vec<&str> = table.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["base", method.as_str()]);
    let csv = read(a.path().join("report/divergence.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,method,divergence");
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert!(lines[1].starts_with("0,base,") && lines[5].starts_with(&format!("0,{method},")));
}

#[test]
fn finetune_without_identify_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_stage(Stage::GenData, &cfg).unwrap();
    let err = run_stage(Stage::Finetune, &cfg).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)));
    let msg = err.to_string();
    assert!(
        msg.contains("task_experts.json") && msg.contains("identify"),
        "{msg}"
    );
}

#[test]
fn flops_stage_reports_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage(Stage::Flops, &small(dir.path())).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&read(out.join("flops.json"))).unwrap();
    assert_eq!(doc["gflops"]["base"], "6597.1");
    assert_eq!(doc["gflops"]["lora"], "103.1");
    assert_eq!(doc["flops"]["align"], 2 * 4096 * 16 * 64);
}

#[test]
fn changed_upstream_config_is_refused_and_reruns_get_fresh_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let first = run_stage(Stage::GenData, &cfg).unwrap();
    let mut changed = cfg.clone();
    changed.corpus.seed = 9;
    assert!(matches!(
        run_stage(Stage::Pretrain, &changed),
        Err(Error::ConfigMismatch { .. })
    ));

    // A second run of the same stage never overwrites the first one.
    let before = read(first.join("task.jsonl"));
    let second = run_stage(Stage::GenData, &changed).unwrap();
    assert_ne!(first, second);
    assert!(second
        .file_name()
        .unwrap()
        .to_string_lossy()
        .starts_with("gen-data.rerun-"));
    assert_eq!(read(first.join("task.jsonl")), before);

    // Tampering with an artifact is detected through its hash.
    fs::write(first.join("pretrain.jsonl"), "").unwrap();
    assert!(matches!(
        run_stage(Stage::Pretrain, &cfg),
        Err(Error::ConfigMismatch { .. })
    ));
}

#[test]
fn stage_hashes_track_only_upstream_sections() {
    let cfg = PipelineConfig::default();
    let mut t = cfg.clone();
    t.train.lambda = 0.5;
    assert_eq!(
        cfg.stage_hash(Stage::Identify).unwrap(),
        t.stage_hash(Stage::Identify).unwrap()
    );
    assert_ne!(
        cfg.stage_hash(Stage::Finetune).unwrap(),
        t.stage_hash(Stage::Finetune).unwrap()
    );
    let mut c = cfg.clone();
    c.comments.insert("x".into(), "y".into());
    for s in Stage::ALL {
        assert_eq!(cfg.stage_hash(s).unwrap(), c.stage_hash(s).unwrap());
    }
}

#[test]
fn compare_runs_requires_two_summaries() {
    let dir = tempfile::tempdir().unwrap();
    assert!(compare_runs(&[dir.path().to_path_buf()]).is_err());
    let missing = vec![dir.path().join("a"), dir.path().join("b")];
    assert!(matches!(
        compare_runs(&missing),
        Err(Error::MissingArtifact(_))
    ));
}
