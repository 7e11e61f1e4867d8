use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tdnnas::harness::pipeline::PipelineConfig;
use tdnnas::supernet::SupernetConfig;

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn tdnnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdnnas")).args(args).output().expect("binary runs")
}

fn json_ok(args: &[&str]) -> Value {
    let out = tdnnas(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn width2_space_size() {
    let v = json_ok(&["space", "size", "--stage", "width2"]);
    assert_eq!(v["size"], 4_066_875);
}

#[test]
fn base_macs_near_reference() {
    let spec = repo("configs/specs/base.json");
    let v = json_ok(&["cost", "macs", "--spec", spec.to_str().unwrap()]);
    let macs = v["macs"].as_f64().unwrap();
    assert!((macs / 1.45e9 - 1.0).abs() <= 0.10, "{macs}");
}

#[test]
fn shipped_specs_have_known_parameter_counts() {
    for (file, params) in [("a_max", 7_560_384), ("mobile", 2_421_312)] {
        let spec = repo(&format!("configs/specs/{file}.json"));
        let v = json_ok(&["cost", "params", "--spec", spec.to_str().unwrap()]);
        assert_eq!(v["params"], params, "{file}");
    }
}

#[test]
fn malformed_spec_gives_structured_error() {
    let out = tdnnas(&["cost", "macs", "--spec", "{\"depth\":"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(err["error"].as_str().unwrap().contains("spec"));
    assert!(err["causes"].is_array());

    let invalid = r#"{"depth":3,"kernels":[5,3,3,3],"widths":[512,512,512,512],"width_back":1537}"#;
    assert_eq!(tdnnas(&["cost", "macs", "--spec", invalid]).status.code(), Some(1));
}

#[test]
fn shipped_toy_config_is_the_default() {
    let text = std::fs::read_to_string(repo("configs/toy.json")).unwrap();
    assert_eq!(PipelineConfig::from_json(&text).unwrap(), PipelineConfig::default());
}

fn tiny() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.supernet = SupernetConfig {
        input_channels: 6,
        max_front_width: 48,
        max_back_width: 144,
        attention_channels: 8,
        embedding_dim: 16,
        frames: 16,
        ..SupernetConfig::toy()
    };
    cfg.dataset.n_speakers = 4;
    cfg.dataset.utterances_per_speaker = 4;
    cfg.dataset.eval_speakers = 3;
    cfg.dataset.eval_utterances_per_speaker = 3;
    cfg.dataset.feature_dim = 6;
    cfg.dataset.frames = 16;
    cfg.dataset.max_shift = 4;
    cfg.dataset.target_trials = 9;
    cfg.dataset.nontarget_trials = 18;
    cfg.train.epochs_per_stage = 1;
    cfg.train.cycle_epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.segment_frames_largest = 12;
    cfg.train.segment_frames = 12;
    cfg.eval.segment_frames = 12;
    cfg.eval.recalibration_utterances = 16;
    cfg.eval.recalibration_batch = 8;
    cfg.collect.n_records = 12;
    cfg.predictor.epochs = 5;
    cfg.search.frames = 16;
    cfg.search.evolution.population = 8;
    cfg.search.evolution.generations = 3;
    cfg
}

#[test]
fn toy_pipeline_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    std::fs::write(p("cfg.json"), serde_json::to_string(&tiny()).unwrap()).unwrap();
    let cfg = p("cfg.json");
    let base = ["--config", cfg.as_str(), "--seed", "5"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        json_ok(&args)
    };

    let trained = run(&["train", "progressive", "--out", &p("ck")]);
    assert_eq!(trained["stages"].as_array().unwrap().len(), 5);
    let ckpt = p("ck/supernet-width2.ckpt");
    run(&["collect-records", "--checkpoint", &ckpt, "--out", &p("records.jsonl")]);
    assert_eq!(std::fs::read_to_string(p("records.jsonl")).unwrap().lines().count(), 12);
    run(&["predictor", "train", "--records", &p("records.jsonl"), "--out", &p("model.ckpt")]);

    let search = |out: &str| run(&["search", "mpea", "--predictor", &p("model.ckpt"), "--budget-macs", "600e6", "--out", &p(out)]);
    let first = search("a.json");
    let spec = serde_json::to_string(&first["best_spec"]).unwrap();
    let macs = json_ok(&["--config", &cfg, "cost", "macs", "--spec", &spec, "--frames", "16"]);
    assert!(macs["macs"].as_f64().unwrap() <= 600e6);
    search("b.json");
    assert_eq!(std::fs::read(p("a.json")).unwrap(), std::fs::read(p("b.json")).unwrap());

    let scored = run(&["eval", "trials", "--checkpoint", &ckpt, "--spec", &spec]);
    assert_eq!(scored["trials"], 27);
    assert!((0.0..=1.0).contains(&scored["metrics"]["eer"].as_f64().unwrap()));
}

#[test]
fn grid_latency_table_covers_grid_members() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("grid.json");
    let table = table.to_str().unwrap();
    json_ok(&["cost", "latency-table", "--grid", "--out", table]);
    let spec = r#"{"depth":3,"kernels":[3,3,3,3],"widths":[200,200,200,200],"width_back":600}"#;
    let v = json_ok(&["cost", "estimate", "--spec", spec, "--table", table]);
    assert!(v["latency_ms"].as_f64().unwrap() > 0.0);
}
