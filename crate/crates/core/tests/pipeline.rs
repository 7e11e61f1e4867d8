//! End-to-end behaviour of the harness on a very small configuration.

use tdnnas::harness::checkpoint::{load_checkpoint, supernet_checkpoint, supernet_from_checkpoint, Checkpoint};
use tdnnas::harness::formats::{from_jsonl, to_jsonl, CollectedRecord};
use tdnnas::harness::generate_dataset;
use tdnnas::harness::pipeline::{checkpoint_path, collect_records, run_pipeline, train_supernet, PipelineConfig};
use tdnnas::space::Stage;
use tdnnas::supernet::SupernetConfig;
use tdnnas::Error;

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
    cfg.search.budget = 2e6;
    cfg.search.evolution.population = 8;
    cfg.search.evolution.generations = 3;
    cfg
}

#[test]
fn five_stage_checkpoints_round_trip_byte_identically() {
    let cfg = tiny();
    let data = generate_dataset(&cfg.dataset).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (weights, reports) = train_supernet(&cfg, &data, None, None, Some(dir.path())).unwrap();
    assert_eq!(reports.iter().map(|r| r.stage).collect::<Vec<_>>(), Stage::ALL.to_vec());
    for stage in Stage::ALL {
        let path = checkpoint_path(dir.path(), stage);
        let bytes = std::fs::read(&path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.stage, Some(stage));
        assert_eq!(ck.to_bytes().unwrap(), bytes);
    }
    let last = load_checkpoint(&checkpoint_path(dir.path(), Stage::Width2)).unwrap();
    assert_eq!(supernet_from_checkpoint(&last).unwrap(), weights);
}

#[test]
fn resuming_after_depth_matches_an_uninterrupted_run() {
    let cfg = tiny();
    let data = generate_dataset(&cfg.dataset).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (_, first) = train_supernet(&cfg, &data, None, Some(Stage::Depth), Some(dir.path())).unwrap();
    assert_eq!(first.last().unwrap().stage, Stage::Depth);
    assert!(!checkpoint_path(dir.path(), Stage::Width1).exists());

    let ck = load_checkpoint(&checkpoint_path(dir.path(), Stage::Depth)).unwrap();
    let (resumed, rest) = train_supernet(&cfg, &data, Some(&ck), None, None).unwrap();
    assert_eq!(rest.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![Stage::Width1, Stage::Width2]);

    let (straight, _) = train_supernet(&cfg, &data, None, None, None).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn resume_without_stage_tag_is_rejected() {
    let cfg = tiny();
    let data = generate_dataset(&cfg.dataset).unwrap();
    let w = tdnnas::supernet::build(&cfg.supernet, 0).unwrap();
    let ck = supernet_checkpoint(&w, None).unwrap();
    assert!(train_supernet(&cfg, &data, Some(&ck), None, None).is_err());
}

#[test]
fn truncated_checkpoint_file_is_a_structured_error() {
    let cfg = tiny();
    let w = tdnnas::supernet::build(&cfg.supernet, 0).unwrap();
    let bytes = supernet_checkpoint(&w, Some(Stage::Largest)).unwrap().to_bytes().unwrap();
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    assert!(err.to_string().contains("truncated"));
}

#[test]
fn every_collected_record_carries_a_recalibration_event() {
    let cfg = tiny();
    let data = generate_dataset(&cfg.dataset).unwrap();
    let w = tdnnas::supernet::build(&cfg.supernet, 0).unwrap();
    let space = cfg.space(Stage::Width2).unwrap();
    let records = collect_records(&w, &space, &data, &cfg.eval, 4, 7).unwrap();
    for r in &records {
        let ev = r.recalibration.as_ref().unwrap();
        assert_eq!(ev.utterances, 16);
        assert!(ev.bn_layers > 0);
        assert!((0.0..=1.0).contains(&r.record.eer));
    }
    let back: Vec<CollectedRecord> = from_jsonl(&to_jsonl(&records).unwrap()).unwrap();
    assert_eq!(back, records);
}

#[test]
fn full_pipeline_is_reproducible() {
    let cfg = tiny();
    let a = run_pipeline(&cfg, None).unwrap();
    let b = run_pipeline(&cfg, None).unwrap();
    assert_eq!(a.search.to_json(), b.search.to_json());
    assert_eq!(a.records, b.records);
    let best = a.search.best_metrics.as_ref().expect("a feasible subnet");
    assert!(best.cost <= cfg.search.budget);
}

#[test]
fn config_file_parses_and_rejects_mismatched_channels() {
    let cfg = tiny();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
    let mut bad = cfg.clone();
    bad.dataset.feature_dim = 7;
    assert!(PipelineConfig::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
}
