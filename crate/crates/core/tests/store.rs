use std::collections::BTreeMap;

use mot_core::model::{init_params, ModelConfig};
use mot_core::orchestrator::RoundSchedule;
use mot_core::store::*;
use mot_core::train::TrainConfig;
use mot_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, context_length: 32, ..ModelConfig::default() }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = init_params(&tiny(), 3).unwrap();
    let path = dir.path().join("a.motc");
    let digest = save_checkpoint(&p, &path).unwrap();
    assert_eq!(digest, checkpoint_digest(&p));
    let q = load_checkpoint(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(digest, checkpoint_digest(&q));
    assert!(!path.with_extension("partial").exists());
}

#[test]
fn every_flipped_byte_is_detected() {
    let p = init_params(&tiny(), 4).unwrap();
    let bytes = encode_checkpoint(&p);
    for i in (0..bytes.len()).step_by(97).chain([0, 5, bytes.len() - 1]) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Corruption(_))), "byte {i}");
    }
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));
    assert!(matches!(decode_checkpoint(&[]), Err(Error::Corruption(_))));
}

#[test]
fn digests_identify_values() {
    let a = init_params(&tiny(), 5).unwrap();
    let b = init_params(&tiny(), 5).unwrap();
    assert_eq!(checkpoint_digest(&a), checkpoint_digest(&b));
    let mut c = a.clone();
    c.values[0] = f32::from_bits(c.values[0].to_bits() ^ 1);
    assert_ne!(checkpoint_digest(&a), checkpoint_digest(&c));
}

#[test]
fn checkpoint_from_another_config_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.motc");
    save_checkpoint(&init_params(&tiny(), 1).unwrap(), &path).unwrap();
    assert!(load_checkpoint_for(&path, &tiny()).is_ok());
    let other = ModelConfig { d_model: 16, ..tiny() };
    assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::Incompatible { .. })));
}

fn manifest() -> RunManifest {
    let p = init_params(&tiny(), 2).unwrap();
    RunManifest {
        run_id: "r1".into(),
        regime: Regime::Mot,
        tool_version: TOOL_VERSION.into(),
        seed_root: 7,
        model: tiny(),
        train: TrainConfig::default(),
        schedule: RoundSchedule::with_pool(&["a", "b"]),
        task: None,
        teachers: vec![],
        eval: None,
        base_digest: checkpoint_digest(&p),
        corpus_digests: BTreeMap::from([("a".to_string(), "00".to_string())]),
        checkpoints: vec![CheckpointRecord { label: "base".into(), step: 0, digest: checkpoint_digest(&p) }],
        budget: Budget { branch_steps: 500, sequential_steps: 250 },
        inputs: BTreeMap::new(),
        notes: vec!["n".into()],
    }
}

#[test]
fn manifest_round_trips_and_reports_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest();
    let text = m.to_json().unwrap();
    assert!(text.contains("\"MOT\""));
    assert_eq!(RunManifest::from_json(&text).unwrap(), m);
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    assert_eq!(RunManifest::load(&path).unwrap(), m);
    assert!(m.digest_mismatches(&m).is_empty());
    let mut other = m.clone();
    other.checkpoints[0].digest = "ff".into();
    other.checkpoints.push(CheckpointRecord { label: "round-1".into(), step: 50, digest: "aa".into() });
    assert_eq!(m.digest_mismatches(&other), ["base", "round-1"]);
}

#[test]
fn metrics_append_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m").join("metrics.jsonl");
    let recs = [
        MetricRecord { run_id: "r".into(), stream: Stream::TrainLoss, step: Some(1), label: None, payload: serde_json::json!({"loss": 2.5}) },
        MetricRecord { run_id: "r".into(), stream: Stream::Eval, step: None, label: Some("round-1".into()), payload: serde_json::json!(0.4) },
    ];
    {
        let mut w = MetricsWriter::open(&path).unwrap();
        w.append(&recs[0]).unwrap();
    }
    MetricsWriter::open(&path).unwrap().append(&recs[1]).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), recs);
    std::fs::write(&path, "{\"run_id\":\"r\"}\n").unwrap();
    assert!(matches!(read_metrics(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn run_dirs_reject_unsafe_ids() {
    let dir = tempfile::tempdir().unwrap();
    let rd = RunDir::new(dir.path(), "exp-1").unwrap();
    rd.create().unwrap();
    assert!(rd.checkpoint("round-2").ends_with("exp-1/checkpoints/round-2.motc"));
    assert!(rd.root.join("checkpoints").is_dir());
    for bad in ["", "../x", "a/b", ".hidden"] {
        assert!(RunDir::new(dir.path(), bad).is_err(), "{bad}");
    }
}
