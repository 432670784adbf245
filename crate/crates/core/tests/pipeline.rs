mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use spinalsum::pipeline::{
    cmd_align, cmd_extract, cmd_report, cmd_segment, run_all, run_stage, segment_corpus, ExperimentConfig, Stage,
    EXTRACTS, LABELS, METRICS, REPORT, SEGMENTED,
};
use spinalsum::Error;

fn snapshot(dir: &Path) -> HashMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn mini_corpus_units_match_hand_counts() {
    let golden: HashMap<String, usize> =
        serde_json::from_str(&fs::read_to_string(common::data_dir().join("mini/golden_units.json")).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (chapters, stats) = segment_corpus(&common::mini_config(dir.path().into())).unwrap();
    assert_eq!(chapters.len(), golden.len());
    for chapter in &chapters {
        chapter.validate().unwrap();
        assert_eq!(chapter.units.len(), golden[&chapter.chapter_id], "{}", chapter.chapter_id);
    }
    assert_eq!(stats.truncated, 0);
}

#[test]
fn deleting_downstream_artifacts_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::mini_config(dir.path().join("out"));
    run_all(&cfg).unwrap();
    let first = snapshot(&dir.path().join("out"));
    for name in [EXTRACTS, METRICS, REPORT] {
        fs::remove_file(dir.path().join("out").join(name)).unwrap();
    }
    for stage in [Stage::Extract, Stage::Evaluate, Stage::Report] {
        run_stage(&cfg, stage).unwrap();
    }
    assert_eq!(first, snapshot(&dir.path().join("out")));
}

#[test]
fn changed_upstream_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::mini_config(dir.path().join("out"));
    cmd_segment(&cfg).unwrap();
    let mut changed = cfg.clone();
    changed.segment.min_tokens = 3;
    match cmd_align(&changed) {
        Err(Error::FingerprintMismatch { path, .. }) => assert!(path.ends_with(SEGMENTED)),
        other => panic!("expected a fingerprint mismatch, got {other:?}"),
    }
}

#[test]
fn missing_artifact_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::mini_config(dir.path().join("out"));
    cmd_segment(&cfg).unwrap();
    let err = cmd_extract(&cfg).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { .. }), "{err}");
    assert!(err.to_string().contains("model.ckpt"), "{err}");
    let err = cmd_report(&cfg).unwrap_err();
    assert!(err.to_string().contains("metrics.jsonl"), "{err}");
    assert!(!dir.path().join("out").join(LABELS).exists());
}

#[test]
fn config_errors_carry_field_paths() {
    let base = r#"
        [paths]
        corpus = "c.jsonl"
        parses = "p.txt"
        out_dir = "out"
    "#;
    let err = ExperimentConfig::from_toml(&format!("{base}\n[schedule]\nbatch_size = \"eight\"\n"), ".").unwrap_err();
    assert!(err.to_string().contains("schedule.batch_size"), "{err}");
    let err = ExperimentConfig::from_toml(&format!("{base}\n[model]\nnum_heads = 5\n"), ".").unwrap_err();
    assert!(err.to_string().contains("model"), "{err}");
    let err = ExperimentConfig::from_toml(&format!("{base}\n[segment]\nmin_tokenz = 3\n"), ".").unwrap_err();
    assert!(err.to_string().contains("segment"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn seed_enters_fingerprints_from_training_on() {
    let dir = tempfile::tempdir().unwrap();
    let a = common::mini_config(dir.path().join("a"));
    let mut b = common::mini_config(dir.path().join("b"));
    b.seed = 99;
    assert_ne!(a.fingerprint(Stage::Train).unwrap(), b.fingerprint(Stage::Train).unwrap());
    assert_eq!(a.fingerprint(Stage::Align).unwrap(), b.fingerprint(Stage::Align).unwrap());
}
