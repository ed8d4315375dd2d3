//! Integration tests for the CLI-facing pipeline commands that do not need
//! training: artifact wiring, digest checks, extraction, knowledge scoring.

use lamo::config::RunConfig;
use lamo::corpus::{generate_synthetic_corpus, write_corpus};
use lamo::pipeline::Pipeline;
use lamo::Error;
use std::path::Path;

fn tiny_config(dir: &Path) -> RunConfig {
    let mut config = RunConfig::default();
    config.out_dir = dir.to_path_buf();
    config.synthetic_patients = 12;
    config.synthetic_diseases = 10;
    config.synthetic_meds = 12;
    config.group_k = 3;
    config
}

#[test]
fn gen_synthetic_writes_declared_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(tiny_config(dir.path()));
    pipeline.cmd_gen_synthetic().unwrap();
    for name in [
        "config.echo.cfg",
        "corpus.jsonl",
        "rule_table.json",
        "stats.json",
        "splits.json",
        "knowledge_items.tsv",
        "run_meta.jsonl",
    ] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
}

#[test]
fn missing_artifacts_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(tiny_config(dir.path()));
    // train before anything exists: the group map comes first.
    let err = pipeline.cmd_train().unwrap_err();
    match err {
        Error::MissingArtifact { producer, .. } => assert_eq!(producer, "group"),
        other => panic!("unexpected error {other}"),
    }
    pipeline.cmd_gen_synthetic().unwrap();
    pipeline.cmd_group().unwrap();
    let err = pipeline.cmd_train().unwrap_err();
    match err {
        Error::MissingArtifact { producer, .. } => assert_eq!(producer, "warm"),
        other => panic!("unexpected error {other}"),
    }
    // eval requires recommendations.
    let err = pipeline.cmd_eval().unwrap_err();
    match err {
        Error::MissingArtifact { producer, .. } => assert_eq!(producer, "recommend"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn artifacts_from_other_configs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(tiny_config(dir.path()));
    pipeline.cmd_gen_synthetic().unwrap();
    pipeline.cmd_group().unwrap();
    pipeline.cmd_build_instructions().unwrap();

    // Same directory, different config: instance artifacts must be refused.
    let mut other = tiny_config(dir.path());
    other.master_seed += 1;
    let other_pipeline = Pipeline::new(other);
    let err = other_pipeline.cmd_warm().unwrap_err();
    assert!(
        matches!(err, Error::ArtifactDigestMismatch { .. }),
        "unexpected error {err}"
    );
}

#[test]
fn extract_fills_note_fields_from_raw_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.note_budget_chars = 200;
    let pipeline = Pipeline::new(config);

    // Base corpus with empty note fields.
    let (mut records, _) = generate_synthetic_corpus(3, 6, 10, 12);
    for r in &mut records {
        r.note = Default::default();
    }
    let base = dir.path().join("base.jsonl");
    write_corpus(&records, &base).unwrap();

    // Raw discharge summaries for two visits.
    let raw = dir.path().join("raw.jsonl");
    let note_text = "History of Present Illness:\nFell at home today. Reports dizziness.\nPast Medical History:\nHypertension.\nAllergies: codeine\nMedications on Admission:\nLisinopril 10mg QD, Aspirin 81 QD\nDischarge Medications:\nWarfarin\n";
    let lines: Vec<String> = records
        .iter()
        .take(2)
        .map(|r| {
            serde_json::json!({
                "patient_id": r.patient_id,
                "visit_index": r.visit_index,
                "text": note_text,
            })
            .to_string()
        })
        .collect();
    std::fs::write(&raw, lines.join("\n")).unwrap();

    pipeline.cmd_extract(&raw, &base).unwrap();
    let (extracted, _) = lamo::corpus::load_corpus(dir.path().join("corpus.jsonl")).unwrap();
    let filled = &extracted[0];
    assert!(filled.note.hpi.contains("Fell at home"));
    assert_eq!(filled.note.allergies, vec!["codeine"]);
    assert_eq!(filled.note.meds_on_admission, vec!["Lisinopril", "Aspirin"]);
    // The discharge section of the raw note is never extracted.
    assert!(!format!("{:?}", filled.note).contains("Warfarin"));
}

#[test]
fn config_echo_parses_back_to_same_digest() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(tiny_config(dir.path()));
    pipeline.cmd_gen_synthetic().unwrap();
    let echoed = std::fs::read_to_string(dir.path().join("config.echo.cfg")).unwrap();
    let parsed = RunConfig::parse(&echoed, "echo").unwrap();
    assert_eq!(parsed.digest(), pipeline.digest);
}
