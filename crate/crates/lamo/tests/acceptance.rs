//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values (visible with `--nocapture`; the harness result line
//! doubles as the per-criterion verdict).

use lamo::config::RunConfig;
use lamo::corpus::{
    self, build_history, generate_synthetic_corpus, group_by_patient, medication_vocabulary,
    split_corpus,
};
use lamo::eval::{
    self, knowledge_test, visit_metrics, KnowledgeItem, KnowledgeSetting, MetricRow,
    RecommendationResult, Relation, RelationClassifier,
};
use lamo::grouping::{build_cooccurrence, cluster_medications};
use lamo::instruction::{AblationMask, PromptTemplate, Renderer, TitleMode};
use lamo::lora::{init_adapter_set, merge_adapter, AdapterRegistry, LoraAdapterSet, LoraConfig};
use lamo::model::{
    forward_logits, gradcheck, answer_loss_targets, ModelConfig, ModelParams, Tokenizer, BOS,
};
use lamo::pipeline::Pipeline;
use lamo::rng::Rng;
use lamo::train::{lr_at_step, train_group, StopReason, TrainConfig};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

/// Serializes the compute-heavy criteria so they do not oversubscribe the
/// machine when the harness runs tests in parallel.
static HEAVY: Mutex<()> = Mutex::new(());

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

// ---------------------------------------------------------------------
// Criterion 1: metric oracle over every (P, T) pair of a 5-element universe
// ---------------------------------------------------------------------

/// Independent brute-force metrics from bitmask subsets. Counts come from
/// bit operations; the formulas are written out separately from the
/// implementation under test.
fn oracle_metrics(p_mask: u32, t_mask: u32) -> (f64, f64, f64, f64, f64) {
    let inter = (p_mask & t_mask).count_ones() as f64;
    let union = (p_mask | t_mask).count_ones() as f64;
    let p_size = p_mask.count_ones() as f64;
    let t_size = t_mask.count_ones() as f64;
    let precision = if p_size == 0.0 { 0.0 } else { inter / p_size };
    let recall = if t_size == 0.0 { 0.0 } else { inter / t_size };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let jaccard = if union == 0.0 { 0.0 } else { inter / union };
    (f1, jaccard, recall, precision, p_size)
}

#[test]
fn criterion_01_metric_oracle_exhaustive() {
    let start = Instant::now();
    let universe = ["a", "b", "c", "d", "e"];
    let set_from = |mask: u32| -> BTreeSet<String> {
        universe
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, s)| s.to_string())
            .collect()
    };
    let mut checked = 0;
    for p_mask in 0..32u32 {
        for t_mask in 0..32u32 {
            let row = visit_metrics(&RecommendationResult {
                patient_id: "p".into(),
                visit_index: 0,
                predicted: set_from(p_mask),
                truth: set_from(t_mask),
                margins: BTreeMap::new(),
            });
            let (f1, jaccard, recall, precision, n_med) = oracle_metrics(p_mask, t_mask);
            assert_eq!(row.f1, f1, "f1 mismatch at P={p_mask:05b} T={t_mask:05b}");
            assert_eq!(row.jaccard, jaccard, "jaccard mismatch at P={p_mask:05b} T={t_mask:05b}");
            assert_eq!(row.recall, recall);
            assert_eq!(row.precision, precision);
            assert_eq!(row.n_med, n_med);
            assert!(
                (row.jaccard - row.f1 / (2.0 - row.f1)).abs() < 1e-12,
                "identity broken at P={p_mask:05b} T={t_mask:05b}"
            );
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    assert_eq!(checked, 1024);
    assert!(elapsed.as_secs_f64() < 1.0, "oracle took {elapsed:?}");
    println!(
        "PASS criterion 1: metric oracle exact on {checked} pairs, jaccard identity to 1e-12, {:.0} ms",
        elapsed.as_secs_f64() * 1000.0
    );
}

// ---------------------------------------------------------------------
// Criterion 2: LoRA identity and merge equivalence
// ---------------------------------------------------------------------

#[test]
fn criterion_02_lora_identity_and_merge() {
    let config = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 64,
        context_length: 64,
        seed: 7,
    };
    let mut rng = Rng::new(99);

    // Fresh adapters leave logits exactly equal to the base.
    let model: ModelParams<f32> = ModelParams::init(config).unwrap();
    let lora = LoraConfig::default();
    let fresh = init_adapter_set::<f32>(&config, lora, 0, 5).unwrap();
    let tokens: Vec<u32> = "identity check".bytes().map(u32::from).collect();
    let base = forward_logits(&model, None, &tokens).unwrap();
    let adapted = forward_logits(&model, Some(&fresh), &tokens).unwrap();
    assert_eq!(base.data, adapted.data, "fresh adapters must be exact identity");

    // Merge equivalence on 100 random tiny cases.
    let mut max_diff = 0.0f32;
    for case in 0..100 {
        let case_config = ModelConfig {
            seed: case as u64,
            ..config
        };
        let mut model: ModelParams<f32> = ModelParams::init(case_config).unwrap();
        for l in &mut model.layers {
            l.o_proj.data.iter_mut().for_each(|v| *v = (rng.gauss() * 0.05) as f32);
            l.ffn_out.data.iter_mut().for_each(|v| *v = (rng.gauss() * 0.05) as f32);
        }
        let mut set = init_adapter_set::<f32>(&case_config, lora, 0, 1000 + case as u64).unwrap();
        for ad in &mut set.adapters {
            ad.b.data.iter_mut().for_each(|v| *v = (rng.gauss() * 0.05) as f32);
        }
        let toks: Vec<u32> = (0..12).map(|i| ((case * 7 + i * 13) % 250) as u32).collect();
        let adapted = forward_logits(&model, Some(&set), &toks).unwrap();

        let mut merged = model.clone();
        for (li, layer) in merged.layers.iter_mut().enumerate() {
            layer.q_proj = merge_adapter(&layer.q_proj, set.q_adapter(li), &lora);
            layer.v_proj = merge_adapter(&layer.v_proj, set.v_adapter(li), &lora);
        }
        let merged_logits = forward_logits(&merged, None, &toks).unwrap();
        for (a, b) in adapted.data.iter().zip(merged_logits.data.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    assert!(max_diff < 1e-5, "merged vs adapted forward differ by {max_diff}");
    println!("PASS criterion 2: zero-init identity exact; merge-vs-adapted max abs diff {max_diff:.2e} over 100 cases");
}

// ---------------------------------------------------------------------
// Criterion 3: adapter gradients vs central finite differences
// ---------------------------------------------------------------------

#[test]
fn criterion_03_gradient_check() {
    let start = Instant::now();
    let config = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 64,
        context_length: 96,
        seed: 31,
    };
    let mut model: ModelParams<f64> = ModelParams::init(config).unwrap();
    let mut rng = Rng::new(404);
    for l in &mut model.layers {
        l.o_proj.data.iter_mut().for_each(|v| *v = rng.gauss() * 0.05);
        l.ffn_out.data.iter_mut().for_each(|v| *v = rng.gauss() * 0.05);
    }
    let lora = LoraConfig {
        dropout_p: 0.0,
        ..Default::default()
    };
    let mut set = init_adapter_set::<f64>(&config, lora, 0, 77).unwrap();
    for ad in &mut set.adapters {
        ad.b.data.iter_mut().for_each(|v| *v = rng.gauss() * 0.05);
    }
    let mut tokens = vec![BOS];
    tokens.extend("Candidate drug: Velanmab.\n### Answer: Yes.".bytes().map(u32::from));
    let targets = answer_loss_targets(&tokens, tokens.len() - 5);
    let report =
        gradcheck::finite_difference_check(&model, &set, &tokens, &targets, gradcheck::FD_EPS)
            .unwrap();
    let elapsed = start.elapsed();
    // Every adapter parameter: 2 layers x {q,v} x (8x32 A + 32x8 B).
    assert_eq!(report.checked, 2 * 2 * (8 * 32 + 32 * 8));
    assert!(
        report.max_rel_err < 1e-4,
        "max relative error {} at {}",
        report.max_rel_err,
        report.worst
    );
    assert!(elapsed.as_secs() < 120, "gradient check took {elapsed:?}");
    println!(
        "PASS criterion 3: {} adapter params, max rel err {:.2e} (worst {}), {:.1} s",
        report.checked,
        report.max_rel_err,
        report.worst,
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------
// Criterion 4: scheduler values and early-stopping semantics
// ---------------------------------------------------------------------

#[test]
fn criterion_04_scheduler_and_early_stop() {
    let config = TrainConfig::default();
    assert_eq!(lr_at_step(&config, config.warmup_steps), 5e-4);
    assert_eq!(lr_at_step(&config, 4 * config.warmup_steps), 2.5e-4);

    // Scripted F1 stream: one improvement then ten plateaus.
    let model: ModelParams<f32> = ModelParams::init(ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 32,
        context_length: 64,
        seed: 3,
    })
    .unwrap();
    let template = PromptTemplate::default();
    let instances: Vec<lamo::instruction::InstructionInstance> = (0..6)
        .map(|i| lamo::instruction::InstructionInstance {
            patient_id: format!("p{i}"),
            visit_index: 0,
            medication: "M".into(),
            group_id: 0,
            label: i % 2 == 0,
            text: format!("case {i}:"),
        })
        .collect();
    let stream = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.9];
    let mut snapshots: Vec<LoraAdapterSet<f32>> = Vec::new();
    let mut idx = 0;
    let mut eval_fn = |set: &LoraAdapterSet<f32>| {
        snapshots.push(set.clone());
        let f1 = stream[idx];
        idx += 1;
        Ok(f1)
    };
    let train_config = TrainConfig {
        base_lr: 1e-3,
        batch_size: 2,
        eval_interval_batches: 1,
        patience_evals: 10,
        warmup_steps: 10,
        max_steps: 50,
        seed: 8,
        val_max_instances: None,
    };
    let (best, state) = train_group(
        &model,
        0,
        &instances,
        &template,
        LoraConfig::default(),
        &train_config,
        &mut eval_fn,
    )
    .unwrap();
    assert_eq!(state.evals, 12, "must halt at exactly the 12th eval");
    assert_eq!(state.stop_reason, StopReason::EarlyStop);
    assert_eq!(state.best_f1, 0.6);
    assert_eq!(best.adapters, snapshots[1].adapters, "snapshot from eval 2 returned");
    println!(
        "PASS criterion 4: lr(warmup)=5e-4, lr(4*warmup)=2.5e-4 exact; stream halted at eval {} with the eval-2 snapshot",
        state.evals
    );
}

// ---------------------------------------------------------------------
// Criterion 8: golden rendering and corpus-wide leakage scan
// ---------------------------------------------------------------------

fn render_fixture_visits() -> Vec<corpus::VisitRecord> {
    let concept = |code: &str, orig: &str, concise: &str| corpus::CodedConcept {
        code: code.into(),
        original_title: orig.into(),
        concise_title: concise.into(),
    };
    vec![
        corpus::VisitRecord {
            patient_id: "golden".into(),
            visit_index: 0,
            age: 82,
            gender: corpus::Gender::Female,
            diagnoses: vec![
                concept(
                    "820.02",
                    "Closed transcervical fracture of neck of femur, midcervical section",
                    "Closed Transcervical Fracture of Neck of Femur",
                ),
                concept("274.9", "Gout, unspecified", "Gout"),
            ],
            procedures: vec![concept(
                "79.35",
                "Open reduction of fracture with internal fixation, femur",
                "Femur Reduction and Internal Fixation",
            )],
            note: corpus::ClinicalNoteFields {
                hpi: "The patient is an 82-year-old female who fell at home. She reports hip pain."
                    .into(),
                pmh: "Notable for gout and prior cataract surgery.".into(),
                allergies: vec!["codeine".into()],
                meds_on_admission: vec!["Lisinopril".into(), "Warfarin".into()],
            },
            discharge_medications: vec!["Acetaminophen".into(), "Allopurinol".into()],
        },
        corpus::VisitRecord {
            patient_id: "golden".into(),
            visit_index: 1,
            age: 83,
            gender: corpus::Gender::Female,
            diagnoses: vec![concept("401.9", "Unspecified essential hypertension", "Hypertension")],
            procedures: vec![],
            note: corpus::ClinicalNoteFields {
                hpi: "Presents with headache and elevated blood pressure.".into(),
                pmh: "Notable for gout.".into(),
                allergies: vec!["codeine".into()],
                meds_on_admission: vec!["Acetaminophen".into(), "Allopurinol".into()],
            },
            discharge_medications: vec!["Lisinopril".into(), "Allopurinol".into()],
        },
    ]
}

#[test]
fn criterion_08_golden_rendering_and_leakage() {
    let template = PromptTemplate::default();
    let vocabulary: Vec<String> =
        ["Acetaminophen", "Allopurinol", "Lisinopril", "Warfarin"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    let visits = render_fixture_visits();
    let history = build_history(&visits, 1);

    let masks: Vec<(&str, AblationMask)> = vec![
        ("full", AblationMask::none()),
        ("drop_history", AblationMask { drop_history: true, ..Default::default() }),
        ("drop_notes", AblationMask { drop_notes: true, ..Default::default() }),
        ("drop_codes", AblationMask { drop_codes: true, ..Default::default() }),
        ("drop_diagnoses", AblationMask { drop_diagnoses: true, ..Default::default() }),
        ("drop_procedures", AblationMask { drop_procedures: true, ..Default::default() }),
        ("drop_hpi", AblationMask { drop_hpi: true, ..Default::default() }),
        ("drop_pmh", AblationMask { drop_pmh: true, ..Default::default() }),
        ("drop_allergies", AblationMask { drop_allergies: true, ..Default::default() }),
        ("drop_moa", AblationMask { drop_moa: true, ..Default::default() }),
    ];
    let modes = [TitleMode::CodeOnly, TitleMode::OriginalTitle, TitleMode::ConciseTitle];

    let dir = golden_dir().join("render");
    std::fs::create_dir_all(&dir).unwrap();
    let mut wrote = 0;
    let mut compared = 0;
    for mode in modes {
        for (mask_name, mask) in &masks {
            let renderer = Renderer::new(&template, *mask, mode, &vocabulary);
            let instance = renderer
                .render_instance(&visits[1], history.as_ref(), "Warfarin", 0)
                .unwrap();
            let path = dir.join(format!("{}_{}.txt", mode.as_str(), mask_name));
            if path.exists() {
                let golden = std::fs::read_to_string(&path).unwrap();
                assert_eq!(
                    instance.text, golden,
                    "rendering drifted from golden {}",
                    path.display()
                );
                compared += 1;
            } else {
                std::fs::write(&path, &instance.text).unwrap();
                wrote += 1;
            }
        }
    }
    assert!(
        wrote == 0 || compared == 0,
        "golden set must be complete: wrote {wrote}, compared {compared}"
    );

    // Corpus-wide leakage scan: full expansion over a synthetic corpus, no
    // rendered instance may contain a non-candidate discharge medication.
    let (records, _) = generate_synthetic_corpus(777, 60, 20, 30);
    let vocab = medication_vocabulary(&records);
    let (features, _) = build_cooccurrence(&records, &vocab);
    let map = cluster_medications(&features, &vocab, 5, 3).unwrap();
    let renderer = Renderer::new(&template, AblationMask::none(), TitleMode::ConciseTitle, &vocab);
    let mut scanned = 0usize;
    let mut violations = 0usize;
    for patient in group_by_patient(&records) {
        for (vi, visit) in patient.iter().enumerate() {
            let history = build_history(&patient, vi);
            for inst in renderer.expand_visit(visit, history.as_ref(), &map).unwrap() {
                let lower = inst.text.to_lowercase();
                for med in &visit.discharge_medications {
                    if med == &inst.medication {
                        continue;
                    }
                    if lower.contains(&med.to_lowercase()) {
                        violations += 1;
                        eprintln!(
                            "leak: {} in instance for {} ({}/{})",
                            med, inst.medication, inst.patient_id, inst.visit_index
                        );
                    }
                }
                scanned += 1;
            }
        }
    }
    assert_eq!(violations, 0, "{violations} leaked instances of {scanned}");
    if compared > 0 {
        println!(
            "PASS criterion 8: {compared} golden renders byte-identical; {scanned} instances scanned, 0 leaks"
        );
    } else {
        println!(
            "PASS criterion 8 (first run): froze {wrote} golden renders; {scanned} instances scanned, 0 leaks"
        );
    }
}

// ---------------------------------------------------------------------
// Criterion 9: knowledge-test arithmetic
// ---------------------------------------------------------------------

/// Replays a fixed prediction list.
struct ScriptedClassifier {
    answers: std::cell::RefCell<std::collections::VecDeque<&'static str>>,
}

impl RelationClassifier for ScriptedClassifier {
    fn classify(&self, _item: &KnowledgeItem, _setting: KnowledgeSetting) -> lamo::Result<String> {
        Ok(self.answers.borrow_mut().pop_front().unwrap().to_string())
    }
}

#[test]
fn criterion_09_knowledge_test_arithmetic() {
    // 100 indication items answered 88/12, 100 contraindication answered 6/94.
    let mut items = Vec::new();
    let mut answers = std::collections::VecDeque::new();
    for i in 0..100 {
        items.push(KnowledgeItem {
            drug: format!("d{i}"),
            disease: format!("x{i}"),
            relation: Relation::Indication,
        });
        answers.push_back(if i < 88 { "indication" } else { "contraindication" });
    }
    for i in 0..100 {
        items.push(KnowledgeItem {
            drug: format!("c{i}"),
            disease: format!("y{i}"),
            relation: Relation::Contraindication,
        });
        answers.push_back(if i < 6 { "indication" } else { "contraindication" });
    }
    let classifier = ScriptedClassifier {
        answers: std::cell::RefCell::new(answers),
    };
    let report = knowledge_test(&items, &classifier, KnowledgeSetting(1)).unwrap();
    assert_eq!(report.rows.len(), 2);
    let ind = report.rows.iter().find(|r| r.ground_truth == Relation::Indication).unwrap();
    assert_eq!(ind.percent["indication"], 88);
    assert_eq!(ind.percent["contraindication"], 12);
    let contra = report
        .rows
        .iter()
        .find(|r| r.ground_truth == Relation::Contraindication)
        .unwrap();
    assert_eq!(contra.percent["indication"], 6);
    assert_eq!(contra.percent["contraindication"], 94);
    for row in &report.rows {
        let sum: u32 = row.percent.values().sum();
        assert!((99..=101).contains(&sum), "row sums to {sum}");
    }

    // Odd totals still sum to 100 +/- 1 under half-up rounding.
    let mut odd_items = Vec::new();
    let mut odd_answers = std::collections::VecDeque::new();
    for i in 0..7 {
        odd_items.push(KnowledgeItem {
            drug: format!("o{i}"),
            disease: "z".into(),
            relation: Relation::OffLabelUse,
        });
        odd_answers.push_back(["indication", "contraindication", "off-label use"][i % 3]);
    }
    let classifier = ScriptedClassifier {
        answers: std::cell::RefCell::new(odd_answers),
    };
    let report = knowledge_test(&odd_items, &classifier, KnowledgeSetting(3)).unwrap();
    let sum: u32 = report.rows[0].percent.values().sum();
    assert!((99..=101).contains(&sum));
    println!("PASS criterion 9: 88/12 and 6/94 rows exact, all rows sum to 100 +/- 1");
}

// ---------------------------------------------------------------------
// Criterion 10: serialization round trips and digest refusal
// ---------------------------------------------------------------------

#[test]
fn criterion_10_serialization() {
    let dir = tempfile::tempdir().unwrap();

    // Corpus round trip, byte for byte.
    let (records, _) = generate_synthetic_corpus(5, 25, 10, 15);
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    corpus::write_corpus(&records, &a).unwrap();
    let (loaded, _) = corpus::load_corpus(&a).unwrap();
    corpus::write_corpus(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // Checkpoint round trip, bitwise.
    let config = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 32,
        context_length: 64,
        seed: 12,
    };
    let model: ModelParams<f32> = ModelParams::init(config).unwrap();
    let ck = dir.path().join("base.ckpt");
    lamo::checkpoint::save_base_model(&model, Default::default(), &ck).unwrap();
    let (loaded_model, _) = lamo::checkpoint::load_base_model(&ck).unwrap();
    assert_eq!(loaded_model, model);

    // Adapter registry trained against a k=5 map refuses a k=10 map digest.
    let (records, _) = generate_synthetic_corpus(6, 40, 10, 20);
    let vocab = medication_vocabulary(&records);
    let (features, _) = build_cooccurrence(&records, &vocab);
    let map5 = cluster_medications(&features, &vocab, 5, 1).unwrap();
    let map10 = cluster_medications(&features, &vocab, 10, 1).unwrap();
    assert_ne!(map5.digest(), map10.digest());
    let lora = LoraConfig::default();
    let mut registry = AdapterRegistry::new(map5.digest());
    for g in 0..5 {
        registry.insert(init_adapter_set::<f32>(&config, lora, g, g as u64).unwrap());
    }
    let rk = dir.path().join("adapters.ckpt");
    lamo::checkpoint::save_registry(&registry, lora, Default::default(), &rk).unwrap();
    let (reloaded, _) = lamo::checkpoint::load_registry(&rk, Some(map5.digest())).unwrap();
    assert_eq!(reloaded, registry);
    assert!(matches!(
        lamo::checkpoint::load_registry(&rk, Some(map10.digest())),
        Err(lamo::Error::GroupMapDigestMismatch { .. })
    ));

    // Truncation never yields a partial object.
    let bytes = std::fs::read(&rk).unwrap();
    std::fs::write(&rk, &bytes[..bytes.len() / 2]).unwrap();
    assert!(lamo::checkpoint::load_registry(&rk, None).is_err());
    println!("PASS criterion 10: corpus and checkpoint round trips byte-exact; k=5 vs k=10 digest refused");
}

// ---------------------------------------------------------------------
// Criteria 5 and 6 share one desk-scale end-to-end run
// ---------------------------------------------------------------------

/// Constants for the desk-scale run; the corpus shape, k, and the model are
/// fixed by the criterion, the optimization knobs are calibrated for CPU
/// minutes.
fn desk_scale_config(out_dir: &Path) -> RunConfig {
    let mut config = RunConfig::default();
    config.master_seed = 20250;
    config.out_dir = out_dir.to_path_buf();
    config.synthetic_patients = 200;
    config.synthetic_diseases = 20;
    config.synthetic_meds = 30;
    config.group_k = 5;
    // model stays the default micro-LM (d128, 4 layers, 4 heads, ffn 512).
    config.task_instruction =
        "Should the candidate drug be prescribed for this patient?".into();
    config.warm.steps = DESK_WARM_STEPS;
    config.warm.batch_size = 8;
    config.warm.base_lr = 1.5e-3;
    config.warm.warmup_steps = 60;
    config.warm_full_mix_percent = 30;
    config.train.base_lr = 2e-3;
    config.train.batch_size = 16;
    config.train.eval_interval_batches = 8;
    config.train.patience_evals = 3;
    config.train.warmup_steps = 20;
    config.train.max_steps = DESK_TRAIN_STEPS;
    config.train.val_max_instances = Some(64);
    config.ablation_variants = vec!["full".into(), "drop_notes".into()];
    config
}

const DESK_WARM_STEPS: usize = 350;
const DESK_TRAIN_STEPS: usize = 24;

struct DeskRun {
    _dir: tempfile::TempDir,
    pipeline: Pipeline,
    elapsed_seconds: f64,
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let _guard = HEAVY.lock().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let config = desk_scale_config(dir.path());
        let pipeline = Pipeline::new(config);
        let start = Instant::now();
        pipeline.cmd_all().expect("end-to-end run completes");
        let elapsed_seconds = start.elapsed().as_secs_f64();
        DeskRun {
            _dir: dir,
            pipeline,
            elapsed_seconds,
        }
    })
}

fn eval_summary(pipeline: &Pipeline) -> serde_json::Value {
    let text = std::fs::read_to_string(pipeline.path("eval_report.json")).unwrap();
    serde_json::from_str::<serde_json::Value>(&text).unwrap()["data"].clone()
}

fn metric_row(value: &serde_json::Value) -> MetricRow {
    serde_json::from_value(value.clone()).unwrap()
}

#[test]
fn criterion_05_end_to_end_desk_scale() {
    let run = desk_run();
    let summary = eval_summary(&run.pipeline);
    let mean = metric_row(&summary["mean"]);
    let always = metric_row(&summary["always_yes"]);
    let truth_mean = summary["truth_mean_meds"].as_f64().unwrap();

    assert!(
        mean.f1 >= 0.85,
        "aggregate test F1 {:.4} below 0.85",
        mean.f1
    );
    let n_med_err = (mean.n_med - truth_mean).abs() / truth_mean;
    assert!(
        n_med_err <= 0.20,
        "mean #Med {:.2} off truth {:.2} by {:.0}%",
        mean.n_med,
        truth_mean,
        n_med_err * 100.0
    );
    // The overprescription contrast: always-Yes reaches recall 1 by
    // predicting the whole vocabulary, and still loses on F1.
    assert_eq!(always.recall, 1.0);
    assert_eq!(always.n_med, 30.0);
    assert!(always.f1 < mean.f1);

    // 15 minutes is the 4-core budget; this box may have fewer cores.
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let budget = if cores >= 4 { 900.0 } else { 1800.0 };
    assert!(
        run.elapsed_seconds <= budget,
        "run took {:.0} s (budget {budget:.0} s on {cores} cores)",
        run.elapsed_seconds
    );
    println!(
        "PASS criterion 5: F1 {:.4} (>=0.85), #Med {:.2} vs truth {:.2} ({:+.0}%), always-yes recall {:.2}/F1 {:.4}/#Med {:.0}, {:.0} s on {} cores",
        mean.f1, mean.n_med, truth_mean, n_med_err * 100.0,
        always.recall, always.f1, always.n_med, run.elapsed_seconds, cores
    );
}

#[test]
fn criterion_06_ablation_note_only_drop() {
    let run = desk_run();
    {
        let _guard = HEAVY.lock().unwrap();
        run.pipeline.cmd_ablate().expect("ablation completes");
    }
    let text = std::fs::read_to_string(run.pipeline.path("ablation.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = text
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let subset_f1 = |variant: &str| -> f64 {
        rows.iter()
            .find(|r| r["variant"] == variant)
            .unwrap_or_else(|| panic!("variant {variant} missing"))["subset_f1"]["note_only"]
            .as_f64()
            .unwrap()
    };
    let full = subset_f1("full");
    let dropped = subset_f1("drop_notes");
    assert!(full > 0.0, "full-input note-only F1 is zero");
    let relative_drop = (full - dropped) / full;
    assert!(
        relative_drop >= 0.20,
        "drop_notes cut note-only F1 only {:.0}% ({:.3} -> {:.3})",
        relative_drop * 100.0,
        full,
        dropped
    );
    println!(
        "PASS criterion 6: note-only subset F1 {:.3} -> {:.3} under drop_notes ({:.0}% relative drop)",
        full, dropped, relative_drop * 100.0
    );
}

// ---------------------------------------------------------------------
// Criterion 7: zero-shot transfer with a constructed twin
// ---------------------------------------------------------------------

#[test]
fn criterion_07_transfer_twins() {
    let _guard = HEAVY.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::default();
    config.master_seed = 4242;
    config.out_dir = dir.path().to_path_buf();
    config.synthetic_patients = 100;
    config.synthetic_diseases = 10;
    config.synthetic_meds = 20;
    config.group_k = 1;
    config.task_instruction =
        "Should the candidate drug be prescribed for this patient?".into();
    config.warm.steps = TRANSFER_WARM_STEPS;
    config.warm.batch_size = 8;
    config.warm.base_lr = 1.5e-3;
    config.warm.warmup_steps = 60;
    config.warm_full_mix_percent = 30;
    config.train.base_lr = 2e-3;
    config.train.batch_size = 16;
    config.train.eval_interval_batches = 8;
    config.train.patience_evals = 2;
    config.train.warmup_steps = 20;
    config.train.max_steps = 16;
    config.train.val_max_instances = Some(48);
    // Targets: a coded twin whose root-mate stays in the sources, and a
    // note-only medication whose root-mate is excluded, so its evidence
    // association cannot be known zero-shot.
    config.transfer_group = 0;
    config.transfer_targets = vec!["Toricnib".into(), "Velanmab".into()];
    config.transfer_exclude = vec!["Velannib".into()];

    let pipeline = Pipeline::new(config);
    pipeline.cmd_gen_synthetic().unwrap();
    pipeline.cmd_group().unwrap();
    pipeline.cmd_transfer().unwrap();

    let text = std::fs::read_to_string(pipeline.path("transfer.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let rows = report["data"]["rows"].as_array().unwrap();
    let rel = |med: &str| -> Option<f64> {
        rows.iter()
            .find(|r| r["medication"] == med)
            .unwrap()["relative_percent"]
            .as_f64()
    };
    let twin = rel("Toricnib").expect("twin relative performance defined");
    let unrelated = rel("Velanmab").expect("unrelated relative performance defined");
    assert!(twin >= 90.0, "twin transfer {twin:.1}% below 90%");
    assert!(
        unrelated < twin,
        "unrelated medication transferred at {unrelated:.1}% >= twin {twin:.1}%"
    );
    println!(
        "PASS criterion 7: twin transfer {twin:.1}% (>=90%), unrelated note-only {unrelated:.1}% (strictly lower)"
    );
}

const TRANSFER_WARM_STEPS: usize = 220;

// ---------------------------------------------------------------------
// Criterion 11: determinism of the full chain
// ---------------------------------------------------------------------

#[test]
fn criterion_11_determinism() {
    let _guard = HEAVY.lock().unwrap();
    let run = |dir: &Path| {
        let mut config = RunConfig::default();
        config.master_seed = 99;
        config.out_dir = dir.to_path_buf();
        config.synthetic_patients = 40;
        config.synthetic_diseases = 10;
        config.synthetic_meds = 15;
        config.group_k = 3;
        config.task_instruction = "Prescribe the candidate drug?".into();
        config.warm.steps = 40;
        config.warm.batch_size = 4;
        config.warm.base_lr = 1.5e-3;
        config.warm.warmup_steps = 20;
        config.train.batch_size = 8;
        config.train.eval_interval_batches = 4;
        config.train.patience_evals = 2;
        config.train.max_steps = 8;
        config.train.val_max_instances = Some(24);
        Pipeline::new(config).cmd_all().unwrap();
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run(dir_a.path());
    run(dir_b.path());

    let byte_identical = [
        "config.echo.cfg",
        "corpus.jsonl",
        "rule_table.json",
        "stats.json",
        "splits.json",
        "knowledge_items.tsv",
        "groups.tsv",
        "instances.train.jsonl",
        "instances.val.jsonl",
        "instances.test.jsonl",
        "base.ckpt",
        "adapters.ckpt",
        "recommendations.jsonl",
        "eval_report.json",
        "eval_report.txt",
    ];
    for name in byte_identical {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // The training report carries wall-clock seconds; compare with the
    // timing field zeroed.
    let strip = |dir: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(dir.join("train_report.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                if let Some(obj) = v.as_object_mut() {
                    obj.remove("wall_seconds");
                }
                v
            })
            .collect()
    };
    assert_eq!(strip(dir_a.path()), strip(dir_b.path()), "train reports differ");
    println!(
        "PASS criterion 11: {} artifacts byte-identical across two runs; train report identical modulo wall_seconds",
        byte_identical.len()
    );
}
