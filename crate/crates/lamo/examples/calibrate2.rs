//! Probe: can a digest-heavy warm mix teach the decision fast, and does the
//! skill transfer to full-format prompts?

use lamo::config::RunConfig;
use lamo::corpus::{
    build_history, generate_synthetic_corpus, group_by_patient, medication_vocabulary,
    split_corpus, VisitRecord,
};
use lamo::eval::instances_binary_f1;
use lamo::grouping::{build_cooccurrence, cluster_medications};
use lamo::instruction::{AblationMask, InstructionInstance, PromptTemplate, Renderer};
use lamo::lora::init_adapter_set;
use lamo::model::ModelParams;
use lamo::train::{supervised_text, warm_phase, WarmConfig};
use std::time::Instant;

/// Compact decision rendering with order augmentation: decision lines only,
/// same line formats as the full render, list order shuffled per variant so
/// the mapping cannot be memorized byte-for-byte.
fn digest_text(visit: &VisitRecord, candidate: &str, label: bool, rng: &mut lamo::rng::Rng) -> String {
    let mut diag: Vec<&str> = visit.diagnoses.iter().map(|c| c.concise_title.as_str()).collect();
    rng.shuffle(&mut diag);
    let mut allergies: Vec<&str> = visit.note.allergies.iter().map(|s| s.as_str()).collect();
    rng.shuffle(&mut allergies);
    let mut sentences: Vec<&str> = visit.note.hpi.split_inclusive(". ").collect();
    rng.shuffle(&mut sentences);
    format!(
        "Diagnoses: [{}],\nHistory of present illness: {}\nAllergies: [{}],\nCandidate drug: {}.\n### Answer: {}",
        diag.join(", "),
        sentences.concat(),
        allergies.join(", "),
        candidate,
        if label { "Yes." } else { "No." }
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let chunk: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let chunks: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.5e-3);
    let full_fraction_pct: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(30);

    let mut config = RunConfig::default();
    config.master_seed = 20250;
    config.group_k = 5;
    config.task_instruction = "Should the candidate drug be prescribed for this patient?".into();

    let (records, _) = generate_synthetic_corpus(config.seed_for("corpus"), 200, 20, 30);
    let splits = split_corpus(&records, config.split, config.seed_for("split")).unwrap();
    let vocab = medication_vocabulary(&records);
    let (features, _) = build_cooccurrence(&splits.train, &vocab);
    let map = cluster_medications(&features, &vocab, 5, config.seed_for("grouping")).unwrap();
    let template = {
        let mut t = PromptTemplate::default();
        t.task_instruction = config.task_instruction.clone();
        t
    };
    let renderer = Renderer::new(&template, AblationMask::none(), config.title_mode, &vocab);

    let render = |recs: &[VisitRecord]| -> Vec<InstructionInstance> {
        let mut out = Vec::new();
        for patient in group_by_patient(recs) {
            for (vi, visit) in patient.iter().enumerate() {
                let history = build_history(&patient, vi);
                out.extend(renderer.expand_visit(visit, history.as_ref(), &map).unwrap());
            }
        }
        out
    };
    let train_inst = render(&splits.train);
    let val_inst = render(&splits.val);

    // Warm mix: full instances plus digests of every (visit, candidate).
    let mut texts: Vec<String> = Vec::new();
    for inst in &train_inst {
        texts.push(supervised_text(inst, &template));
    }
    let full_count = texts.len() * full_fraction_pct / 100;
    texts.truncate(full_count);
    let mut aug_rng = lamo::rng::Rng::new(777);
    for variant in 0..2 {
        let _ = variant;
        for visit in &splits.train {
            for med in &vocab {
                let label = visit.discharge_medications.contains(med);
                texts.push(digest_text(visit, med, label, &mut aug_rng));
            }
        }
    }
    let mean_len: f64 = texts.iter().map(|t| t.len() as f64).sum::<f64>() / texts.len() as f64;
    println!(
        "warm mix: {} texts ({} full, {} digests), mean {:.0} chars",
        texts.len(),
        full_count,
        texts.len() - full_count,
        mean_len
    );

    let mut model: ModelParams<f32> = ModelParams::init(config.model_config()).unwrap();
    let probe_set = init_adapter_set::<f32>(&model.config, config.lora, 0, 1).unwrap();
    let val_probe: Vec<_> = val_inst.iter().take(120).cloned().collect();

    let t0 = Instant::now();
    for c in 1..=chunks {
        let warm = WarmConfig {
            steps: chunk,
            batch_size: 8,
            base_lr: lr,
            warmup_steps: 60,
            seed: config.seed_for(&format!("warm{c}")),
            max_tokens: 1024,
        };
        let loss = warm_phase(&mut model, &texts, &warm).unwrap();
        let f1 = instances_binary_f1(&model, &probe_set, &val_probe, &template, None, 9).unwrap();
        let yes_rate = {
            let mut yeses = 0usize;
            for inst in &val_probe {
                let mut tokens = vec![lamo::model::BOS];
                tokens.extend(lamo::model::Tokenizer.encode(&inst.text));
                let d = lamo::model::decide_yes_no(&model, Some(&probe_set), &tokens, " Yes.", " No.")
                    .unwrap();
                if d.yes {
                    yeses += 1;
                }
            }
            yeses as f64 / val_probe.len() as f64
        };
        println!(
            "warm {} steps: loss {:.3}, full-format val F1 {:.3}, yes-rate {:.3}  [t={:.0}s]",
            c * chunk,
            loss,
            f1,
            yes_rate,
            t0.elapsed().as_secs_f64()
        );
    }
}
