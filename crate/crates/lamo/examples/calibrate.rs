//! Desk-scale calibration probe: maps warm steps and adapter steps to
//! validation F1 so the acceptance-run constants are grounded in data.

use lamo::config::RunConfig;
use lamo::corpus::{
    build_history, generate_synthetic_corpus, group_by_patient, medication_vocabulary,
    split_corpus,
};
use lamo::eval::instances_binary_f1;
use lamo::grouping::{build_cooccurrence, cluster_medications};
use lamo::instruction::{AblationMask, InstructionInstance, PromptTemplate, Renderer};
use lamo::lora::{init_adapter_set, LoraAdapterSet};
use lamo::model::{decide_yes_no, ModelParams, Tokenizer, BOS};
use lamo::train::{supervised_text, train_group, warm_phase, TrainConfig, WarmConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let warm_chunk: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(80);
    let chunks: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let warm_lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.5e-3);
    let adapter_steps: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(60);
    let adapter_lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2e-3);

    let mut config = RunConfig::default();
    config.master_seed = 20250;
    config.group_k = 5;
    config.task_instruction = "Should the candidate drug be prescribed for this patient?".into();

    let (records, _table) = generate_synthetic_corpus(config.seed_for("corpus"), 200, 20, 30);
    let splits = split_corpus(&records, config.split, config.seed_for("split")).unwrap();
    let vocab = medication_vocabulary(&records);
    let (features, _) = build_cooccurrence(&splits.train, &vocab);
    let map = cluster_medications(&features, &vocab, config.group_k, config.seed_for("grouping")).unwrap();
    let template = {
        let mut t = PromptTemplate::default();
        t.task_instruction = config.task_instruction.clone();
        t
    };
    let renderer = Renderer::new(&template, AblationMask::none(), config.title_mode, &vocab);

    let render = |recs: &[lamo::corpus::VisitRecord]| -> Vec<InstructionInstance> {
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
    let mean_len: f64 =
        train_inst.iter().map(|i| i.text.len() as f64).sum::<f64>() / train_inst.len() as f64;
    println!(
        "train {} val {} instances, mean prompt {:.0} chars",
        train_inst.len(),
        val_inst.len(),
        mean_len
    );
    let texts: Vec<String> = train_inst.iter().map(|i| supervised_text(i, &template)).collect();

    let mut model: ModelParams<f32> = ModelParams::init(config.model_config()).unwrap();
    let probe_set = init_adapter_set::<f32>(&model.config, config.lora, 0, 1).unwrap();
    let val_probe: Vec<_> = val_inst.iter().take(150).cloned().collect();

    let t0 = Instant::now();
    for chunk in 1..=chunks {
        let warm = WarmConfig {
            steps: warm_chunk,
            batch_size: 8,
            base_lr: warm_lr,
            warmup_steps: 60,
            seed: config.seed_for(&format!("warm{chunk}")),
            max_tokens: 1024,
        };
        let loss = warm_phase(&mut model, &texts, &warm).unwrap();
        let (mut correct, mut yeses) = (0usize, 0usize);
        for inst in &val_probe {
            let mut tokens = vec![BOS];
            tokens.extend(Tokenizer.encode(&inst.text));
            let d = decide_yes_no(&model, Some(&probe_set), &tokens, " Yes.", " No.").unwrap();
            if d.yes == inst.label {
                correct += 1;
            }
            if d.yes {
                yeses += 1;
            }
        }
        let f1 = instances_binary_f1(&model, &probe_set, &val_probe, &template, None, 9).unwrap();
        println!(
            "warm {} steps: loss {:.3}, val F1 {:.3}, acc {:.3}, yes-rate {:.3}  [t={:.0}s]",
            chunk * warm_chunk,
            loss,
            f1,
            correct as f64 / val_probe.len() as f64,
            yeses as f64 / val_probe.len() as f64,
            t0.elapsed().as_secs_f64()
        );
    }

    // Adapter stage on group 0 with a live F1 stream.
    let g0_train: Vec<InstructionInstance> =
        train_inst.iter().filter(|i| i.group_id == 0).cloned().collect();
    let g0_val: Vec<InstructionInstance> =
        val_inst.iter().filter(|i| i.group_id == 0).cloned().collect();
    println!("group 0: {} train, {} val instances", g0_train.len(), g0_val.len());
    let model_ref = &model;
    let template_ref = &template;
    let tstart = Instant::now();
    let mut eval_fn = move |set: &LoraAdapterSet<f32>| {
        let f1 = instances_binary_f1(model_ref, set, &g0_val[..g0_val.len().min(120)], template_ref, None, 9)?;
        println!("  adapter eval: F1 {:.3}  [t={:.0}s]", f1, tstart.elapsed().as_secs_f64());
        Ok(f1)
    };
    let train_config = TrainConfig {
        base_lr: adapter_lr,
        batch_size: 16,
        eval_interval_batches: 10,
        patience_evals: 4,
        warmup_steps: 20,
        max_steps: adapter_steps,
        seed: 5,
        val_max_instances: None,
    };
    let (best, state) = train_group(
        &model,
        0,
        &g0_train,
        &template,
        config.lora,
        &train_config,
        &mut eval_fn,
    )
    .unwrap();
    println!(
        "adapter result: best F1 {:.3} at step {} ({})",
        state.best_f1, best.meta.steps, state.stop_reason
    );
}
