//! Staged calibration: warm once, save, then iterate on the task stage.
//! Modes: warm | adapters | sft | sft-adapters

use lamo::checkpoint::{load_base_model, save_base_model, CheckpointMeta};
use lamo::config::RunConfig;
use lamo::corpus::{
    build_history, generate_synthetic_corpus, group_by_patient, medication_vocabulary,
    split_corpus, VisitRecord,
};
use lamo::eval::instances_binary_f1;
use lamo::grouping::{build_cooccurrence, cluster_medications};
use lamo::instruction::{AblationMask, InstructionInstance, PromptTemplate, Renderer};
use lamo::lora::LoraAdapterSet;
use lamo::model::{
    answer_loss_targets, loss_and_grad, GradMode, ModelGrads, ModelParams, Tokenizer, BOS,
};
use lamo::rng::Rng;
use lamo::train::{supervised_text, train_group, warm_phase, TrainConfig, WarmConfig};
use rayon::prelude::*;
use std::time::Instant;

struct World {
    template: PromptTemplate,
    train_inst: Vec<InstructionInstance>,
    val_inst: Vec<InstructionInstance>,
    texts: Vec<String>,
}

fn build_world() -> World {
    let mut config = RunConfig::default();
    config.master_seed = 20250;
    config.group_k = 5;
    config.task_instruction = "Should the candidate drug be prescribed for this patient?".into();
    let (records, _) = generate_synthetic_corpus(config.seed_for("corpus"), 200, 20, 30);
    let splits = split_corpus(&records, config.split, config.seed_for("split")).unwrap();
    let vocab = medication_vocabulary(&records);
    let (features, _) = build_cooccurrence(&splits.train, &vocab);
    let map = cluster_medications(&features, &vocab, 5, config.seed_for("grouping")).unwrap();
    let mut template = PromptTemplate::default();
    template.task_instruction = config.task_instruction.clone();
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
    let mut texts: Vec<String> =
        train_inst.iter().map(|i| supervised_text(i, &template)).collect();
    texts.truncate(train_inst.len() * 30 / 100);
    let mut rng = Rng::new(777);
    for _ in 0..2 {
        for visit in &splits.train {
            for med in &vocab {
                let label = visit.discharge_medications.contains(med);
                let mut diag: Vec<&str> =
                    visit.diagnoses.iter().map(|c| c.concise_title.as_str()).collect();
                rng.shuffle(&mut diag);
                let mut all: Vec<&str> =
                    visit.note.allergies.iter().map(|s| s.as_str()).collect();
                rng.shuffle(&mut all);
                texts.push(format!(
                    "Diagnoses: [{}],\nHistory of present illness: {}\nAllergies: [{}],\nCandidate drug: {}.\n### Answer: {}",
                    diag.join(", "),
                    visit.note.hpi,
                    all.join(", "),
                    med,
                    if label { "Yes." } else { "No." }
                ));
            }
        }
    }
    World {
        template,
        train_inst,
        val_inst,
        texts,
    }
}

fn probe_f1(model: &ModelParams<f32>, world: &World, n: usize) -> (f64, f64) {
    let probe_set =
        lamo::lora::init_adapter_set::<f32>(&model.config, Default::default(), 0, 1).unwrap();
    let probe: Vec<_> = world.val_inst.iter().take(n).cloned().collect();
    let f1 = instances_binary_f1(model, &probe_set, &probe, &world.template, None, 9).unwrap();
    let mut yeses = 0;
    for inst in &probe {
        let mut tokens = vec![BOS];
        tokens.extend(Tokenizer.encode(&inst.text));
        let d =
            lamo::model::decide_yes_no(model, Some(&probe_set), &tokens, " Yes.", " No.").unwrap();
        if d.yes {
            yeses += 1;
        }
    }
    (f1, yeses as f64 / probe.len() as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("warm");
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.5e-3);
    let world = build_world();
    println!(
        "mode {mode}: {} train instances, {} warm texts",
        world.train_inst.len(),
        world.texts.len()
    );
    let t0 = Instant::now();

    match mode {
        "warm" => {
            let mut config = RunConfig::default();
            config.master_seed = 20250;
            let mut model: ModelParams<f32> = ModelParams::init(config.model_config()).unwrap();
            for chunk in 1..=(steps / 100).max(1) {
                let warm = WarmConfig {
                    steps: 100,
                    batch_size: 8,
                    base_lr: lr,
                    warmup_steps: 60,
                    seed: 1000 + chunk as u64,
                    max_tokens: 1024,
                };
                let loss = warm_phase(&mut model, &world.texts, &warm).unwrap();
                let (f1, yr) = probe_f1(&model, &world, 80);
                println!(
                    "warm {}: loss {:.3} F1 {:.3} yes {:.3} [t={:.0}s]",
                    chunk * 100,
                    loss,
                    f1,
                    yr,
                    t0.elapsed().as_secs_f64()
                );
            }
            save_base_model(&model, CheckpointMeta::default(), "/tmp/probe_base.ckpt").unwrap();
            println!("saved /tmp/probe_base.ckpt");
        }
        "adapters" | "sft-adapters" => {
            let path = if mode == "adapters" {
                "/tmp/probe_base.ckpt"
            } else {
                "/tmp/probe_sft.ckpt"
            };
            let (model, _) = load_base_model(path).unwrap();
            let g0_train: Vec<InstructionInstance> =
                world.train_inst.iter().filter(|i| i.group_id == 0).cloned().collect();
            let g0_val: Vec<InstructionInstance> =
                world.val_inst.iter().filter(|i| i.group_id == 0).cloned().collect();
            println!("group 0: {} train / {} val", g0_train.len(), g0_val.len());
            let model_ref = &model;
            let template_ref = &world.template;
            let t1 = Instant::now();
            let mut eval_fn = move |set: &LoraAdapterSet<f32>| {
                let f1 = instances_binary_f1(
                    model_ref,
                    set,
                    &g0_val[..120.min(g0_val.len())],
                    template_ref,
                    None,
                    9,
                )?;
                println!("  adapter eval F1 {:.3} [t={:.0}s]", f1, t1.elapsed().as_secs_f64());
                Ok(f1)
            };
            let tc = TrainConfig {
                base_lr: lr,
                batch_size: 16,
                eval_interval_batches: 8,
                patience_evals: 5,
                warmup_steps: 20,
                max_steps: steps,
                seed: 5,
                val_max_instances: None,
            };
            let (_, state) = train_group(
                &model,
                0,
                &g0_train,
                &world.template,
                Default::default(),
                &tc,
                &mut eval_fn,
            )
            .unwrap();
            println!(
                "adapters: best F1 {:.3} after {} steps ({})",
                state.best_f1, state.step, state.stop_reason
            );
        }
        "sft" => {
            let (mut model, _) = load_base_model("/tmp/probe_base.ckpt").unwrap();
            let mut order: Vec<usize> = (0..world.train_inst.len()).collect();
            let mut rng = Rng::new(42);
            rng.shuffle(&mut order);
            let mut cursor = 0;
            let shapes: Vec<usize> =
                model.named_tensors().iter().map(|(_, _, v)| v.len()).collect();
            let mut m: Vec<Vec<f32>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            let mut v: Vec<Vec<f32>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            for step in 1..=steps {
                let mut batch = Vec::new();
                for _ in 0..16 {
                    if cursor == order.len() {
                        rng.shuffle(&mut order);
                        cursor = 0;
                    }
                    batch.push(&world.train_inst[order[cursor]]);
                    cursor += 1;
                }
                let grads: Vec<_> = batch
                    .par_iter()
                    .map(|inst| {
                        let answer = if inst.label { " Yes." } else { " No." };
                        let mut tokens = vec![BOS];
                        tokens.extend(Tokenizer.encode(&inst.text));
                        let plen = tokens.len();
                        tokens.extend(Tokenizer.encode(answer));
                        let targets = answer_loss_targets(&tokens, plen);
                        let out = loss_and_grad(
                            &model, None, &tokens, &targets, GradMode::Full, None, "sft",
                        )
                        .unwrap();
                        (out.loss, out.model_grads.unwrap())
                    })
                    .collect();
                let mut total = ModelGrads::zeros_like(&model);
                let mut loss_sum = 0.0;
                for (l, g) in &grads {
                    loss_sum += l;
                    total.add_assign(g);
                }
                total.scale(1.0 / 16.0);
                let lr_t = lr * (50.0f64 / (step.max(50)) as f64).sqrt();
                let mut slot = 0;
                let mut upd = |p: &mut [f32], g: &[f32]| {
                    for i in 0..p.len() {
                        let gi = g[i] as f64;
                        let mi = 0.9 * m[slot][i] as f64 + 0.1 * gi;
                        let vi = 0.999 * v[slot][i] as f64 + 0.001 * gi * gi;
                        m[slot][i] = mi as f32;
                        v[slot][i] = vi as f32;
                        let mh = mi / (1.0 - 0.9f64.powi(step as i32));
                        let vh = vi / (1.0 - 0.999f64.powi(step as i32));
                        p[i] -= (lr_t * mh / (vh.sqrt() + 1e-8)) as f32;
                    }
                    slot += 1;
                };
                upd(&mut model.embed.data, &total.embed.data);
                upd(&mut model.pos_embed.data, &total.pos_embed.data);
                for (l, gl) in model.layers.iter_mut().zip(total.layers.iter()) {
                    upd(&mut l.attn_norm, &gl.attn_norm);
                    upd(&mut l.q_proj.data, &gl.q_proj.data);
                    upd(&mut l.k_proj.data, &gl.k_proj.data);
                    upd(&mut l.v_proj.data, &gl.v_proj.data);
                    upd(&mut l.o_proj.data, &gl.o_proj.data);
                    upd(&mut l.ffn_in.data, &gl.ffn_in.data);
                    upd(&mut l.ffn_out.data, &gl.ffn_out.data);
                    upd(&mut l.ffn_norm, &gl.ffn_norm);
                }
                upd(&mut model.final_norm, &total.final_norm);
                upd(&mut model.lm_head.data, &total.lm_head.data);
                if step % 20 == 0 {
                    let (f1, yr) = probe_f1(&model, &world, 80);
                    println!(
                        "sft {}: loss {:.3} F1 {:.3} yes {:.3} [t={:.0}s]",
                        step,
                        loss_sum / 16.0,
                        f1,
                        yr,
                        t0.elapsed().as_secs_f64()
                    );
                }
            }
            save_base_model(&model, CheckpointMeta::default(), "/tmp/probe_sft.ckpt").unwrap();
            println!("saved /tmp/probe_sft.ckpt");
        }
        other => panic!("unknown mode {other}"),
    }
}
