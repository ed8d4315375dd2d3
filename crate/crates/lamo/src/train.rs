//! Per-group adapter optimization and the causal-LM warm phase.
//!
//! The optimization protocol per group: Adam on the adapter parameters only,
//! inverse-square-root learning-rate schedule, seeded epoch shuffling,
//! periodic validation-F1 evaluation, early stopping after a fixed number of
//! non-improving evaluations, and best-snapshot retention.

use crate::error::{Error, Result};
use crate::instruction::{InstructionInstance, PromptTemplate};
use crate::lora::{init_adapter_set, AdapterRegistry, LoraAdapterSet, LoraConfig};
use crate::model::{
    answer_loss_targets, lm_loss_targets, loss_and_grad, AdapterGrads, GradMode, ModelGrads,
    ModelParams, Tokenizer, BOS,
};
use crate::rng::{derive_seed, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub eval_interval_batches: usize,
    pub patience_evals: usize,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Cap on validation instances scored per evaluation (subsampled with the
    /// run seed); None evaluates the full validation set.
    pub val_max_instances: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            batch_size: 64,
            eval_interval_batches: 32,
            patience_evals: 10,
            warmup_steps: 100,
            max_steps: 4096,
            seed: 0,
            val_max_instances: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0
            || self.batch_size == 0
            || self.eval_interval_batches == 0
            || self.patience_evals == 0
            || self.warmup_steps == 0
            || self.max_steps == 0
        {
            return Err(Error::Other("train config fields must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule: constant `base_lr` through warmup, then
/// `base_lr * sqrt(warmup / t)`. The ratio is formed first so the warmup
/// boundary values are exact.
pub fn lr_at_step(config: &TrainConfig, t: usize) -> f64 {
    assert!(t >= 1, "steps are 1-based");
    let t_eff = t.max(config.warmup_steps);
    config.base_lr * (config.warmup_steps as f64 / t_eff as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxSteps,
    Degenerate,
    NonFiniteLoss,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxSteps => "max_steps",
            StopReason::Degenerate => "degenerate",
            StopReason::NonFiniteLoss => "non_finite_loss",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub evals: usize,
    pub best_f1: f64,
    pub evals_since_improvement: usize,
    pub lr_history: Vec<f64>,
    pub stop_reason: StopReason,
    pub final_loss: f64,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[usize]) -> Self {
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, slot: usize, params: &mut [f32], grads: &[f32], lr: f64) {
        let (b1, b2) = (Self::BETA1, Self::BETA2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            params[i] -= (lr * m_hat / (v_hat.sqrt() + Self::EPS)) as f32;
        }
    }
}

/// Prompt plus its gold answer, the text form seen by both the warm phase
/// and supervised adapter training.
pub fn supervised_text(inst: &InstructionInstance, template: &PromptTemplate) -> String {
    let answer = if inst.label { &template.yes_text } else { &template.no_text };
    format!("{} {}", inst.text, answer)
}

/// Token sequence and supervised positions for one training instance.
fn instance_tokens(inst: &InstructionInstance, template: &PromptTemplate) -> (Vec<u32>, Vec<(usize, u32)>) {
    let answer = if inst.label {
        format!(" {}", template.yes_text)
    } else {
        format!(" {}", template.no_text)
    };
    let mut tokens = vec![BOS];
    tokens.extend(Tokenizer.encode(&inst.text));
    let prompt_len = tokens.len();
    tokens.extend(Tokenizer.encode(&answer));
    let targets = answer_loss_targets(&tokens, prompt_len);
    (tokens, targets)
}

/// Mean adapter gradient over a batch; instances run in parallel and are
/// reduced in fixed order.
fn batch_adapter_grads(
    model: &ModelParams<f32>,
    adapters: &LoraAdapterSet<f32>,
    batch: &[&InstructionInstance],
    template: &PromptTemplate,
    step_seed: u64,
) -> Result<(f64, AdapterGrads<f32>)> {
    let results: Vec<Result<(f64, AdapterGrads<f32>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let (tokens, targets) = instance_tokens(inst, template);
            let mut rng = Rng::new(derive_seed(step_seed, &format!("dropout.{i}")));
            let out = loss_and_grad(
                model,
                Some(adapters),
                &tokens,
                &targets,
                GradMode::AdaptersOnly,
                Some(&mut rng),
                &format!("{}/{}/{}", inst.patient_id, inst.visit_index, inst.medication),
            )?;
            Ok((out.loss, out.adapter_grads.expect("adapter grads")))
        })
        .collect();
    let mut total = AdapterGrads::zeros_like(adapters);
    let mut loss_sum = 0.0;
    for r in results {
        let (loss, grads) = r?;
        loss_sum += loss;
        total.add_assign(&grads);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv as f32);
    Ok((loss_sum * inv, total))
}

/// Trains one group's adapters. `eval_fn` scores the current adapters on the
/// group's validation instances (the production closure computes binary F1
/// via the Yes/No decision; tests may script it).
pub fn train_group(
    model: &ModelParams<f32>,
    group_id: usize,
    instances: &[InstructionInstance],
    template: &PromptTemplate,
    lora_config: LoraConfig,
    config: &TrainConfig,
    eval_fn: &mut dyn FnMut(&LoraAdapterSet<f32>) -> Result<f64>,
) -> Result<(LoraAdapterSet<f32>, TrainState)> {
    config.validate()?;
    if instances.is_empty() {
        return Err(Error::Other(format!("group {group_id} has no training instances")));
    }
    assert!(
        instances.iter().all(|i| i.group_id == group_id),
        "instances routed to the wrong group"
    );
    let mut adapters = init_adapter_set::<f32>(&model.config, lora_config, group_id, config.seed)?;
    let has_positive = instances.iter().any(|i| i.label);
    let mut state = TrainState {
        step: 0,
        evals: 0,
        best_f1: f64::NEG_INFINITY,
        evals_since_improvement: 0,
        lr_history: Vec::new(),
        stop_reason: StopReason::MaxSteps,
        final_loss: f64::NAN,
    };
    if !has_positive {
        // Nothing to learn; the adapter stays at init (identity).
        state.stop_reason = StopReason::Degenerate;
        state.best_f1 = 0.0;
        adapters.meta.best_f1 = 0.0;
        return Ok((adapters, state));
    }

    let shapes: Vec<usize> = adapters
        .adapters
        .iter()
        .flat_map(|ad| [ad.a.data.len(), ad.b.data.len()])
        .collect();
    let mut adam = Adam::new(&shapes);

    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut shuffle_rng = Rng::new(derive_seed(config.seed, "shuffle"));
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut best_snapshot = adapters.clone();

    for step in 1..=config.max_steps {
        // Assemble the next batch, reshuffling at epoch boundaries.
        let mut batch: Vec<&InstructionInstance> = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&instances[order[cursor]]);
            cursor += 1;
        }

        let step_seed = derive_seed(config.seed, &format!("step.{step}"));
        let (loss, grads) = match batch_adapter_grads(model, &adapters, &batch, template, step_seed)
        {
            Ok(ok) => ok,
            Err(Error::NonFiniteLoss { instance_id }) => {
                // Keep the last stable snapshot rather than poisoned weights.
                state.stop_reason = StopReason::NonFiniteLoss;
                state.step = step;
                crate::logging::warn(
                    "trainer",
                    &format!("group {group_id}: non-finite loss on {instance_id}; stopping"),
                );
                adapters = best_snapshot.clone();
                adapters.meta.steps = state.step as u64;
                return Ok((adapters, state));
            }
            Err(e) => return Err(e),
        };
        let lr = lr_at_step(config, step);
        state.lr_history.push(lr);
        state.final_loss = loss;
        adam.begin_step();
        for (slot, ad) in adapters.adapters.iter_mut().enumerate() {
            let g = &grads.per_adapter[slot];
            adam.update(2 * slot, &mut ad.a.data, &g.da.data, lr);
            adam.update(2 * slot + 1, &mut ad.b.data, &g.db.data, lr);
        }
        state.step = step;

        if step % config.eval_interval_batches == 0 {
            let f1 = eval_fn(&adapters)?;
            state.evals += 1;
            if f1 > state.best_f1 {
                state.best_f1 = f1;
                state.evals_since_improvement = 0;
                best_snapshot = adapters.clone();
                best_snapshot.meta.best_f1 = f1;
                best_snapshot.meta.steps = step as u64;
            } else {
                state.evals_since_improvement += 1;
                if state.evals_since_improvement >= config.patience_evals {
                    state.stop_reason = StopReason::EarlyStop;
                    break;
                }
            }
        }
    }

    if state.evals == 0 {
        // No evaluation ever ran; the latest weights are the best we know.
        best_snapshot = adapters;
        best_snapshot.meta.steps = state.step as u64;
    }
    Ok((best_snapshot, state))
}

/// One row of the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupReport {
    pub group_id: usize,
    pub steps: usize,
    pub best_f1: f64,
    pub stop_reason: StopReason,
    pub wall_seconds: f64,
    pub degenerate: bool,
}

/// Trains every group independently with derived per-group seeds.
/// `make_eval_fn` builds the validation scorer for a group.
pub fn train_all_groups<'a, F, G>(
    model: &ModelParams<f32>,
    k: usize,
    group_map_digest: u64,
    instances_of_group: F,
    mut make_eval_fn: G,
    template: &PromptTemplate,
    lora_config: LoraConfig,
    config: &TrainConfig,
) -> Result<(AdapterRegistry<f32>, Vec<GroupReport>)>
where
    F: Fn(usize) -> &'a [InstructionInstance],
    G: FnMut(usize) -> Box<dyn FnMut(&LoraAdapterSet<f32>) -> Result<f64> + 'a>,
{
    let mut registry = AdapterRegistry::new(group_map_digest);
    let mut reports = Vec::with_capacity(k);
    for group_id in 0..k {
        let start = std::time::Instant::now();
        let group_config = TrainConfig {
            seed: derive_seed(config.seed, &format!("train.group.{group_id}")),
            ..*config
        };
        let instances = instances_of_group(group_id);
        let mut eval_fn = make_eval_fn(group_id);
        let (set, state) = train_group(
            model,
            group_id,
            instances,
            template,
            lora_config,
            &group_config,
            eval_fn.as_mut(),
        )?;
        let degenerate = state.stop_reason == StopReason::Degenerate;
        if degenerate {
            crate::logging::warn(
                "trainer",
                &format!("group {group_id} has no positive instances; adapters stay at init"),
            );
        }
        reports.push(GroupReport {
            group_id,
            steps: state.step,
            best_f1: if state.best_f1.is_finite() { state.best_f1 } else { 0.0 },
            stop_reason: state.stop_reason,
            wall_seconds: start.elapsed().as_secs_f64(),
            degenerate,
        });
        registry.insert(set);
    }
    Ok((registry, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Sequences are cropped to this many tokens.
    pub max_tokens: usize,
}

impl Default for WarmConfig {
    fn default() -> Self {
        WarmConfig {
            steps: 2000,
            batch_size: 8,
            base_lr: 1e-3,
            warmup_steps: 100,
            seed: 0,
            max_tokens: 1024,
        }
    }
}

/// Plain next-token training of all base parameters on the given texts.
/// After this phase the base is frozen for good: adapter training never
/// touches it again.
pub fn warm_phase(model: &mut ModelParams<f32>, texts: &[String], config: &WarmConfig) -> Result<f64> {
    if config.steps == 0 || texts.is_empty() {
        return Ok(f64::NAN);
    }
    let sequences: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| {
            let mut tokens = vec![BOS];
            tokens.extend(Tokenizer.encode(t));
            tokens.truncate(config.max_tokens.min(model.config.context_length));
            tokens
        })
        .filter(|t| t.len() >= 2)
        .collect();
    if sequences.is_empty() {
        return Err(Error::Model("no usable warm-phase sequences".into()));
    }

    let shapes: Vec<usize> = model
        .named_tensors()
        .iter()
        .map(|(_, _, vals)| vals.len())
        .collect();
    let mut adam = Adam::new(&shapes);
    let schedule = TrainConfig {
        base_lr: config.base_lr,
        warmup_steps: config.warmup_steps,
        ..Default::default()
    };

    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut shuffle_rng = Rng::new(derive_seed(config.seed, "warm.shuffle"));
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut last_loss = f64::NAN;

    for step in 1..=config.steps {
        let mut batch: Vec<&Vec<u32>> = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&sequences[order[cursor]]);
            cursor += 1;
        }
        let results: Vec<Result<(f64, Box<ModelGrads<f32>>)>> = batch
            .par_iter()
            .map(|tokens| {
                let targets = lm_loss_targets(tokens);
                let out = loss_and_grad(
                    model,
                    None,
                    tokens,
                    &targets,
                    GradMode::Full,
                    None,
                    "warm",
                )?;
                Ok((out.loss, out.model_grads.expect("full grads")))
            })
            .collect();
        let mut total = ModelGrads::zeros_like(model);
        let mut loss_sum = 0.0;
        for r in results {
            let (loss, grads) = r?;
            loss_sum += loss;
            total.add_assign(&grads);
        }
        let inv = 1.0 / batch.len() as f64;
        total.scale(inv as f32);
        last_loss = loss_sum * inv;

        let lr = lr_at_step(&schedule, step);
        adam.begin_step();
        apply_model_update(model, &total, &mut adam, lr);
        if step % 50 == 0 {
            crate::logging::info("warm", &format!("step {step}/{}, loss {last_loss:.4}", config.steps));
        }
    }
    if !model.all_finite() {
        return Err(Error::Model("warm phase produced non-finite parameters".into()));
    }
    Ok(last_loss)
}

/// Held-out mean LM loss, for checking that warming actually helped.
pub fn lm_loss_on_texts(model: &ModelParams<f32>, texts: &[String], max_tokens: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in texts {
        let mut tokens = vec![BOS];
        tokens.extend(Tokenizer.encode(t));
        tokens.truncate(max_tokens.min(model.config.context_length));
        if tokens.len() < 2 {
            continue;
        }
        let targets = lm_loss_targets(&tokens);
        total += crate::model::gradcheck::sequence_loss(model, None, &tokens, &targets)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Model("no usable evaluation texts".into()));
    }
    Ok(total / n as f64)
}

/// Applies one Adam step over every base tensor, pairing parameters with
/// gradients in the fixed named-tensor order.
fn apply_model_update(model: &mut ModelParams<f32>, grads: &ModelGrads<f32>, adam: &mut Adam, lr: f64) {
    let mut slot = 0usize;
    let mut step = |params: &mut [f32], g: &[f32], adam: &mut Adam| {
        adam.update(slot, params, g, lr);
        slot += 1;
    };
    step(&mut model.embed.data, &grads.embed.data, adam);
    step(&mut model.pos_embed.data, &grads.pos_embed.data, adam);
    for (l, gl) in model.layers.iter_mut().zip(grads.layers.iter()) {
        step(&mut l.attn_norm, &gl.attn_norm, adam);
        step(&mut l.q_proj.data, &gl.q_proj.data, adam);
        step(&mut l.k_proj.data, &gl.k_proj.data, adam);
        step(&mut l.v_proj.data, &gl.v_proj.data, adam);
        step(&mut l.o_proj.data, &gl.o_proj.data, adam);
        step(&mut l.ffn_in.data, &gl.ffn_in.data, adam);
        step(&mut l.ffn_out.data, &gl.ffn_out.data, adam);
        step(&mut l.ffn_norm, &gl.ffn_norm, adam);
    }
    step(&mut model.final_norm, &grads.final_norm, adam);
    step(&mut model.lm_head.data, &grads.lm_head.data, adam);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn lr_schedule_exact_values() {
        let config = TrainConfig::default();
        assert_eq!(lr_at_step(&config, 1), 5e-4);
        assert_eq!(lr_at_step(&config, 100), 5e-4);
        assert_eq!(lr_at_step(&config, 400), 2.5e-4);
    }

    #[test]
    fn lr_schedule_nonincreasing_after_warmup() {
        let config = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for t in 100..2000 {
            let lr = lr_at_step(&config, t);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn tiny_model() -> ModelParams<f32> {
        ModelParams::init(ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 32,
            context_length: 64,
            seed: 9,
        })
        .unwrap()
    }

    fn tiny_instances(n: usize) -> Vec<InstructionInstance> {
        (0..n)
            .map(|i| InstructionInstance {
                patient_id: format!("p{i}"),
                visit_index: 0,
                medication: "M".into(),
                group_id: 0,
                label: i % 2 == 0,
                text: format!("case {i} sign:"),
            })
            .collect()
    }

    fn quick_config(max_steps: usize, interval: usize, patience: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 1e-3,
            batch_size: 2,
            eval_interval_batches: interval,
            patience_evals: patience,
            warmup_steps: 10,
            max_steps,
            seed: 4,
            val_max_instances: None,
        }
    }

    #[test]
    fn scripted_stream_halts_at_twelfth_eval_with_second_snapshot() {
        let model = tiny_model();
        let template = PromptTemplate::default();
        let instances = tiny_instances(8);
        let stream = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.7];
        let mut snapshots: Vec<LoraAdapterSet<f32>> = Vec::new();
        let mut idx = 0usize;
        let mut eval_fn = |set: &LoraAdapterSet<f32>| {
            snapshots.push(set.clone());
            let f1 = stream[idx];
            idx += 1;
            Ok(f1)
        };
        let config = quick_config(100, 1, 10);
        let (best, state) = train_group(
            &model,
            0,
            &instances,
            &template,
            LoraConfig::default(),
            &config,
            &mut eval_fn,
        )
        .unwrap();
        assert_eq!(state.evals, 12, "halts at exactly the 12th eval");
        assert_eq!(state.stop_reason, StopReason::EarlyStop);
        assert!((state.best_f1 - 0.6).abs() < 1e-12);
        // The returned adapters are the snapshot taken at eval 2.
        assert_eq!(best.adapters, snapshots[1].adapters);
        assert_eq!(best.meta.steps, 2);
    }

    #[test]
    fn immediate_early_stop_with_patience_one() {
        let model = tiny_model();
        let template = PromptTemplate::default();
        let instances = tiny_instances(6);
        let stream = [0.5, 0.4];
        let mut idx = 0usize;
        let mut eval_fn = |_: &LoraAdapterSet<f32>| {
            let f1 = stream[idx];
            idx += 1;
            Ok(f1)
        };
        let config = quick_config(100, 1, 1);
        let (_, state) = train_group(
            &model,
            0,
            &instances,
            &template,
            LoraConfig::default(),
            &config,
            &mut eval_fn,
        )
        .unwrap();
        assert_eq!(state.evals, 2);
        assert_eq!(state.stop_reason, StopReason::EarlyStop);
        assert!((state.best_f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn best_f1_is_monotone_and_counter_resets() {
        let model = tiny_model();
        let template = PromptTemplate::default();
        let instances = tiny_instances(6);
        let stream = [0.3, 0.2, 0.5, 0.4, 0.4];
        let mut idx = 0usize;
        let mut best_seen = f64::NEG_INFINITY;
        let mut eval_fn = |_: &LoraAdapterSet<f32>| {
            let f1 = stream[idx];
            idx += 1;
            Ok(f1)
        };
        let config = quick_config(5, 1, 10);
        let (_, state) = train_group(
            &model,
            0,
            &instances,
            &template,
            LoraConfig::default(),
            &config,
            &mut eval_fn,
        )
        .unwrap();
        for &f1 in &stream {
            best_seen = best_seen.max(f1);
        }
        assert_eq!(state.best_f1, best_seen);
        assert_eq!(state.stop_reason, StopReason::MaxSteps);
        assert_eq!(state.evals_since_improvement, 2);
    }

    #[test]
    fn optimizer_leaves_base_parameters_untouched() {
        let model = tiny_model();
        let before = model.clone();
        let template = PromptTemplate::default();
        let instances = tiny_instances(4);
        let mut eval_fn = |_: &LoraAdapterSet<f32>| Ok(0.5);
        let config = quick_config(3, 2, 5);
        let (set, _) = train_group(
            &model,
            0,
            &instances,
            &template,
            LoraConfig { dropout_p: 0.0, ..Default::default() },
            &config,
            &mut eval_fn,
        )
        .unwrap();
        assert_eq!(model, before, "base parameters must stay frozen");
        assert_eq!(set.meta.seed, config.seed);
    }

    #[test]
    fn degenerate_group_keeps_init_adapters() {
        let model = tiny_model();
        let template = PromptTemplate::default();
        let mut instances = tiny_instances(4);
        for inst in &mut instances {
            inst.label = false;
        }
        let mut eval_fn = |_: &LoraAdapterSet<f32>| panic!("degenerate groups never evaluate");
        let config = quick_config(10, 2, 5);
        let (set, state) = train_group(
            &model,
            0,
            &instances,
            &template,
            LoraConfig::default(),
            &config,
            &mut eval_fn,
        )
        .unwrap();
        assert_eq!(state.stop_reason, StopReason::Degenerate);
        let fresh = init_adapter_set::<f32>(&model.config, LoraConfig::default(), 0, config.seed).unwrap();
        assert_eq!(set.adapters, fresh.adapters);
    }

    #[test]
    fn same_seed_trains_identical_adapters() {
        let model = tiny_model();
        let template = PromptTemplate::default();
        let instances = tiny_instances(8);
        let run = || {
            let mut eval_fn = |_: &LoraAdapterSet<f32>| Ok(0.5);
            let config = quick_config(4, 2, 8);
            train_group(
                &model,
                0,
                &instances,
                &template,
                LoraConfig::default(),
                &config,
                &mut eval_fn,
            )
            .unwrap()
            .0
        };
        let a = run();
        let b = run();
        assert_eq!(a.adapters, b.adapters);
    }

    #[test]
    fn zero_warm_steps_is_a_no_op() {
        let mut model = tiny_model();
        let before = model.clone();
        let config = WarmConfig {
            steps: 0,
            ..Default::default()
        };
        warm_phase(&mut model, &["text".into()], &config).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn warm_phase_reduces_held_out_loss() {
        let mut model = tiny_model();
        let texts: Vec<String> = (0..16)
            .map(|i| format!("pattern {} repeats: alpha beta gamma.", i % 4))
            .collect();
        let held_out: Vec<String> = (0..4)
            .map(|i| format!("pattern {} repeats: alpha beta gamma.", i % 4))
            .collect();
        let before = lm_loss_on_texts(&model, &held_out, 64).unwrap();
        let config = WarmConfig {
            steps: 60,
            batch_size: 4,
            base_lr: 3e-3,
            warmup_steps: 10,
            seed: 2,
            max_tokens: 64,
        };
        warm_phase(&mut model, &texts, &config).unwrap();
        let after = lm_loss_on_texts(&model, &held_out, 64).unwrap();
        assert!(after < before, "warm phase must reduce loss: {before} -> {after}");
    }
}
