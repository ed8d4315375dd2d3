use lamo::model::{lm_loss_targets, loss_and_grad, GradMode, ModelConfig, ModelParams};
use std::time::Instant;

fn main() {
    let config = ModelConfig { d_model: 128, n_layers: 4, n_heads: 4, d_ffn: 512, context_length: 512, seed: 1 };
    let model: ModelParams<f32> = ModelParams::init(config).unwrap();
    let tokens: Vec<u32> = (0..400).map(|i| (i % 250) as u32).collect();
    let targets = lm_loss_targets(&tokens);
    let t0 = Instant::now();
    for _ in 0..30 {
        loss_and_grad(&model, None, &tokens, &targets, GradMode::Full, None, "b").unwrap();
    }
    println!("30 reps: {:.2} s", t0.elapsed().as_secs_f64());
}
