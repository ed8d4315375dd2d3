use lamo::math::{matmul_acc, Mat};
use lamo::model::{forward_logits, loss_and_grad, lm_loss_targets, GradMode, ModelConfig, ModelParams};
use std::time::Instant;

fn main() {
    // raw matmul: (400x128)·(128x128), 100 reps
    let x: Mat<f32> = Mat::from_rows(400, 128, (0..400*128).map(|i| (i % 7) as f32 * 0.1).collect());
    let w: Mat<f32> = Mat::from_rows(128, 128, (0..128*128).map(|i| (i % 5) as f32 * 0.1).collect());
    let mut out = Mat::zeros(400, 128);
    let t0 = Instant::now();
    for _ in 0..200 { out.fill(0.0); matmul_acc(&mut out, &x, &w); }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 200.0 * 2.0 * 400.0 * 128.0 * 128.0;
    println!("matmul: {:.1} GFLOP/s", flops / dt / 1e9);

    let config = ModelConfig { d_model: 128, n_layers: 4, n_heads: 4, d_ffn: 512, context_length: 512, seed: 1 };
    let model: ModelParams<f32> = ModelParams::init(config).unwrap();
    let tokens: Vec<u32> = (0..400).map(|i| (i % 250) as u32).collect();

    let t0 = Instant::now();
    for _ in 0..10 { forward_logits(&model, None, &tokens).unwrap(); }
    let dt = t0.elapsed().as_secs_f64() / 10.0;
    println!("forward 400 tokens: {:.1} ms", dt * 1000.0);

    let targets = lm_loss_targets(&tokens);
    let t0 = Instant::now();
    for _ in 0..5 { loss_and_grad(&model, None, &tokens, &targets, GradMode::Full, None, "b").unwrap(); }
    let dt = t0.elapsed().as_secs_f64() / 5.0;
    println!("full fwd+bwd 400 tokens: {:.1} ms", dt * 1000.0);
}
