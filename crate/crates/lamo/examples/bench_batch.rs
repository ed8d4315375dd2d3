use lamo::model::{lm_loss_targets, loss_and_grad, GradMode, ModelConfig, ModelParams};
use rayon::prelude::*;
use std::time::Instant;

fn main() {
    let config = ModelConfig { d_model: 128, n_layers: 4, n_heads: 4, d_ffn: 512, context_length: 512, seed: 1 };
    let model: ModelParams<f32> = ModelParams::init(config).unwrap();
    let seqs: Vec<Vec<u32>> = (0..8).map(|s| (0..330).map(|i| ((i + s * 13) % 250) as u32).collect()).collect();

    // Sequential
    let t0 = Instant::now();
    for s in &seqs {
        let targets = lm_loss_targets(s);
        loss_and_grad(&model, None, s, &targets, GradMode::Full, None, "b").unwrap();
    }
    println!("sequential 8 instances: {:.2} s", t0.elapsed().as_secs_f64());

    // Parallel
    let t0 = Instant::now();
    let _: Vec<_> = seqs.par_iter().map(|s| {
        let targets = lm_loss_targets(s);
        loss_and_grad(&model, None, s, &targets, GradMode::Full, None, "b").unwrap().loss
    }).collect();
    println!("parallel   8 instances: {:.2} s (threads={})", t0.elapsed().as_secs_f64(), rayon::current_num_threads());
}
