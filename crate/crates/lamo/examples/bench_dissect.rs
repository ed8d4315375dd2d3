use lamo::math::{dot, matmul_acc, softmax_inplace, Mat};
use lamo::model::{ModelConfig, ModelParams};
use std::time::Instant;

fn main() {
    let config = ModelConfig { d_model: 128, n_layers: 4, n_heads: 4, d_ffn: 512, context_length: 512, seed: 1 };
    let model: ModelParams<f32> = ModelParams::init(config).unwrap();
    let t_len = 400usize;
    let d = 128usize;
    let reps = 20;

    let mut t_embed = 0.0; let mut t_norm = 0.0; let mut t_proj = 0.0;
    let mut t_attn = 0.0; let mut t_ffn_mm = 0.0; let mut t_gelu = 0.0; let mut t_logits = 0.0;

    for _ in 0..reps {
        let t0 = Instant::now();
        let mut x = Mat::<f32>::zeros(t_len, d);
        for t in 0..t_len {
            let er = model.embed.row(t % 250);
            let pr = model.pos_embed.row(t);
            let xr = x.row_mut(t);
            for i in 0..d { xr[i] = er[i] + pr[i]; }
        }
        t_embed += t0.elapsed().as_secs_f64();

        for layer in &model.layers {
            let t0 = Instant::now();
            let mut n1 = Mat::zeros(t_len, d);
            let mut invs = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let row = x.row(t);
                let ms = dot(row, row) / d as f32;
                let inv = 1.0 / (ms + 1e-5).sqrt();
                let nr = n1.row_mut(t);
                for i in 0..d { nr[i] = row[i] * inv * layer.attn_norm[i]; }
                invs.push(inv);
            }
            t_norm += t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            let mut q = Mat::zeros(t_len, d); matmul_acc(&mut q, &n1, &layer.q_proj);
            let mut k = Mat::zeros(t_len, d); matmul_acc(&mut k, &n1, &layer.k_proj);
            let mut v = Mat::zeros(t_len, d); matmul_acc(&mut v, &n1, &layer.v_proj);
            t_proj += t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            let hd = d / 4;
            let scale = 1.0 / (hd as f32).sqrt();
            let mut ctx = Mat::zeros(t_len, d);
            for h in 0..4 {
                let off = h * hd;
                let mut p = Mat::<f32>::zeros(t_len, t_len);
                for t in 0..t_len {
                    let qr = &q.row(t)[off..off + hd];
                    {
                        let pr = &mut p.row_mut(t)[..=t];
                        for (u, pu) in pr.iter_mut().enumerate() {
                            *pu = dot(qr, &k.row(u)[off..off + hd]) * scale;
                        }
                    }
                    softmax_inplace(&mut p.row_mut(t)[..=t]);
                    let mut acc = vec![0.0f32; hd];
                    for u in 0..=t {
                        let w = p.at(t, u);
                        let vr = &v.row(u)[off..off + hd];
                        for i in 0..hd { acc[i] += w * vr[i]; }
                    }
                    ctx.row_mut(t)[off..off + hd].copy_from_slice(&acc);
                }
            }
            t_attn += t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            let mut attn_out = Mat::zeros(t_len, d);
            matmul_acc(&mut attn_out, &ctx, &layer.o_proj);
            for (xm, ao) in x.data.iter_mut().zip(attn_out.data.iter()) { *xm += *ao; }
            let mut n2 = Mat::zeros(t_len, d);
            for t in 0..t_len {
                let row = x.row(t);
                let ms = dot(row, row) / d as f32;
                let inv = 1.0 / (ms + 1e-5).sqrt();
                let nr = n2.row_mut(t);
                for i in 0..d { nr[i] = row[i] * inv * layer.ffn_norm[i]; }
            }
            let mut h_pre = Mat::zeros(t_len, 512);
            matmul_acc(&mut h_pre, &n2, &layer.ffn_in);
            t_ffn_mm += t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            let mut h_act = Mat::zeros(t_len, 512);
            for (a, &pv) in h_act.data.iter_mut().zip(h_pre.data.iter()) { *a = lamo::math::gelu(pv); }
            t_gelu += t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            let mut ffn_out = Mat::zeros(t_len, d);
            matmul_acc(&mut ffn_out, &h_act, &layer.ffn_out);
            for (xo, f) in x.data.iter_mut().zip(ffn_out.data.iter()) { *xo += *f; }
            t_ffn_mm += t0.elapsed().as_secs_f64();
        }

        let t0 = Instant::now();
        let mut logit_sum = 0.0f32;
        for t in 0..t_len {
            let mut logits = vec![0.0f32; 259];
            for (i, &h) in x.row(t).iter().enumerate() {
                let wr = model.lm_head.row(i);
                for vv in 0..259 { logits[vv] += h * wr[vv]; }
            }
            logit_sum += logits[0];
        }
        t_logits += t0.elapsed().as_secs_f64();
        std::hint::black_box(logit_sum);
    }
    let ms = |t: f64| t / reps as f64 * 1000.0;
    println!("embed {:.1}  norm {:.1}  qkv {:.1}  attn {:.1}  ffn+o {:.1}  gelu {:.1}  logits {:.1}",
        ms(t_embed), ms(t_norm), ms(t_proj), ms(t_attn), ms(t_ffn_mm), ms(t_gelu), ms(t_logits));
}
