//! Causal forward pass with optional low-rank adapter deltas on the q/v
//! projections. Training-mode calls record a [`ForwardTrace`] holding every
//! activation the backward pass needs; inference calls record nothing.

use crate::error::{Error, Result};
use crate::lora::LoraAdapterSet;
use crate::math::{dot, matmul_acc, softmax_inplace, Mat, Real};
use crate::model::params::ModelParams;
use crate::model::tokenizer::VOCAB_SIZE;
use crate::rng::Rng;

/// Cached activations for one transformer block.
pub struct LayerTrace<T> {
    pub x_in: Mat<T>,
    pub inv1: Vec<T>,
    pub n1: Mat<T>,
    /// Post-dropout adapter inputs and keep masks, present only when the
    /// forward ran in training mode with dropout enabled.
    pub q_dropped: Option<(Mat<T>, Vec<bool>)>,
    pub v_dropped: Option<(Mat<T>, Vec<bool>)>,
    /// Adapter bottleneck activations `A . drop(x)`, per target.
    pub q_u: Option<Mat<T>>,
    pub v_u: Option<Mat<T>>,
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    pub probs: Vec<Mat<T>>,
    pub ctx: Mat<T>,
    pub inv2: Vec<T>,
    pub n2: Mat<T>,
    pub h_pre: Mat<T>,
    pub h_act: Mat<T>,
}

/// Present iff the forward ran in training mode.
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
    pub x_final: Mat<T>,
    pub inv_f: Vec<T>,
}

pub const RMS_EPS: f64 = 1e-5;

/// Row-wise RMS norm with learned gain; returns the normed rows and the
/// per-row inverse RMS needed by backward.
pub fn rmsnorm_rows<T: Real>(x: &Mat<T>, gain: &[T]) -> (Mat<T>, Vec<T>) {
    let d = x.cols;
    let mut out = Mat::zeros(x.rows, d);
    let mut invs = Vec::with_capacity(x.rows);
    let eps = T::from_f64(RMS_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for t in 0..x.rows {
        let row = x.row(t);
        let ms = dot(row, row) * inv_d;
        let inv = T::ONE / (ms + eps).sqrt();
        let or = out.row_mut(t);
        for i in 0..d {
            or[i] = row[i] * inv * gain[i];
        }
        invs.push(inv);
    }
    (out, invs)
}

/// Inverted dropout over a whole matrix; returns the dropped copy and mask.
fn dropout_mat<T: Real>(x: &Mat<T>, p: f64, rng: &mut Rng) -> (Mat<T>, Vec<bool>) {
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut mask = vec![false; x.data.len()];
    for (i, &v) in x.data.iter().enumerate() {
        if !rng.chance(p) {
            mask[i] = true;
            out.data[i] = v * keep_scale;
        }
    }
    (out, mask)
}

/// Applies one adapter on top of a base projection already accumulated into
/// `y`. Returns the intermediates needed by backward.
#[allow(clippy::type_complexity)]
fn apply_adapter<T: Real>(
    y: &mut Mat<T>,
    x: &Mat<T>,
    set: &LoraAdapterSet<T>,
    adapter_idx: usize,
    dropout_rng: &mut Option<&mut Rng>,
) -> (Option<(Mat<T>, Vec<bool>)>, Mat<T>) {
    let adapter = &set.adapters[adapter_idx];
    let p = set.config.dropout_p;
    let dropped: Option<(Mat<T>, Vec<bool>)> = match dropout_rng {
        Some(rng) if p > 0.0 => Some(dropout_mat(x, p, rng)),
        _ => None,
    };
    // The dropped copy doubles as a backward cache; inference reads x directly.
    let input: &Mat<T> = dropped.as_ref().map_or(x, |(m, _)| m);

    let r = adapter.a.rows;
    let mut u = Mat::zeros(x.rows, r);
    for t in 0..x.rows {
        let xr = input.row(t);
        let ur = u.row_mut(t);
        for j in 0..r {
            ur[j] = dot(adapter.a.row(j), xr);
        }
    }
    let scale = T::from_f64(set.config.scaling());
    let d_out = y.cols;
    for t in 0..x.rows {
        let ur = u.row(t);
        let yr = y.row_mut(t);
        for o in 0..d_out {
            yr[o] += scale * dot(adapter.b.row(o), ur);
        }
    }
    (dropped, u)
}

/// Multi-head causal attention; fills `probs` (one `T x T` matrix per head)
/// and returns the concatenated head outputs.
fn attention<T: Real>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, n_heads: usize, probs: &mut Vec<Mat<T>>) -> Mat<T> {
    let t_len = q.rows;
    let d = q.cols;
    let hd = d / n_heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut ctx = Mat::zeros(t_len, d);
    let mut acc = vec![T::ZERO; hd];
    for h in 0..n_heads {
        let off = h * hd;
        let mut p = Mat::zeros(t_len, t_len);
        for t in 0..t_len {
            let qr = &q.data[t * d + off..t * d + off + hd];
            {
                let pr = &mut p.data[t * t_len..t * t_len + t + 1];
                for (u, pu) in pr.iter_mut().enumerate() {
                    let kr = &k.data[u * d + off..u * d + off + hd];
                    *pu = dot(qr, kr) * scale;
                }
                softmax_inplace(pr);
            }
            // Weighted value sum, four source positions per pass.
            acc.iter_mut().for_each(|a| *a = T::ZERO);
            let pr = &p.data[t * t_len..t * t_len + t + 1];
            let u_main = (t + 1) / 4 * 4;
            let mut u = 0;
            while u < u_main {
                let (p0, p1, p2, p3) = (pr[u], pr[u + 1], pr[u + 2], pr[u + 3]);
                let v0 = &v.data[u * d + off..u * d + off + hd];
                let v1 = &v.data[(u + 1) * d + off..(u + 1) * d + off + hd];
                let v2 = &v.data[(u + 2) * d + off..(u + 2) * d + off + hd];
                let v3 = &v.data[(u + 3) * d + off..(u + 3) * d + off + hd];
                for i in 0..hd {
                    let s = p0.mul_add(v0[i], p1.mul_add(v1[i], p2.mul_add(v2[i], p3 * v3[i])));
                    acc[i] += s;
                }
                u += 4;
            }
            while u <= t {
                let w = pr[u];
                let vr = &v.data[u * d + off..u * d + off + hd];
                for i in 0..hd {
                    acc[i] = w.mul_add(vr[i], acc[i]);
                }
                u += 1;
            }
            ctx.row_mut(t)[off..off + hd].copy_from_slice(&acc);
        }
        probs.push(p);
    }
    ctx
}

/// Runs the model over `tokens` and returns the final normed hidden states
/// (`T x d`). `dropout_rng: Some` marks training mode (adapter dropout on);
/// `want_trace` additionally records activations for backward.
pub fn forward_hidden<T: Real>(
    model: &ModelParams<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    tokens: &[u32],
    mut dropout_rng: Option<&mut Rng>,
    want_trace: bool,
) -> Result<(Mat<T>, Option<ForwardTrace<T>>)> {
    let cfg = &model.config;
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(Error::Model("empty token sequence".into()));
    }
    if t_len > cfg.context_length {
        return Err(Error::ContextOverflow {
            len: t_len,
            context: cfg.context_length,
        });
    }
    let d = cfg.d_model;
    let mut x = Mat::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        if tok >= VOCAB_SIZE {
            return Err(Error::Model(format!("token id {tok} out of range")));
        }
        let er = model.embed.row(tok);
        let pr = model.pos_embed.row(t);
        let xr = x.row_mut(t);
        for i in 0..d {
            xr[i] = er[i] + pr[i];
        }
    }

    let mut layer_traces = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        let (n1, inv1) = rmsnorm_rows(&x, &layer.attn_norm);

        let mut q = Mat::zeros(t_len, d);
        matmul_acc(&mut q, &n1, &layer.q_proj);
        let mut k = Mat::zeros(t_len, d);
        matmul_acc(&mut k, &n1, &layer.k_proj);
        let mut v = Mat::zeros(t_len, d);
        matmul_acc(&mut v, &n1, &layer.v_proj);

        let (mut q_dropped, mut q_u, mut v_dropped, mut v_u) = (None, None, None, None);
        if let Some(set) = adapters {
            let (qd, qu) = apply_adapter(&mut q, &n1, set, 2 * li, &mut dropout_rng);
            let (vd, vu) = apply_adapter(&mut v, &n1, set, 2 * li + 1, &mut dropout_rng);
            q_dropped = qd;
            q_u = Some(qu);
            v_dropped = vd;
            v_u = Some(vu);
        }

        let mut probs = Vec::new();
        let ctx = attention(&q, &k, &v, cfg.n_heads, &mut probs);

        let mut attn_out = Mat::zeros(t_len, d);
        matmul_acc(&mut attn_out, &ctx, &layer.o_proj);
        let mut x_mid = x.clone();
        for (xm, ao) in x_mid.data.iter_mut().zip(attn_out.data.iter()) {
            *xm += *ao;
        }

        let (n2, inv2) = rmsnorm_rows(&x_mid, &layer.ffn_norm);
        let mut h_pre = Mat::zeros(t_len, cfg.d_ffn);
        matmul_acc(&mut h_pre, &n2, &layer.ffn_in);
        let mut h_act = Mat::zeros(t_len, cfg.d_ffn);
        for (a, &p) in h_act.data.iter_mut().zip(h_pre.data.iter()) {
            *a = crate::math::gelu(p);
        }
        let mut ffn_out = Mat::zeros(t_len, d);
        matmul_acc(&mut ffn_out, &h_act, &layer.ffn_out);

        let mut x_out = x_mid.clone();
        for (xo, f) in x_out.data.iter_mut().zip(ffn_out.data.iter()) {
            *xo += *f;
        }

        if want_trace {
            layer_traces.push(LayerTrace {
                x_in: x,
                inv1,
                n1,
                q_dropped,
                v_dropped,
                q_u,
                v_u,
                q,
                k,
                v,
                probs,
                ctx,
                inv2,
                n2,
                h_pre,
                h_act,
            });
        }
        x = x_out;
    }

    let (n_f, inv_f) = rmsnorm_rows(&x, &model.final_norm);
    let trace = want_trace.then_some(ForwardTrace {
        layers: layer_traces,
        x_final: x,
        inv_f,
    });
    Ok((n_f, trace))
}

/// Vocabulary logits for one hidden row.
pub fn logits_for_row<T: Real>(model: &ModelParams<T>, hidden_row: &[T]) -> Vec<T> {
    let mut logits = vec![T::ZERO; VOCAB_SIZE];
    for (i, &h) in hidden_row.iter().enumerate() {
        let wr = model.lm_head.row(i);
        for v in 0..VOCAB_SIZE {
            logits[v] += h * wr[v];
        }
    }
    logits
}

/// Full logits matrix (`T x vocab`), inference mode. Causal masking means
/// row `t` depends on tokens `0..=t` only.
pub fn forward_logits<T: Real>(
    model: &ModelParams<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    tokens: &[u32],
) -> Result<Mat<T>> {
    let (hidden, _) = forward_hidden(model, adapters, tokens, None, false)?;
    let mut logits = Mat::zeros(hidden.rows, VOCAB_SIZE);
    for t in 0..hidden.rows {
        let row = logits_for_row(model, hidden.row(t));
        logits.row_mut(t).copy_from_slice(&row);
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_adapter_set, LoraConfig};
    use crate::model::params::ModelConfig;

    fn tiny() -> ModelParams<f32> {
        ModelParams::init(ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 32,
            context_length: 32,
            seed: 17,
        })
        .unwrap()
    }

    #[test]
    fn fresh_adapters_leave_logits_bitwise_equal() {
        let model = tiny();
        let set = init_adapter_set(&model.config, LoraConfig::default(), 0, 3).unwrap();
        let tokens: Vec<u32> = "hello world".bytes().map(u32::from).collect();
        let base = forward_logits(&model, None, &tokens).unwrap();
        let adapted = forward_logits(&model, Some(&set), &tokens).unwrap();
        assert_eq!(base.data, adapted.data);
    }

    #[test]
    fn causality_later_tokens_do_not_affect_earlier_logits() {
        let model = tiny();
        let a: Vec<u32> = "abcdef".bytes().map(u32::from).collect();
        let mut b = a.clone();
        b[4] = u32::from(b'Z');
        b[5] = u32::from(b'Q');
        let la = forward_logits(&model, None, &a).unwrap();
        let lb = forward_logits(&model, None, &b).unwrap();
        for t in 0..4 {
            assert_eq!(la.row(t), lb.row(t), "position {t} changed");
        }
        assert_ne!(la.row(5), lb.row(5));
    }

    #[test]
    fn batch_order_does_not_change_per_sequence_logits() {
        let model = tiny();
        let seqs: Vec<Vec<u32>> = ["one", "two", "three"]
            .iter()
            .map(|s| s.bytes().map(u32::from).collect())
            .collect();
        let first: Vec<_> = seqs.iter().map(|s| forward_logits(&model, None, s).unwrap()).collect();
        let reversed: Vec<_> = seqs
            .iter()
            .rev()
            .map(|s| forward_logits(&model, None, s).unwrap())
            .collect();
        assert_eq!(first[0].data, reversed[2].data);
        assert_eq!(first[2].data, reversed[0].data);
    }

    #[test]
    fn overlong_input_is_an_error() {
        let model = tiny();
        let tokens = vec![65u32; 33];
        assert!(matches!(
            forward_logits(&model, None, &tokens),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn f32_and_f64_paths_agree() {
        let model = tiny();
        let model64 = model.to_f64();
        let tokens: Vec<u32> = "agreement".bytes().map(u32::from).collect();
        let l32 = forward_logits(&model, None, &tokens).unwrap();
        let l64 = forward_logits(&model64, None, &tokens).unwrap();
        for (a, b) in l32.data.iter().zip(l64.data.iter()) {
            assert!((f64::from(*a) - b).abs() < 1e-4);
        }
    }
}
