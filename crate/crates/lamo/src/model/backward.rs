//! Reverse-mode gradients, written by hand against the forward trace.
//!
//! Two modes: adapter-only (base frozen, gradients exist solely for the
//! low-rank matrices) and full (every base tensor, used by the warm phase).
//! Loss is mean cross-entropy over caller-chosen positions, so answer-token
//! supervision and plain next-token training share one path.

use crate::error::{Error, Result};
use crate::lora::LoraAdapterSet;
use crate::math::{
    axpy, dot, gelu_grad, grad_weight_acc, log_sum_exp, matmul_acc, matmul_acc_wt, Mat, Real,
};
use crate::model::forward::{forward_hidden, ForwardTrace};
use crate::model::params::{LayerParams, ModelParams};
use crate::model::tokenizer::VOCAB_SIZE;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Gradients for the active adapter set only; base gradients are absent.
    AdaptersOnly,
    /// Gradients for every base tensor (no adapters may be attached).
    Full,
}

/// Gradients for one adapter (same shapes as its `a`/`b`).
#[derive(Debug, Clone)]
pub struct AdapterGrad<T> {
    pub da: Mat<T>,
    pub db: Mat<T>,
}

#[derive(Debug, Clone)]
pub struct AdapterGrads<T> {
    pub per_adapter: Vec<AdapterGrad<T>>,
}

impl<T: Real> AdapterGrads<T> {
    pub fn zeros_like(set: &LoraAdapterSet<T>) -> Self {
        AdapterGrads {
            per_adapter: set
                .adapters
                .iter()
                .map(|ad| AdapterGrad {
                    da: Mat::zeros(ad.a.rows, ad.a.cols),
                    db: Mat::zeros(ad.b.rows, ad.b.cols),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &AdapterGrads<T>) {
        for (g, o) in self.per_adapter.iter_mut().zip(other.per_adapter.iter()) {
            for (a, b) in g.da.data.iter_mut().zip(o.da.data.iter()) {
                *a += *b;
            }
            for (a, b) in g.db.data.iter_mut().zip(o.db.data.iter()) {
                *a += *b;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.per_adapter {
            g.da.data.iter_mut().for_each(|v| *v *= factor);
            g.db.data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub attn_norm: Vec<T>,
    pub q_proj: Mat<T>,
    pub k_proj: Mat<T>,
    pub v_proj: Mat<T>,
    pub o_proj: Mat<T>,
    pub ffn_norm: Vec<T>,
    pub ffn_in: Mat<T>,
    pub ffn_out: Mat<T>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub embed: Mat<T>,
    pub pos_embed: Mat<T>,
    pub layers: Vec<LayerGrads<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Mat<T>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros_like(model: &ModelParams<T>) -> Self {
        ModelGrads {
            embed: Mat::zeros(model.embed.rows, model.embed.cols),
            pos_embed: Mat::zeros(model.pos_embed.rows, model.pos_embed.cols),
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    attn_norm: vec![T::ZERO; l.attn_norm.len()],
                    q_proj: Mat::zeros(l.q_proj.rows, l.q_proj.cols),
                    k_proj: Mat::zeros(l.k_proj.rows, l.k_proj.cols),
                    v_proj: Mat::zeros(l.v_proj.rows, l.v_proj.cols),
                    o_proj: Mat::zeros(l.o_proj.rows, l.o_proj.cols),
                    ffn_norm: vec![T::ZERO; l.ffn_norm.len()],
                    ffn_in: Mat::zeros(l.ffn_in.rows, l.ffn_in.cols),
                    ffn_out: Mat::zeros(l.ffn_out.rows, l.ffn_out.cols),
                })
                .collect(),
            final_norm: vec![T::ZERO; model.final_norm.len()],
            lm_head: Mat::zeros(model.lm_head.rows, model.lm_head.cols),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads<T>) {
        let add_mat = |a: &mut Mat<T>, b: &Mat<T>| {
            for (x, y) in a.data.iter_mut().zip(b.data.iter()) {
                *x += *y;
            }
        };
        let add_vec = |a: &mut Vec<T>, b: &[T]| {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        };
        add_mat(&mut self.embed, &other.embed);
        add_mat(&mut self.pos_embed, &other.pos_embed);
        for (l, o) in self.layers.iter_mut().zip(other.layers.iter()) {
            add_vec(&mut l.attn_norm, &o.attn_norm);
            add_mat(&mut l.q_proj, &o.q_proj);
            add_mat(&mut l.k_proj, &o.k_proj);
            add_mat(&mut l.v_proj, &o.v_proj);
            add_mat(&mut l.o_proj, &o.o_proj);
            add_vec(&mut l.ffn_norm, &o.ffn_norm);
            add_mat(&mut l.ffn_in, &o.ffn_in);
            add_mat(&mut l.ffn_out, &o.ffn_out);
        }
        add_vec(&mut self.final_norm, &other.final_norm);
        add_mat(&mut self.lm_head, &other.lm_head);
    }

    pub fn scale(&mut self, factor: T) {
        self.embed.data.iter_mut().for_each(|v| *v *= factor);
        self.pos_embed.data.iter_mut().for_each(|v| *v *= factor);
        for l in &mut self.layers {
            l.attn_norm.iter_mut().for_each(|v| *v *= factor);
            l.q_proj.data.iter_mut().for_each(|v| *v *= factor);
            l.k_proj.data.iter_mut().for_each(|v| *v *= factor);
            l.v_proj.data.iter_mut().for_each(|v| *v *= factor);
            l.o_proj.data.iter_mut().for_each(|v| *v *= factor);
            l.ffn_norm.iter_mut().for_each(|v| *v *= factor);
            l.ffn_in.data.iter_mut().for_each(|v| *v *= factor);
            l.ffn_out.data.iter_mut().for_each(|v| *v *= factor);
        }
        self.final_norm.iter_mut().for_each(|v| *v *= factor);
        self.lm_head.data.iter_mut().for_each(|v| *v *= factor);
    }
}

#[derive(Debug)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub adapter_grads: Option<AdapterGrads<T>>,
    pub model_grads: Option<Box<ModelGrads<T>>>,
}

/// RMS-norm backward for one row. `x` is the pre-norm input, `inv` its
/// cached inverse RMS. Adds the input gradient into `dx`; gain gradient is
/// accumulated when `dgain` is provided.
fn rmsnorm_backward_row<T: Real>(
    dy: &[T],
    x: &[T],
    inv: T,
    gain: &[T],
    dx: &mut [T],
    mut dgain: Option<&mut [T]>,
) {
    let d = x.len();
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dot_gy_xhat = T::ZERO;
    for i in 0..d {
        dot_gy_xhat += dy[i] * gain[i] * x[i] * inv;
    }
    let corr = dot_gy_xhat * inv_d;
    for i in 0..d {
        let xhat = x[i] * inv;
        dx[i] += inv * (gain[i] * dy[i] - xhat * corr);
        if let Some(dg) = dgain.as_deref_mut() {
            dg[i] += dy[i] * xhat;
        }
    }
}

struct AdapterBackwardOut<T> {
    da: Mat<T>,
    db: Mat<T>,
}

/// Backward through one adapter delta `s * U B^T` with `U = Xd A^T`.
/// Adds the input gradient (through dropout) into `dn`.
fn adapter_backward<T: Real>(
    dy: &Mat<T>,
    set: &LoraAdapterSet<T>,
    adapter_idx: usize,
    u: &Mat<T>,
    dropped: Option<&(Mat<T>, Vec<bool>)>,
    n1: &Mat<T>,
    dn: &mut Mat<T>,
) -> AdapterBackwardOut<T> {
    let adapter = &set.adapters[adapter_idx];
    let scale = T::from_f64(set.config.scaling());
    let keep_scale = T::from_f64(1.0 / (1.0 - set.config.dropout_p));
    let (r, d_in) = (adapter.a.rows, adapter.a.cols);
    let d_out = adapter.b.rows;
    let t_len = dy.rows;

    let mut da = Mat::zeros(r, d_in);
    let mut db = Mat::zeros(d_out, r);
    let xd: &Mat<T> = dropped.map_or(n1, |(m, _)| m);

    let mut du = vec![T::ZERO; r];
    let mut dxd = vec![T::ZERO; d_in];
    for t in 0..t_len {
        let dyr = dy.row(t);
        let ur = u.row(t);
        // dB += s * dy_t (outer) u_t ; dU_t = s * dy_t . B
        du.iter_mut().for_each(|v| *v = T::ZERO);
        for o in 0..d_out {
            let g = dyr[o] * scale;
            axpy(db.row_mut(o), g, ur);
            axpy(&mut du, g, adapter.b.row(o));
        }
        // dA += dU_t (outer) xd_t ; dXd_t = dU_t . A
        dxd.iter_mut().for_each(|v| *v = T::ZERO);
        let xr = xd.row(t);
        for j in 0..r {
            axpy(da.row_mut(j), du[j], xr);
            axpy(&mut dxd, du[j], adapter.a.row(j));
        }
        let dnr = dn.row_mut(t);
        match dropped {
            Some((_, mask)) => {
                let base = t * d_in;
                for i in 0..d_in {
                    if mask[base + i] {
                        dnr[i] += dxd[i] * keep_scale;
                    }
                }
            }
            None => axpy(dnr, T::ONE, &dxd),
        }
    }
    AdapterBackwardOut { da, db }
}

/// Forward + loss + reverse pass.
///
/// `loss_targets` pairs a logit row with the token it must predict (row `t`
/// scores the token at position `t + 1`). The loss is the mean cross-entropy
/// over those rows.
pub fn loss_and_grad<T: Real>(
    model: &ModelParams<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    tokens: &[u32],
    loss_targets: &[(usize, u32)],
    mode: GradMode,
    dropout_rng: Option<&mut Rng>,
    instance_id: &str,
) -> Result<LossGrad<T>> {
    if loss_targets.is_empty() {
        return Err(Error::Model("no loss positions supplied".into()));
    }
    if mode == GradMode::Full {
        assert!(adapters.is_none(), "full-mode gradients train the bare base model");
    }
    let cfg = &model.config;
    let (n_f, trace) = forward_hidden(model, adapters, tokens, dropout_rng, true)?;
    let trace: ForwardTrace<T> = trace.expect("trace requested");
    let t_len = tokens.len();
    let d = cfg.d_model;

    let mut model_grads = match mode {
        GradMode::Full => Some(Box::new(ModelGrads::zeros_like(model))),
        GradMode::AdaptersOnly => None,
    };
    let mut adapter_grads = adapters.map(AdapterGrads::zeros_like);

    // Cross-entropy at the supervised rows; d n_f is dense in rows, sparse in
    // positions.
    let inv_n = 1.0 / loss_targets.len() as f64;
    let mut loss = 0.0;
    let mut d_nf = Mat::zeros(t_len, d);
    for &(row, target) in loss_targets {
        assert!(row < t_len, "loss row {row} out of range");
        let mut logits = vec![T::ZERO; VOCAB_SIZE];
        let hr = n_f.row(row);
        for (i, &h) in hr.iter().enumerate() {
            axpy(&mut logits, h, model.lm_head.row(i));
        }
        let lse = log_sum_exp(&logits);
        let lp = (logits[target as usize] - lse).to_f64();
        loss -= lp * inv_n;

        // dlogits = (softmax - onehot) / n
        let mut dlogits = logits;
        let m = lse;
        for v in dlogits.iter_mut() {
            *v = (*v - m).exp();
        }
        dlogits[target as usize] -= T::ONE;
        let scale = T::from_f64(inv_n);
        for v in dlogits.iter_mut() {
            *v *= scale;
        }

        // d n_f row and (full mode) lm_head grad.
        let dnr = d_nf.row_mut(row);
        for i in 0..d {
            dnr[i] += dot(&dlogits, model.lm_head.row(i));
        }
        if let Some(g) = model_grads.as_deref_mut() {
            for i in 0..d {
                axpy(g.lm_head.row_mut(i), hr[i], &dlogits);
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            instance_id: instance_id.to_string(),
        });
    }

    // Final norm backward.
    let mut dx = Mat::zeros(t_len, d);
    for t in 0..t_len {
        rmsnorm_backward_row(
            d_nf.row(t),
            trace.x_final.row(t),
            trace.inv_f[t],
            &model.final_norm,
            dx.row_mut(t),
            model_grads.as_deref_mut().map(|g| &mut g.final_norm[..]),
        );
    }

    // Layers in reverse.
    for li in (0..cfg.n_layers).rev() {
        let layer: &LayerParams<T> = &model.layers[li];
        let tr = &trace.layers[li];
        let t_rows = t_len;

        // x_out = x_mid + h_act . W_out
        let d_ffn_out = &dx; // gradient at x_out flows to both summands
        let mut dh_act = Mat::zeros(t_rows, cfg.d_ffn);
        matmul_acc_wt(&mut dh_act, d_ffn_out, &layer.ffn_out);
        if let Some(g) = model_grads.as_deref_mut() {
            grad_weight_acc(&mut g.layers[li].ffn_out, &tr.h_act, d_ffn_out);
        }
        let mut dh_pre = dh_act;
        for (v, &p) in dh_pre.data.iter_mut().zip(tr.h_pre.data.iter()) {
            *v *= gelu_grad(p);
        }
        let mut dn2 = Mat::zeros(t_rows, d);
        matmul_acc_wt(&mut dn2, &dh_pre, &layer.ffn_in);
        if let Some(g) = model_grads.as_deref_mut() {
            grad_weight_acc(&mut g.layers[li].ffn_in, &tr.n2, &dh_pre);
        }

        // dx currently holds d x_out; x_mid receives it plus the norm path.
        // x_mid = x_in + ctx . W_o is recomputed rather than cached.
        let mut dx_mid = dx;
        let mut attn_out = Mat::zeros(t_rows, d);
        matmul_acc(&mut attn_out, &tr.ctx, &layer.o_proj);
        let mut x_mid = tr.x_in.clone();
        for (xm, ao) in x_mid.data.iter_mut().zip(attn_out.data.iter()) {
            *xm += *ao;
        }
        for t in 0..t_rows {
            let dn2_row = dn2.row(t).to_vec();
            rmsnorm_backward_row(
                &dn2_row,
                x_mid.row(t),
                tr.inv2[t],
                &layer.ffn_norm,
                dx_mid.row_mut(t),
                model_grads.as_deref_mut().map(|g| &mut g.layers[li].ffn_norm[..]),
            );
        }

        // Attention output projection.
        let mut d_ctx = Mat::zeros(t_rows, d);
        matmul_acc_wt(&mut d_ctx, &dx_mid, &layer.o_proj);
        if let Some(g) = model_grads.as_deref_mut() {
            grad_weight_acc(&mut g.layers[li].o_proj, &tr.ctx, &dx_mid);
        }

        // Heads.
        let hd = cfg.head_dim();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut dq = Mat::zeros(t_rows, d);
        let mut dk = Mat::zeros(t_rows, d);
        let mut dv = Mat::zeros(t_rows, d);
        let mut dp = vec![T::ZERO; t_rows];
        let mut ds_row = vec![T::ZERO; t_rows];
        for h in 0..cfg.n_heads {
            let off = h * hd;
            let probs = &tr.probs[h];
            for t in 0..t_rows {
                let dctx_t = &d_ctx.data[t * d + off..t * d + off + hd];
                let p_row = &probs.data[t * t_rows..t * t_rows + t + 1];
                // dV and dP.
                for u in 0..=t {
                    let vr = &tr.v.data[u * d + off..u * d + off + hd];
                    dp[u] = dot(dctx_t, vr);
                    let dv_row = &mut dv.data[u * d + off..u * d + off + hd];
                    axpy(dv_row, p_row[u], dctx_t);
                }
                // Softmax backward.
                let mut pdot = T::ZERO;
                for u in 0..=t {
                    pdot = dp[u].mul_add(p_row[u], pdot);
                }
                for u in 0..=t {
                    ds_row[u] = p_row[u] * (dp[u] - pdot) * scale;
                }
                let q_t = tr.q.data[t * d + off..t * d + off + hd].to_vec();
                // dq_t accumulates over sources, four at a time; dk scatters.
                let dq_t = &mut dq.data[t * d + off..t * d + off + hd];
                let u_main = (t + 1) / 4 * 4;
                let mut u = 0;
                while u < u_main {
                    let (s0, s1, s2, s3) = (ds_row[u], ds_row[u + 1], ds_row[u + 2], ds_row[u + 3]);
                    let k0 = &tr.k.data[u * d + off..u * d + off + hd];
                    let k1 = &tr.k.data[(u + 1) * d + off..(u + 1) * d + off + hd];
                    let k2 = &tr.k.data[(u + 2) * d + off..(u + 2) * d + off + hd];
                    let k3 = &tr.k.data[(u + 3) * d + off..(u + 3) * d + off + hd];
                    for i in 0..hd {
                        let s = s0.mul_add(k0[i], s1.mul_add(k1[i], s2.mul_add(k2[i], s3 * k3[i])));
                        dq_t[i] += s;
                    }
                    u += 4;
                }
                while u <= t {
                    let kr = &tr.k.data[u * d + off..u * d + off + hd];
                    for i in 0..hd {
                        dq_t[i] = ds_row[u].mul_add(kr[i], dq_t[i]);
                    }
                    u += 1;
                }
                for u in 0..=t {
                    let dk_row = &mut dk.data[u * d + off..u * d + off + hd];
                    axpy(dk_row, ds_row[u], &q_t);
                }
            }
        }

        // Projections back to n1.
        let mut dn1 = Mat::zeros(t_rows, d);
        matmul_acc_wt(&mut dn1, &dq, &layer.q_proj);
        matmul_acc_wt(&mut dn1, &dk, &layer.k_proj);
        matmul_acc_wt(&mut dn1, &dv, &layer.v_proj);
        if let Some(g) = model_grads.as_deref_mut() {
            grad_weight_acc(&mut g.layers[li].q_proj, &tr.n1, &dq);
            grad_weight_acc(&mut g.layers[li].k_proj, &tr.n1, &dk);
            grad_weight_acc(&mut g.layers[li].v_proj, &tr.n1, &dv);
        }
        if let (Some(set), Some(agrads)) = (adapters, adapter_grads.as_mut()) {
            let qa = adapter_backward(
                &dq,
                set,
                2 * li,
                tr.q_u.as_ref().expect("adapter trace"),
                tr.q_dropped.as_ref(),
                &tr.n1,
                &mut dn1,
            );
            let va = adapter_backward(
                &dv,
                set,
                2 * li + 1,
                tr.v_u.as_ref().expect("adapter trace"),
                tr.v_dropped.as_ref(),
                &tr.n1,
                &mut dn1,
            );
            for (slot, out) in [(2 * li, qa), (2 * li + 1, va)] {
                let g = &mut agrads.per_adapter[slot];
                for (a, b) in g.da.data.iter_mut().zip(out.da.data.iter()) {
                    *a += *b;
                }
                for (a, b) in g.db.data.iter_mut().zip(out.db.data.iter()) {
                    *a += *b;
                }
            }
        }

        // First norm backward into x_in; dx_mid carries the residual term.
        let mut dx_in = dx_mid;
        for t in 0..t_rows {
            let dn1_row = dn1.row(t).to_vec();
            rmsnorm_backward_row(
                &dn1_row,
                tr.x_in.row(t),
                tr.inv1[t],
                &layer.attn_norm,
                dx_in.row_mut(t),
                model_grads.as_deref_mut().map(|g| &mut g.layers[li].attn_norm[..]),
            );
        }
        dx = dx_in;
    }

    // Embedding gradients.
    if let Some(g) = model_grads.as_deref_mut() {
        for (t, &tok) in tokens.iter().enumerate() {
            axpy(g.embed.row_mut(tok as usize), T::ONE, dx.row(t));
            axpy(g.pos_embed.row_mut(t), T::ONE, dx.row(t));
        }
    }

    Ok(LossGrad {
        loss,
        adapter_grads,
        model_grads,
    })
}

/// Teacher-forced loss targets for an answer appended to a prompt of
/// `prompt_len` tokens inside `tokens`.
pub fn answer_loss_targets(tokens: &[u32], prompt_len: usize) -> Vec<(usize, u32)> {
    (prompt_len..tokens.len()).map(|p| (p - 1, tokens[p])).collect()
}

/// Next-token targets over the whole sequence (plain language modeling).
pub fn lm_loss_targets(tokens: &[u32]) -> Vec<(usize, u32)> {
    (1..tokens.len()).map(|p| (p - 1, tokens[p])).collect()
}
