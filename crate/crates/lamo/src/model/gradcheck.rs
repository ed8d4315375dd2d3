//! Double-precision finite-difference verification of the adapter gradients.
//!
//! Central differences `(f(x+h) - f(x-h)) / 2h` on every adapter parameter,
//! compared against the analytic reverse-mode gradients computed by the same
//! f64 code path. Relative error uses `max(|a|, |fd|, floor)` as denominator
//! so near-zero pairs do not blow up the ratio.

use crate::error::Result;
use crate::lora::LoraAdapterSet;
use crate::math::{axpy, log_sum_exp, Real};
use crate::model::backward::{loss_and_grad, GradMode};
use crate::model::forward::forward_hidden;
use crate::model::params::ModelParams;
use crate::model::tokenizer::VOCAB_SIZE;

/// Loss without gradients, for the finite-difference probes.
pub fn sequence_loss<T: Real>(
    model: &ModelParams<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    tokens: &[u32],
    loss_targets: &[(usize, u32)],
) -> Result<f64> {
    let (hidden, _) = forward_hidden(model, adapters, tokens, None, false)?;
    let inv_n = 1.0 / loss_targets.len() as f64;
    let mut loss = 0.0;
    for &(row, target) in loss_targets {
        let mut logits = vec![T::ZERO; VOCAB_SIZE];
        for (i, &h) in hidden.row(row).iter().enumerate() {
            axpy(&mut logits, h, model.lm_head.row(i));
        }
        let lse = log_sum_exp(&logits);
        loss -= (logits[target as usize] - lse).to_f64() * inv_n;
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter location of the worst error, e.g. "layers.1.v_proj/a[37]".
    pub worst: String,
}

/// Central-difference step. Smaller steps push round-off noise on
/// near-zero gradients above the comparison tolerance; 1e-4 keeps the
/// truncation error at O(1e-8) while the noise stays below 1e-10.
pub const FD_EPS: f64 = 1e-4;

/// Checks every adapter parameter of `set` against central differences.
pub fn finite_difference_check(
    model: &ModelParams<f64>,
    set: &LoraAdapterSet<f64>,
    tokens: &[u32],
    loss_targets: &[(usize, u32)],
    eps: f64,
) -> Result<GradCheckReport> {
    let analytic = loss_and_grad(
        model,
        Some(set),
        tokens,
        loss_targets,
        GradMode::AdaptersOnly,
        None,
        "gradcheck",
    )?
    .adapter_grads
    .expect("adapter grads present");

    let floor = 1e-7;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut probe = set.clone();
    for ai in 0..set.adapters.len() {
        for (tensor_name, len) in [("a", set.adapters[ai].a.data.len()), ("b", set.adapters[ai].b.data.len())] {
            for idx in 0..len {
                let select = |s: &mut LoraAdapterSet<f64>| -> *mut f64 {
                    let ad = &mut s.adapters[ai];
                    let data = if tensor_name == "a" { &mut ad.a.data } else { &mut ad.b.data };
                    &mut data[idx]
                };
                let original = unsafe { *select(&mut probe) };
                unsafe { *select(&mut probe) = original + eps };
                let up = sequence_loss(model, Some(&probe), tokens, loss_targets)?;
                unsafe { *select(&mut probe) = original - eps };
                let down = sequence_loss(model, Some(&probe), tokens, loss_targets)?;
                unsafe { *select(&mut probe) = original };

                let fd = (up - down) / (2.0 * eps);
                let an = {
                    let g = &analytic.per_adapter[ai];
                    if tensor_name == "a" { g.da.data[idx] } else { g.db.data[idx] }
                };
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(floor);
                report.checked += 1;
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = format!("{}/{}[{}]", set.adapters[ai].target, tensor_name, idx);
                }
            }
        }
    }
    Ok(report)
}
