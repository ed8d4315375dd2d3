//! Constrained Yes/No decision.
//!
//! Instead of free decoding, the model scores the two admissible answer
//! strings teacher-forced after the prompt and takes the argmax, which makes
//! temperature-0 inference exact and leaves nothing to parse. An exact tie
//! goes to No, the conservative side against overprescription.

use crate::error::Result;
use crate::lora::LoraAdapterSet;
use crate::math::{axpy, log_sum_exp, Real};
use crate::model::forward::forward_hidden;
use crate::model::params::ModelParams;
use crate::model::tokenizer::{Tokenizer, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub yes: bool,
    /// logprob(yes text) - logprob(no text).
    pub margin: f64,
}

/// Total log-probability of emitting `answer` right after `prompt_tokens`.
pub fn answer_logprob<T: Real>(
    model: &ModelParams<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    prompt_tokens: &[u32],
    answer: &str,
) -> Result<f64> {
    let answer_tokens = Tokenizer.encode(answer);
    assert!(!answer_tokens.is_empty(), "empty answer text");
    let mut tokens = prompt_tokens.to_vec();
    tokens.extend_from_slice(&answer_tokens);
    let (hidden, _) = forward_hidden(model, adapters, &tokens, None, false)?;

    let prompt_len = prompt_tokens.len();
    let mut total = 0.0;
    for (k, &target) in answer_tokens.iter().enumerate() {
        let row = hidden.row(prompt_len + k - 1);
        let mut logits = vec![T::ZERO; VOCAB_SIZE];
        for (i, &h) in row.iter().enumerate() {
            axpy(&mut logits, h, model.lm_head.row(i));
        }
        let lse = log_sum_exp(&logits);
        total += (logits[target as usize] - lse).to_f64();
    }
    Ok(total)
}

/// Compares the two answer strings after a prompt ending at the answer
/// header. Ties decide No.
pub fn decide_yes_no<T: Real>(
    model: &ModelParams<T>,
    adapters: Option<&LoraAdapterSet<T>>,
    prompt_tokens: &[u32],
    yes_text: &str,
    no_text: &str,
) -> Result<Decision> {
    let lp_yes = answer_logprob(model, adapters, prompt_tokens, yes_text)?;
    let lp_no = answer_logprob(model, adapters, prompt_tokens, no_text)?;
    let margin = lp_yes - lp_no;
    Ok(Decision {
        yes: margin > 0.0,
        margin,
    })
}
