//! From-scratch causal transformer: byte tokenizer, forward pass, exact
//! reverse-mode gradients, and the constrained Yes/No decision.

pub mod backward;
pub mod decide;
pub mod forward;
pub mod golden;
pub mod gradcheck;
pub mod params;
pub mod tokenizer;

pub use backward::{
    answer_loss_targets, lm_loss_targets, loss_and_grad, AdapterGrads, GradMode, LossGrad,
    ModelGrads,
};
pub use decide::{answer_logprob, decide_yes_no, Decision};
pub use forward::{forward_hidden, forward_logits, logits_for_row, ForwardTrace};
pub use params::{LayerParams, ModelConfig, ModelParams};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, VOCAB_SIZE};
