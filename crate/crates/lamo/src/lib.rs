//! Medication recommendation via group-wise low-rank adapters on a small
//! causal language model, end to end: structured EHR representation,
//! instruction instances, medication grouping, per-group adapter training,
//! constrained Yes/No inference, and the evaluation harness.

pub mod config;
pub mod corpus;
pub mod grouping;
pub mod instruction;
pub mod error;
pub mod eval;
pub mod checkpoint;
pub mod logging;
pub mod lora;
pub mod math;
pub mod model;
pub mod notes;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

// The guide's code blocks compile and run as doc-tests so the book can
// never drift from the crate.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(corpus, "../../../book/src/corpus.md");
    chapter!(notes, "../../../book/src/notes.md");
    chapter!(instructions, "../../../book/src/instructions.md");
    chapter!(grouping, "../../../book/src/grouping.md");
    chapter!(model, "../../../book/src/model.md");
    chapter!(lora, "../../../book/src/lora.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(evaluation, "../../../book/src/evaluation.md");
    chapter!(cli, "../../../book/src/cli.md");
}
