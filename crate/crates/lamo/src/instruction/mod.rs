//! Instruction-instance construction: templates, ablation masks, title
//! modes, byte-deterministic rendering, and token-budget enforcement.

mod render;
mod template;

pub use render::{map_title, AblationMask, InstructionInstance, Renderer, TitleMode};
pub use template::{PromptTemplate, DEFAULT_TEMPLATE_TEXT};
