//! Rule-based discharge-summary processing: heading segmentation, field
//! extraction with length budgets, drug-list parsing, multi-segment
//! consolidation, and an optional remote summarizer client.

mod extract;
mod segment;
mod summarizer;

pub use extract::{consolidate_segments, extract_fields, parse_drug_list, split_sentences};
pub use segment::{segment_note, CanonicalHeading, HeadingAliasTable, RawNote, SectionSpan};
pub use summarizer::{
    SummarizerClient, SummarizerTransport, TcpHttpTransport, EXTRACTION_PROMPT_TEMPLATE,
};
