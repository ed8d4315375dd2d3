//! Field extraction, drug-list parsing, and multi-segment consolidation.

use super::segment::{CanonicalHeading, SectionSpan};
use crate::corpus::{dedup_ci, ClinicalNoteFields};

/// Units and frequency/form suffixes treated as dosage annotation.
/// Over-stripping is accepted; the lists stay conservative.
const DOSE_UNITS: [&str; 5] = ["mg", "mcg", "ml", "g", "meq"];
const DOSE_SUFFIXES: [&str; 9] = ["qd", "bid", "tid", "qid", "prn", "cr", "xl", "xr", "sr"];

fn is_dosage_token(token: &str) -> bool {
    let t = token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    if t.is_empty() {
        return true;
    }
    if DOSE_SUFFIXES.contains(&t.as_str()) {
        return true;
    }
    // Bare numbers and number+unit forms like "40", "5mg", "0.5 ml".
    let digits: String = t.chars().take_while(|c| c.is_ascii_digit() || *c == '.').collect();
    if digits.is_empty() {
        return false;
    }
    let rest = &t[digits.len()..];
    rest.is_empty() || DOSE_UNITS.contains(&rest)
}

fn is_none_marker(item: &str) -> bool {
    let t = item
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    matches!(t.as_str(), "" | "none" | "none mentioned" | "n a" | "na")
}

/// Parses a free-text drug list: splits on commas, semicolons, newlines and
/// numbered bullets, strips dosage tokens, and deduplicates case-insensitively
/// preserving first occurrence.
pub fn parse_drug_list(body: &str) -> Vec<String> {
    let lower = body.to_lowercase();
    if lower.contains("no known allergies") || lower.contains("no known drug allergies") {
        return Vec::new();
    }
    let mut items = Vec::new();
    for line in body.lines() {
        // "1. Prednisone" / "2) Protonix" bullet forms.
        let line = line.trim_start();
        let line = line
            .strip_prefix(|c: char| c.is_ascii_digit())
            .map(|rest| rest.trim_start_matches(|c: char| c.is_ascii_digit()))
            .map(|rest| rest.trim_start_matches(['.', ')']))
            .unwrap_or(line);
        for piece in line.split([',', ';']) {
            let kept: Vec<&str> = piece
                .split_whitespace()
                .filter(|tok| !is_dosage_token(tok))
                .collect();
            let item = kept.join(" ");
            let item = item.trim_matches(|c: char| c == '.' || c == ',' || c.is_whitespace());
            if !is_none_marker(item) {
                items.push(item.to_string());
            }
        }
    }
    dedup_ci(&mut items);
    items
}

/// Splits text into trimmed sentences on `.`, `?`, `!` followed by
/// whitespace or end of text. Crude but deterministic.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let bytes = text.as_bytes();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if (b == b'.' || b == b'?' || b == b'!')
            && (i + 1 == bytes.len() || bytes[i + 1].is_ascii_whitespace())
        {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            start = i + 1;
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Keeps whole sentences while the running length stays within `budget`.
fn truncate_sentences(text: &str, budget: usize) -> String {
    let normalized = normalize_ws(text);
    if normalized.len() <= budget {
        return normalized;
    }
    let mut out = String::new();
    for sentence in split_sentences(&normalized) {
        let extra = if out.is_empty() { sentence.len() } else { sentence.len() + 1 };
        if out.len() + extra > budget {
            break;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&sentence);
    }
    out
}

/// Assembles the four note fields from segmented spans. `budget` caps the
/// HPI and PMH character length. Discharge-medication spans are never read:
/// they are the label.
pub fn extract_fields(spans: &[SectionSpan], budget: usize) -> ClinicalNoteFields {
    assert!(budget > 0, "budget must be positive");
    let mut fields = ClinicalNoteFields::default();
    for span in spans {
        match span.canonical_heading {
            CanonicalHeading::Hpi => {
                if !fields.hpi.is_empty() {
                    fields.hpi.push(' ');
                }
                fields.hpi.push_str(&normalize_ws(&span.body));
            }
            CanonicalHeading::Pmh => {
                if !fields.pmh.is_empty() {
                    fields.pmh.push(' ');
                }
                fields.pmh.push_str(&normalize_ws(&span.body));
            }
            CanonicalHeading::Allergies => {
                fields.allergies.extend(parse_drug_list(&span.body));
            }
            CanonicalHeading::MedsOnAdmission => {
                fields.meds_on_admission.extend(parse_drug_list(&span.body));
            }
            CanonicalHeading::DischargeMedications | CanonicalHeading::Other => {}
        }
    }
    fields.hpi = truncate_sentences(&fields.hpi, budget);
    fields.pmh = truncate_sentences(&fields.pmh, budget);
    fields.dedup_lists();
    fields
}

/// Merges fields extracted from multiple note segments: narrative fields are
/// concatenated with duplicate sentences removed, list fields unioned in
/// first-seen order. Idempotent.
pub fn consolidate_segments(parts: &[ClinicalNoteFields]) -> ClinicalNoteFields {
    assert!(!parts.is_empty(), "consolidate_segments needs at least one part");
    let merge_text = |select: fn(&ClinicalNoteFields) -> &str| {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = String::new();
        for part in parts {
            for sentence in split_sentences(select(part)) {
                if seen.insert(sentence.clone()) {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(&sentence);
                }
            }
        }
        out
    };
    let mut fields = ClinicalNoteFields {
        hpi: merge_text(|f| &f.hpi),
        pmh: merge_text(|f| &f.pmh),
        allergies: parts.iter().flat_map(|f| f.allergies.iter().cloned()).collect(),
        meds_on_admission: parts
            .iter()
            .flat_map(|f| f.meds_on_admission.iter().cloned())
            .collect(),
    };
    fields.dedup_lists();
    fields
}
