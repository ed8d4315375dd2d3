//! Heading-based segmentation of raw discharge summaries.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

/// A full raw discharge summary.
#[derive(Debug, Clone)]
pub struct RawNote {
    pub text: String,
}

impl RawNote {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        assert!(!text.is_empty(), "raw note must be non-empty");
        Self { text }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CanonicalHeading {
    Hpi,
    Pmh,
    Allergies,
    MedsOnAdmission,
    DischargeMedications,
    Other,
}

/// One section of a note: the canonical heading plus the byte range of its
/// body in the original text.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionSpan {
    pub canonical_heading: CanonicalHeading,
    pub start: usize,
    pub end: usize,
    pub body: String,
}

/// Maps observed heading strings to canonical headings. Lookup ignores case
/// and punctuation. Subheading labels vary across notes ("Medications on
/// Admission" vs "Admission Medications"), so the table is user-extensible.
#[derive(Debug, Clone)]
pub struct HeadingAliasTable {
    mapping: BTreeMap<String, CanonicalHeading>,
}

fn normalize_heading(s: &str) -> String {
    let mut out = String::new();
    let mut last_space = true;
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    out.trim_end().to_string()
}

impl Default for HeadingAliasTable {
    fn default() -> Self {
        let mut table = HeadingAliasTable {
            mapping: BTreeMap::new(),
        };
        for (alias, canon) in [
            ("History of Present Illness", CanonicalHeading::Hpi),
            ("HPI", CanonicalHeading::Hpi),
            ("Past Medical History", CanonicalHeading::Pmh),
            ("Allergies", CanonicalHeading::Allergies),
            ("Medications on Admission", CanonicalHeading::MedsOnAdmission),
            ("Admission Medications", CanonicalHeading::MedsOnAdmission),
            ("Medications", CanonicalHeading::MedsOnAdmission),
            ("Medication on Admission", CanonicalHeading::MedsOnAdmission),
            ("Discharge Medications", CanonicalHeading::DischargeMedications),
        ] {
            table.insert(alias, canon);
        }
        table
    }
}

impl HeadingAliasTable {
    pub fn empty() -> Self {
        HeadingAliasTable {
            mapping: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, alias: &str, canonical: CanonicalHeading) {
        self.mapping.insert(normalize_heading(alias), canonical);
    }

    pub fn lookup(&self, observed: &str) -> Option<CanonicalHeading> {
        self.mapping.get(&normalize_heading(observed)).copied()
    }

    /// Extends the table from `alias<TAB>canonical` lines. Canonical names:
    /// hpi, pmh, allergies, meds_on_admission, discharge_medications.
    pub fn extend_from_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (alias, canon) = line.split_once('\t').ok_or_else(|| Error::CorpusFormat {
                line: i + 1,
                reason: "expected alias<TAB>canonical".into(),
            })?;
            let canonical = match canon.trim() {
                "hpi" => CanonicalHeading::Hpi,
                "pmh" => CanonicalHeading::Pmh,
                "allergies" => CanonicalHeading::Allergies,
                "meds_on_admission" => CanonicalHeading::MedsOnAdmission,
                "discharge_medications" => CanonicalHeading::DischargeMedications,
                other => {
                    return Err(Error::CorpusFormat {
                        line: i + 1,
                        reason: format!("unknown canonical heading {other:?}"),
                    })
                }
            };
            self.insert(alias, canonical);
        }
        Ok(())
    }
}

/// Splits a note into per-heading spans.
///
/// A heading is the text before the first `:` on a line; recognized aliases
/// map to their canonical heading, unrecognized heading lines open `Other`
/// spans. Each body runs to the next heading line or the end of the note.
/// A note with no heading lines at all yields one `Other` span.
pub fn segment_note(raw: &RawNote, aliases: &HeadingAliasTable) -> Vec<SectionSpan> {
    let text = &raw.text;
    let mut headings: Vec<(usize, usize, CanonicalHeading)> = Vec::new(); // (line start, body start, heading)
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = line.strip_suffix('\n').unwrap_or(line);
        if let Some(colon) = content.find(':') {
            let head = content[..colon].trim_matches(|c: char| c == '*' || c.is_whitespace());
            // Heading candidates are short labels, not prose with a stray colon.
            if !head.is_empty() && head.len() <= 48 && !head.contains('.') {
                let canonical = aliases.lookup(head).unwrap_or(CanonicalHeading::Other);
                headings.push((offset, offset + colon + 1, canonical));
            }
        }
        offset += line.len();
    }

    if headings.is_empty() {
        return vec![SectionSpan {
            canonical_heading: CanonicalHeading::Other,
            start: 0,
            end: text.len(),
            body: text.clone(),
        }];
    }

    let mut spans = Vec::new();
    // Leading text before the first heading becomes an Other span.
    if headings[0].0 > 0 {
        let body = text[..headings[0].0].to_string();
        if !body.trim().is_empty() {
            spans.push(SectionSpan {
                canonical_heading: CanonicalHeading::Other,
                start: 0,
                end: headings[0].0,
                body,
            });
        }
    }
    for (i, &(_, body_start, heading)) in headings.iter().enumerate() {
        let end = headings.get(i + 1).map_or(text.len(), |next| next.0);
        if body_start < end {
            let body = text[body_start..end].to_string();
            if !body.trim().is_empty() {
                spans.push(SectionSpan {
                    canonical_heading: heading,
                    start: body_start,
                    end,
                    body,
                });
            }
        }
    }
    spans
}
