//! Optional remote summarizer for note-field extraction.
//!
//! The client sends a plain-text prompt (the note substituted into the
//! five-section extraction template) and parses the five-section completion.
//! A malformed completion falls back to the deterministic extractor; the
//! transport is pluggable so tests can run without a network.

use super::extract::{extract_fields, parse_drug_list};
use super::segment::{segment_note, CanonicalHeading, HeadingAliasTable, RawNote};
use crate::corpus::ClinicalNoteFields;
use crate::error::{Error, Result};
use std::io::{Read, Write};

/// Default extraction prompt. `{{note}}` is replaced with the raw note text.
pub const EXTRACTION_PROMPT_TEMPLATE: &str = "Please summarize specific sections from a patient's discharge summary: 1. HISTORY OF PRESENT ILLNESS, 2. PAST MEDICAL HISTORY, 3. ALLERGIES, 4. MEDICATIONS ON ADMISSION 5.DISCHARGE MEDICATIONS. Ignore other details while in hospital and focus only on these sections.

Output template:
HISTORY OF PRESENT ILLNESS:
(Language summary as short as possible)

PAST MEDICAL HISTORY:
(Language summary as short as possible)

ALLERGIES:
(A series of allergies names, separated by commas, does not require any other information)

MEDICATIONS ON ADMISSION:
(A series of drug names, separated by commas, remove dosage information. Maybe None.)

DISCHARGE MEDICATIONS:
(A series of drug names, separated by commas, remove dosage information. Maybe None.)

Note: {{note}}
Summarize result in five aspects in a concise paragraph without any other words:";

pub trait SummarizerTransport: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String>;
}

/// Minimal plain-HTTP POST transport over a TCP socket. The request body is
/// the prompt, the response body is the completion. TLS endpoints are not
/// supported; point the base URL at an http proxy if needed.
pub struct TcpHttpTransport {
    host: String,
    port: u16,
    path: String,
    api_key: Option<String>,
}

impl TcpHttpTransport {
    /// `base_url` like `http://localhost:8080/complete`; the key is read from
    /// the environment variable named by `key_env`, if set.
    pub fn from_base_url(base_url: &str, key_env: &str) -> Result<Self> {
        let rest = base_url
            .strip_prefix("http://")
            .ok_or_else(|| Error::Other(format!("only http:// endpoints supported, got {base_url}")))?;
        let (authority, path) = rest.split_once('/').unwrap_or((rest, ""));
        let (host, port) = match authority.split_once(':') {
            Some((h, p)) => (
                h.to_string(),
                p.parse::<u16>()
                    .map_err(|_| Error::Other(format!("bad port in {base_url}")))?,
            ),
            None => (authority.to_string(), 80),
        };
        Ok(Self {
            host,
            port,
            path: format!("/{path}"),
            api_key: std::env::var(key_env).ok(),
        })
    }
}

impl SummarizerTransport for TcpHttpTransport {
    fn complete(&self, prompt: &str) -> std::result::Result<String, String> {
        let addr = format!("{}:{}", self.host, self.port);
        let mut stream = std::net::TcpStream::connect(&addr).map_err(|e| e.to_string())?;
        let auth = match &self.api_key {
            Some(key) => format!("Authorization: Bearer {key}\r\n"),
            None => String::new(),
        };
        let request = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: text/plain\r\nContent-Length: {}\r\n{}Connection: close\r\n\r\n",
            self.path,
            self.host,
            prompt.len(),
            auth
        );
        stream.write_all(request.as_bytes()).map_err(|e| e.to_string())?;
        stream.write_all(prompt.as_bytes()).map_err(|e| e.to_string())?;
        let mut response = Vec::new();
        stream.read_to_end(&mut response).map_err(|e| e.to_string())?;
        let response = String::from_utf8_lossy(&response);
        let (head, body) = response
            .split_once("\r\n\r\n")
            .ok_or_else(|| "malformed http response".to_string())?;
        let status = head.lines().next().unwrap_or("");
        if !status.contains("200") {
            return Err(format!("endpoint returned {status}"));
        }
        Ok(body.to_string())
    }
}

const COMPLETION_HEADINGS: [(&str, CanonicalHeading); 5] = [
    ("HISTORY OF PRESENT ILLNESS", CanonicalHeading::Hpi),
    ("PAST MEDICAL HISTORY", CanonicalHeading::Pmh),
    ("ALLERGIES", CanonicalHeading::Allergies),
    ("MEDICATIONS ON ADMISSION", CanonicalHeading::MedsOnAdmission),
    ("DISCHARGE MEDICATIONS", CanonicalHeading::DischargeMedications),
];

pub struct SummarizerClient {
    transport: Option<Box<dyn SummarizerTransport>>,
    template: String,
    max_retries: u32,
    budget: usize,
    /// Count of completions that failed to parse and fell back.
    pub fallback_count: std::sync::atomic::AtomicUsize,
}

impl SummarizerClient {
    pub fn unconfigured() -> Self {
        Self {
            transport: None,
            template: EXTRACTION_PROMPT_TEMPLATE.to_string(),
            max_retries: 2,
            budget: 600,
            fallback_count: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn with_transport(transport: Box<dyn SummarizerTransport>) -> Self {
        Self {
            transport: Some(transport),
            ..Self::unconfigured()
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.template = template.into();
        self
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    fn deterministic_fallback(&self, raw: &RawNote) -> ClinicalNoteFields {
        let spans = segment_note(raw, &HeadingAliasTable::default());
        extract_fields(&spans, self.budget)
    }

    /// Parses the five-section completion; `None` when any of the four input
    /// sections is missing.
    fn parse_completion(&self, completion: &str) -> Option<ClinicalNoteFields> {
        let mut table = HeadingAliasTable::empty();
        for (alias, canon) in COMPLETION_HEADINGS {
            table.insert(alias, canon);
        }
        let note = RawNote::new(if completion.is_empty() { " " } else { completion });
        let spans = segment_note(&note, &table);
        let have = |h: CanonicalHeading| spans.iter().any(|s| s.canonical_heading == h);
        if !(have(CanonicalHeading::Hpi)
            && have(CanonicalHeading::Pmh)
            && have(CanonicalHeading::Allergies)
            && have(CanonicalHeading::MedsOnAdmission))
        {
            return None;
        }
        let body = |h: CanonicalHeading| {
            spans
                .iter()
                .filter(|s| s.canonical_heading == h)
                .map(|s| s.body.trim())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut fields = ClinicalNoteFields {
            hpi: body(CanonicalHeading::Hpi).split_whitespace().collect::<Vec<_>>().join(" "),
            pmh: body(CanonicalHeading::Pmh).split_whitespace().collect::<Vec<_>>().join(" "),
            allergies: parse_drug_list(&body(CanonicalHeading::Allergies)),
            meds_on_admission: parse_drug_list(&body(CanonicalHeading::MedsOnAdmission)),
        };
        fields.dedup_lists();
        Some(fields)
    }

    /// Remote extraction with deterministic fallback. The bool is true when
    /// the fallback extractor produced the result.
    pub fn extract(&self, raw: &RawNote) -> Result<(ClinicalNoteFields, bool)> {
        let transport = self.transport.as_deref().ok_or(Error::SummarizerNotConfigured)?;
        let prompt = self.template.replace("{{note}}", &raw.text);
        let mut last_err = String::new();
        for _ in 0..=self.max_retries {
            match transport.complete(&prompt) {
                Ok(completion) => {
                    return Ok(match self.parse_completion(&completion) {
                        Some(fields) => (fields, false),
                        None => {
                            self.fallback_count
                                .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                            (self.deterministic_fallback(raw), true)
                        }
                    });
                }
                Err(e) => last_err = e,
            }
        }
        Err(Error::SummarizerTransport(last_err))
    }
}
