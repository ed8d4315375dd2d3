//! Rendering instruction instances: one prompt per (visit, candidate
//! medication), byte-deterministic, with ablation masks, title modes, a
//! token-budget trimmer, and a hard guard against discharge-medication
//! leakage.

use super::template::PromptTemplate;
use crate::corpus::{CodedConcept, HistoryBlock, VisitRecord};
use crate::error::{Error, Result};
use crate::grouping::MedicationGroupMap;
use crate::model::Tokenizer;
use crate::notes::split_sentences;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Input-factor removal switches. `drop_notes` and `drop_codes` imply their
/// per-field members, enforced by the accessors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub drop_history: bool,
    pub drop_notes: bool,
    pub drop_codes: bool,
    pub drop_diagnoses: bool,
    pub drop_procedures: bool,
    pub drop_hpi: bool,
    pub drop_pmh: bool,
    pub drop_allergies: bool,
    pub drop_moa: bool,
}

impl AblationMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn hpi_dropped(&self) -> bool {
        self.drop_hpi || self.drop_notes
    }
    pub fn pmh_dropped(&self) -> bool {
        self.drop_pmh || self.drop_notes
    }
    pub fn allergies_dropped(&self) -> bool {
        self.drop_allergies || self.drop_notes
    }
    pub fn moa_dropped(&self) -> bool {
        self.drop_moa || self.drop_notes
    }
    pub fn diagnoses_dropped(&self) -> bool {
        self.drop_diagnoses || self.drop_codes
    }
    pub fn procedures_dropped(&self) -> bool {
        self.drop_procedures || self.drop_codes
    }

    /// True when every drop of `self` is also dropped by `other`.
    pub fn looser_or_equal(&self, other: &AblationMask) -> bool {
        (!self.drop_history || other.drop_history)
            && (!self.hpi_dropped() || other.hpi_dropped())
            && (!self.pmh_dropped() || other.pmh_dropped())
            && (!self.allergies_dropped() || other.allergies_dropped())
            && (!self.moa_dropped() || other.moa_dropped())
            && (!self.diagnoses_dropped() || other.diagnoses_dropped())
            && (!self.procedures_dropped() || other.procedures_dropped())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TitleMode {
    CodeOnly,
    OriginalTitle,
    ConciseTitle,
}

impl TitleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TitleMode::CodeOnly => "code_only",
            TitleMode::OriginalTitle => "original_title",
            TitleMode::ConciseTitle => "concise_title",
        }
    }
}

/// Title rendering for one coded concept. An empty concise title falls back
/// to the original title and bumps `fallback_count`.
pub fn map_title<'a>(
    concept: &'a CodedConcept,
    mode: TitleMode,
    fallback_count: &AtomicUsize,
) -> &'a str {
    match mode {
        TitleMode::CodeOnly => &concept.code,
        TitleMode::OriginalTitle => &concept.original_title,
        TitleMode::ConciseTitle => {
            if concept.concise_title.is_empty() {
                fallback_count.fetch_add(1, Ordering::Relaxed);
                &concept.original_title
            } else {
                &concept.concise_title
            }
        }
    }
}

/// One rendered training/inference unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionInstance {
    pub patient_id: String,
    pub visit_index: u32,
    pub medication: String,
    pub group_id: usize,
    pub label: bool,
    pub text: String,
}

pub struct Renderer<'a> {
    pub template: &'a PromptTemplate,
    pub mask: AblationMask,
    pub title_mode: TitleMode,
    pub vocabulary: &'a [String],
    /// Bumped when a concise title fell back to the original.
    pub title_fallbacks: AtomicUsize,
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

fn remove_ci(text: &str, needle: &str) -> String {
    let lower_text = text.to_lowercase();
    let lower_needle = needle.to_lowercase();
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    while let Some(found) = lower_text[pos..].find(&lower_needle) {
        out.push_str(&text[pos..pos + found]);
        pos += found + needle.len();
    }
    out.push_str(&text[pos..]);
    out
}

impl<'a> Renderer<'a> {
    pub fn new(
        template: &'a PromptTemplate,
        mask: AblationMask,
        title_mode: TitleMode,
        vocabulary: &'a [String],
    ) -> Self {
        Renderer {
            template,
            mask,
            title_mode,
            vocabulary,
            title_fallbacks: AtomicUsize::new(0),
        }
    }

    /// Renders the prompt for one (visit, candidate) pair. The text is byte
    /// deterministic and ends at the answer header; discharge-medication
    /// names are scrubbed from every content section.
    pub fn render_instance(
        &self,
        visit: &VisitRecord,
        history: Option<&HistoryBlock>,
        candidate: &str,
        group_id: usize,
    ) -> Result<InstructionInstance> {
        self.render_trimmed(visit, history, candidate, group_id, false, usize::MAX, usize::MAX)
    }

    #[allow(clippy::too_many_arguments)]
    fn render_trimmed(
        &self,
        visit: &VisitRecord,
        history: Option<&HistoryBlock>,
        candidate: &str,
        group_id: usize,
        force_drop_history: bool,
        pmh_keep: usize,
        hpi_keep: usize,
    ) -> Result<InstructionInstance> {
        if !self.vocabulary.iter().any(|m| m == candidate) {
            return Err(Error::UnknownMedication {
                name: candidate.to_string(),
                hint: String::new(),
            });
        }
        // Every discharge-medication name must be invisible outside the
        // candidate line, the candidate's own included.
        let protected: Vec<&str> = visit
            .discharge_medications
            .iter()
            .map(String::as_str)
            .collect();
        let scrub_text = |text: &str| -> String {
            let mut out = text.to_string();
            for med in &protected {
                if contains_ci(&out, med) {
                    out = remove_ci(&out, med);
                }
            }
            out.split_whitespace().collect::<Vec<_>>().join(" ")
        };
        let keep_item = |item: &str| -> bool { !protected.iter().any(|m| contains_ci(item, m)) };

        let mut text = String::new();
        text.push_str(&self.template.task_instruction);
        text.push('\n');

        if let Some(h) = history {
            if !(self.mask.drop_history || force_drop_history) {
                text.push_str(&self.template.history_header);
                text.push('\n');
                text.push_str(&format!("Age: {}, Gender: {},\n", h.age, h.gender.as_str()));
                let diag: Vec<String> = h.diagnoses.iter().map(|t| scrub_text(t)).collect();
                let proc: Vec<String> = h.procedures.iter().map(|t| scrub_text(t)).collect();
                let meds: Vec<&String> =
                    h.medications.iter().filter(|m| keep_item(m)).collect();
                text.push_str(&format!("Diagnoses: [{}],\n", join_ref(&diag)));
                text.push_str(&format!("Procedures: [{}],\n", join_ref(&proc)));
                text.push_str(&format!(
                    "Medications: [{}].\n",
                    meds.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
                ));
            }
        }

        text.push_str(&self.template.input_header);
        text.push('\n');
        if !self.mask.diagnoses_dropped() {
            let titles: Vec<String> = visit
                .diagnoses
                .iter()
                .map(|c| scrub_text(map_title(c, self.title_mode, &self.title_fallbacks)))
                .collect();
            text.push_str(&format!("Diagnoses: [{}],\n", join_ref(&titles)));
        }
        if !self.mask.procedures_dropped() {
            let titles: Vec<String> = visit
                .procedures
                .iter()
                .map(|c| scrub_text(map_title(c, self.title_mode, &self.title_fallbacks)))
                .collect();
            text.push_str(&format!("Procedures: [{}],\n", join_ref(&titles)));
        }
        if !self.mask.hpi_dropped() {
            let hpi = trim_sentences(&scrub_text(&visit.note.hpi), hpi_keep);
            text.push_str(&format!("History of present illness: {hpi}\n"));
        }
        if !self.mask.pmh_dropped() {
            let pmh = trim_sentences(&scrub_text(&visit.note.pmh), pmh_keep);
            text.push_str(&format!("Past medical history: {pmh}\n"));
        }
        if !self.mask.allergies_dropped() {
            let items: Vec<&str> = visit
                .note
                .allergies
                .iter()
                .filter(|a| keep_item(a))
                .map(String::as_str)
                .collect();
            text.push_str(&format!("Allergies: [{}],\n", items.join(", ")));
        }
        if !self.mask.moa_dropped() {
            let items: Vec<&str> = visit
                .note
                .meds_on_admission
                .iter()
                .filter(|m| keep_item(m))
                .map(String::as_str)
                .collect();
            text.push_str(&format!("Medications on admission: [{}],\n", items.join(", ")));
        }
        text.push_str(&format!("Candidate drug: {candidate}.\n"));
        text.push_str(&self.template.answer_header);

        Ok(InstructionInstance {
            patient_id: visit.patient_id.clone(),
            visit_index: visit.visit_index,
            medication: candidate.to_string(),
            group_id,
            label: visit.discharge_medications.iter().any(|m| m == candidate),
            text,
        })
    }

    /// Compact decision rendering for warm-phase text mixes: only the
    /// decision-bearing lines, in the same line formats as the full render,
    /// with the same discharge-medication scrubbing. Ends with the answer
    /// header so the supervised answer can be appended.
    pub fn render_compact(&self, visit: &VisitRecord, candidate: &str) -> Result<InstructionInstance> {
        if !self.vocabulary.iter().any(|m| m == candidate) {
            return Err(Error::UnknownMedication {
                name: candidate.to_string(),
                hint: String::new(),
            });
        }
        let protected: Vec<&str> = visit
            .discharge_medications
            .iter()
            .map(String::as_str)
            .collect();
        let scrub_text = |text: &str| -> String {
            let mut out = text.to_string();
            for med in &protected {
                if contains_ci(&out, med) {
                    out = remove_ci(&out, med);
                }
            }
            out.split_whitespace().collect::<Vec<_>>().join(" ")
        };
        let keep_item = |item: &str| -> bool { !protected.iter().any(|m| contains_ci(item, m)) };
        let diag: Vec<String> = visit
            .diagnoses
            .iter()
            .map(|c| scrub_text(map_title(c, self.title_mode, &self.title_fallbacks)))
            .collect();
        let allergies: Vec<&str> = visit
            .note
            .allergies
            .iter()
            .filter(|a| keep_item(a))
            .map(String::as_str)
            .collect();
        let text = format!(
            "Diagnoses: [{}],\nHistory of present illness: {}\nAllergies: [{}],\nCandidate drug: {candidate}.\n{}",
            join_ref(&diag),
            scrub_text(&visit.note.hpi),
            allergies.join(", "),
            self.template.answer_header,
        );
        Ok(InstructionInstance {
            patient_id: visit.patient_id.clone(),
            visit_index: visit.visit_index,
            medication: candidate.to_string(),
            group_id: 0,
            label: visit.discharge_medications.iter().any(|m| m == candidate),
            text,
        })
    }

    /// One instance per candidate in the vocabulary.
    pub fn expand_visit(
        &self,
        visit: &VisitRecord,
        history: Option<&HistoryBlock>,
        group_map: &MedicationGroupMap,
    ) -> Result<Vec<InstructionInstance>> {
        assert!(!self.vocabulary.is_empty(), "empty medication vocabulary");
        self.vocabulary
            .iter()
            .map(|med| {
                let group_id = group_map.assign_group(med)?;
                self.render_instance(visit, history, med, group_id)
            })
            .collect()
    }

    /// Expansion with negative subsampling: all positives, plus up to
    /// `negatives_per_positive` sampled negatives per positive label.
    pub fn expand_visit_sampled(
        &self,
        visit: &VisitRecord,
        history: Option<&HistoryBlock>,
        group_map: &MedicationGroupMap,
        negatives_per_positive: usize,
        rng: &mut Rng,
    ) -> Result<Vec<InstructionInstance>> {
        let positives: Vec<&String> = self
            .vocabulary
            .iter()
            .filter(|m| visit.discharge_medications.contains(m))
            .collect();
        let negatives: Vec<&String> = self
            .vocabulary
            .iter()
            .filter(|m| !visit.discharge_medications.contains(m))
            .collect();
        let n_neg = (positives.len().max(1) * negatives_per_positive).min(negatives.len());
        let chosen = rng.sample_indices(negatives.len(), n_neg);
        let mut picks: Vec<&String> = positives;
        picks.extend(chosen.into_iter().map(|i| negatives[i]));
        picks
            .into_iter()
            .map(|med| {
                let group_id = group_map.assign_group(med)?;
                self.render_instance(visit, history, med, group_id)
            })
            .collect()
    }

    /// Token-budget enforcement. Over-budget prompts drop content in a fixed
    /// order — the history block, then PMH tail sentences, then HPI tail
    /// sentences — never the candidate line or the answer header.
    pub fn enforce_budget(
        &self,
        visit: &VisitRecord,
        history: Option<&HistoryBlock>,
        instance: InstructionInstance,
        max_tokens: usize,
        tokenizer: &Tokenizer,
    ) -> Result<InstructionInstance> {
        if tokenizer.token_count(&instance.text) <= max_tokens {
            return Ok(instance);
        }
        let candidate = instance.medication.clone();
        let group_id = instance.group_id;
        let pmh_total = split_sentences(&visit.note.pmh).len();
        let hpi_total = split_sentences(&visit.note.hpi).len();

        // Trim plan: history first, then PMH sentences from the tail, then
        // HPI sentences from the tail.
        let mut plans: Vec<(bool, usize, usize)> = vec![(true, usize::MAX, usize::MAX)];
        for pmh_keep in (0..pmh_total).rev() {
            plans.push((true, pmh_keep, usize::MAX));
        }
        for hpi_keep in (0..hpi_total).rev() {
            plans.push((true, 0, hpi_keep));
        }
        for (drop_hist, pmh_keep, hpi_keep) in plans {
            let trimmed =
                self.render_trimmed(visit, history, &candidate, group_id, drop_hist, pmh_keep, hpi_keep)?;
            if tokenizer.token_count(&trimmed.text) <= max_tokens {
                return Ok(trimmed);
            }
        }
        let skeleton = self
            .render_trimmed(visit, history, &candidate, group_id, true, 0, 0)?
            .text;
        Err(Error::BudgetTooSmall {
            max_tokens,
            skeleton: tokenizer.token_count(&skeleton),
        })
    }
}

fn join_ref(items: &[String]) -> String {
    items.join(", ")
}

fn trim_sentences(text: &str, keep: usize) -> String {
    if keep == usize::MAX {
        return text.to_string();
    }
    let sentences = split_sentences(text);
    sentences[..keep.min(sentences.len())].join(" ")
}
