//! EHR data model: visit records, per-visit history blocks, corpus statistics.

mod io;
mod split;
mod synthetic;

pub use io::{load_corpus, load_title_dictionary, write_corpus};
pub use split::{split_corpus, SplitRatios, Splits};
pub use synthetic::{generate_synthetic_corpus, DiseaseRule, MedicationRule, RuleTable};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// A coded clinical concept (diagnosis or procedure) with both its original
/// long-form title and the concise title used in rendered prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedConcept {
    pub code: String,
    pub original_title: String,
    pub concise_title: String,
}

impl CodedConcept {
    pub fn validate(&self) -> Result<()> {
        if self.code.is_empty() {
            return Err(Error::InvalidRecord {
                patient_id: String::new(),
                reason: "coded concept with empty code".into(),
            });
        }
        if self.concise_title.is_empty() {
            return Err(Error::InvalidRecord {
                patient_id: String::new(),
                reason: format!("concept {} has empty concise title", self.code),
            });
        }
        Ok(())
    }
}

/// The four note components extracted from a discharge summary.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClinicalNoteFields {
    pub hpi: String,
    pub pmh: String,
    pub allergies: Vec<String>,
    pub meds_on_admission: Vec<String>,
}

impl ClinicalNoteFields {
    pub fn is_empty(&self) -> bool {
        self.hpi.is_empty()
            && self.pmh.is_empty()
            && self.allergies.is_empty()
            && self.meds_on_admission.is_empty()
    }

    /// Case-insensitive dedup on both drug lists, preserving first occurrence.
    pub fn dedup_lists(&mut self) {
        dedup_ci(&mut self.allergies);
        dedup_ci(&mut self.meds_on_admission);
    }

    pub fn validate(&self) -> Result<()> {
        for (label, list) in [("allergies", &self.allergies), ("meds_on_admission", &self.meds_on_admission)] {
            let mut seen = BTreeSet::new();
            for item in list {
                if !seen.insert(item.to_lowercase()) {
                    return Err(Error::InvalidRecord {
                        patient_id: String::new(),
                        reason: format!("duplicate entry {item:?} in {label}"),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn dedup_ci(list: &mut Vec<String>) {
    let mut seen = BTreeSet::new();
    list.retain(|item| seen.insert(item.to_lowercase()));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Other,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Other => "other",
        }
    }
}

/// One hospital admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub patient_id: String,
    pub visit_index: u32,
    pub age: u32,
    pub gender: Gender,
    pub diagnoses: Vec<CodedConcept>,
    pub procedures: Vec<CodedConcept>,
    pub note: ClinicalNoteFields,
    /// Ground-truth discharge medications; the prediction target, never an input.
    pub discharge_medications: Vec<String>,
}

impl VisitRecord {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::InvalidRecord {
                patient_id: String::new(),
                reason: "empty patient_id".into(),
            });
        }
        for c in self.diagnoses.iter().chain(self.procedures.iter()) {
            c.validate().map_err(|e| Error::InvalidRecord {
                patient_id: self.patient_id.clone(),
                reason: e.to_string(),
            })?;
        }
        self.note.validate().map_err(|e| Error::InvalidRecord {
            patient_id: self.patient_id.clone(),
            reason: e.to_string(),
        })?;
        Ok(())
    }
}

/// Summary of one prior admission, rendered into prompts for repeat visits.
/// Carries coded titles and prescribed medications only — never note text and
/// never anything from the current visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryBlock {
    pub age: u32,
    pub gender: Gender,
    pub diagnoses: Vec<String>,
    pub procedures: Vec<String>,
    pub medications: Vec<String>,
}

/// Builds the history block for `visits[current]` from the immediately
/// previous admission, or `None` for a patient's first visit.
///
/// `visits` must hold all of one patient's records ordered by `visit_index`.
pub fn build_history(visits: &[VisitRecord], current: usize) -> Option<HistoryBlock> {
    if current == 0 {
        return None;
    }
    let prev = &visits[current - 1];
    Some(HistoryBlock {
        age: prev.age,
        gender: prev.gender,
        diagnoses: prev.diagnoses.iter().map(|c| c.concise_title.clone()).collect(),
        procedures: prev.procedures.iter().map(|c| c.concise_title.clone()).collect(),
        medications: prev.discharge_medications.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub visit_count: usize,
    pub patient_count: usize,
    pub diagnosis_vocab: usize,
    pub procedure_vocab: usize,
    pub medication_vocab: usize,
    pub mean_meds_per_visit: f64,
    pub max_meds_per_visit: usize,
}

pub fn compute_stats(records: &[VisitRecord]) -> CorpusStats {
    let mut patients = BTreeSet::new();
    let mut diag = BTreeSet::new();
    let mut proc = BTreeSet::new();
    let mut meds = BTreeSet::new();
    let mut total_meds = 0usize;
    let mut max_meds = 0usize;
    for r in records {
        patients.insert(r.patient_id.clone());
        for c in &r.diagnoses {
            diag.insert(c.code.clone());
        }
        for c in &r.procedures {
            proc.insert(c.code.clone());
        }
        for m in &r.discharge_medications {
            meds.insert(m.clone());
        }
        total_meds += r.discharge_medications.len();
        max_meds = max_meds.max(r.discharge_medications.len());
    }
    CorpusStats {
        visit_count: records.len(),
        patient_count: patients.len(),
        diagnosis_vocab: diag.len(),
        procedure_vocab: proc.len(),
        medication_vocab: meds.len(),
        mean_meds_per_visit: if records.is_empty() {
            0.0
        } else {
            total_meds as f64 / records.len() as f64
        },
        max_meds_per_visit: max_meds,
    }
}

/// Sorted, deduplicated medication vocabulary of a corpus.
pub fn medication_vocabulary(records: &[VisitRecord]) -> Vec<String> {
    let mut set = BTreeSet::new();
    for r in records {
        for m in &r.discharge_medications {
            set.insert(m.clone());
        }
    }
    set.into_iter().collect()
}

/// Groups records per patient, each group ordered by visit index.
/// Patients keep their first-appearance order.
pub fn group_by_patient(records: &[VisitRecord]) -> Vec<Vec<VisitRecord>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: std::collections::BTreeMap<String, Vec<VisitRecord>> =
        std::collections::BTreeMap::new();
    for r in records {
        if !by_patient.contains_key(&r.patient_id) {
            order.push(r.patient_id.clone());
        }
        by_patient.entry(r.patient_id.clone()).or_default().push(r.clone());
    }
    order
        .into_iter()
        .map(|pid| {
            let mut visits = by_patient.remove(&pid).unwrap();
            visits.sort_by_key(|v| v.visit_index);
            visits
        })
        .collect()
}

/// Checks the contiguity invariant: each patient's visit indices are 0..n.
pub fn validate_visit_indices(records: &[VisitRecord]) -> Result<()> {
    for visits in group_by_patient(records) {
        for (i, v) in visits.iter().enumerate() {
            if v.visit_index as usize != i {
                return Err(Error::InvalidRecord {
                    patient_id: v.patient_id.clone(),
                    reason: format!(
                        "visit indices not contiguous: expected {i}, found {}",
                        v.visit_index
                    ),
                });
            }
        }
    }
    Ok(())
}
