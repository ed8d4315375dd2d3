//! Line-delimited corpus files and the title dictionary.
//!
//! One UTF-8 JSON record per line with field order fixed by the schema below;
//! writing a loaded corpus reproduces the canonical bytes exactly.

use super::{
    compute_stats, validate_visit_indices, ClinicalNoteFields, CodedConcept, CorpusStats, Gender,
    VisitRecord,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// On-disk record schema. The note fields are flattened so a line reads
/// naturally, mirroring the documented field order.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    patient_id: String,
    visit_index: u32,
    age: u32,
    gender: Gender,
    diagnoses: Vec<CodedConcept>,
    procedures: Vec<CodedConcept>,
    hpi: String,
    pmh: String,
    allergies: Vec<String>,
    meds_on_admission: Vec<String>,
    discharge_medications: Vec<String>,
}

impl From<&VisitRecord> for RecordLine {
    fn from(r: &VisitRecord) -> Self {
        RecordLine {
            patient_id: r.patient_id.clone(),
            visit_index: r.visit_index,
            age: r.age,
            gender: r.gender,
            diagnoses: r.diagnoses.clone(),
            procedures: r.procedures.clone(),
            hpi: r.note.hpi.clone(),
            pmh: r.note.pmh.clone(),
            allergies: r.note.allergies.clone(),
            meds_on_admission: r.note.meds_on_admission.clone(),
            discharge_medications: r.discharge_medications.clone(),
        }
    }
}

impl From<RecordLine> for VisitRecord {
    fn from(l: RecordLine) -> Self {
        VisitRecord {
            patient_id: l.patient_id,
            visit_index: l.visit_index,
            age: l.age,
            gender: l.gender,
            diagnoses: l.diagnoses,
            procedures: l.procedures,
            note: ClinicalNoteFields {
                hpi: l.hpi,
                pmh: l.pmh,
                allergies: l.allergies,
                meds_on_admission: l.meds_on_admission,
            },
            discharge_medications: l.discharge_medications,
        }
    }
}

/// Loads a corpus file, validating every record. Record order is preserved.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Vec<VisitRecord>, CorpusStats)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen: BTreeMap<(String, u32), usize> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::CorpusFormat {
            line: lineno,
            reason: e.to_string(),
        })?;
        let record: VisitRecord = parsed.into();
        record.validate().map_err(|e| Error::CorpusFormat {
            line: lineno,
            reason: e.to_string(),
        })?;
        let key = (record.patient_id.clone(), record.visit_index);
        if seen.insert(key, lineno).is_some() {
            return Err(Error::DuplicateVisit {
                patient_id: record.patient_id,
                visit_index: record.visit_index,
                line: lineno,
            });
        }
        records.push(record);
    }
    validate_visit_indices(&records)?;
    let stats = compute_stats(&records);
    Ok((records, stats))
}

/// Writes records in canonical form (compact JSON, fixed field order, `\n`
/// line endings).
pub fn write_corpus(records: &[VisitRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        let line = RecordLine::from(r);
        serde_json::to_writer(&mut out, &line).expect("record serialization cannot fail");
        out.push(b'\n');
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Loads a `code<TAB>original_title<TAB>concise_title` dictionary.
pub fn load_title_dictionary(path: impl AsRef<Path>) -> Result<BTreeMap<String, CodedConcept>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut dict = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::CorpusFormat {
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, found {}", parts.len()),
            });
        }
        dict.insert(
            parts[0].to_string(),
            CodedConcept {
                code: parts[0].to_string(),
                original_title: parts[1].to_string(),
                concise_title: parts[2].to_string(),
            },
        );
    }
    Ok(dict)
}
