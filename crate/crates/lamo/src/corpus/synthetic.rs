//! Seeded synthetic EHR corpora with a closed-form prescribing rule.
//!
//! Every medication is indicated for one disease and blocked by a drug
//! allergy; discharge medications are exactly the indicated, non-blocked ones.
//! A fifth of the diseases are "note-only": they are never coded in the
//! diagnosis list and surface solely as a symptom phrase in the HPI text, so
//! the medications treating them can only be predicted by reading the note.

use super::{ClinicalNoteFields, CodedConcept, Gender, VisitRecord};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const ROOTS: [&str; 30] = [
    "Velan", "Toric", "Mirel", "Quino", "Sorba", "Fendal", "Galvi", "Rubex", "Talvo", "Nexar",
    "Prilo", "Zenqu", "Korva", "Limta", "Duster", "Arvin", "Belqo", "Cynor", "Dorel", "Haxom",
    "Jolva", "Mavren", "Nolty", "Pexil", "Rivas", "Sabin", "Tevor", "Ulmar", "Wexin", "Yoren",
];

const SYMPTOMS: [&str; 30] = [
    "flushing", "tingling", "quivering", "throbbing", "drifting", "fluttering", "murmuring",
    "spasm", "tremor", "wavering", "stiffness", "burning", "aching", "swelling", "numbness",
    "itching", "cramping", "dizziness", "pounding", "shivering", "twitching", "soreness",
    "rumbling", "pressure", "prickling", "heaviness", "lightheadedness", "rattling", "clicking",
    "buzzing",
];

const SUFFIXES: [&str; 8] = ["mab", "nib", "olol", "pril", "sone", "zine", "micin", "xetine"];

const PROCEDURES: [(&str, &str, &str); 8] = [
    ("P001", "Percutaneous venous catheter placement, unspecified site", "Venous Catheterization"),
    ("P002", "Diagnostic axial imaging of trunk with contrast", "Axial Imaging"),
    ("P003", "Therapeutic drainage of serous fluid collection", "Fluid Drainage"),
    ("P004", "Transfusion of packed red blood cells", "Blood Transfusion"),
    ("P005", "Endoscopic examination of upper digestive tract", "Upper Endoscopy"),
    ("P006", "Closed reduction of long bone fracture with fixation", "Fracture Reduction"),
    ("P007", "Continuous mechanical ventilation, less than 96 hours", "Mechanical Ventilation"),
    ("P008", "Excisional biopsy of superficial lymphatic structure", "Lymph Node Biopsy"),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiseaseRule {
    pub index: usize,
    pub code: String,
    pub root: String,
    pub original_title: String,
    pub concise_title: String,
    /// Never coded; appears in the HPI as `symptom_phrase` only.
    pub note_only: bool,
    pub symptom: String,
}

impl DiseaseRule {
    pub fn symptom_phrase(&self) -> String {
        format!("recurrent {} episodes", self.symptom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MedicationRule {
    pub index: usize,
    pub name: String,
    pub indications: Vec<usize>,
    /// Presence of this string in the allergy list vetoes the medication.
    pub blocker: String,
    pub note_only: bool,
}

/// Closed-form ground truth of a synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleTable {
    pub diseases: Vec<DiseaseRule>,
    pub medications: Vec<MedicationRule>,
}

impl RuleTable {
    pub fn medication_names(&self) -> Vec<String> {
        self.medications.iter().map(|m| m.name.clone()).collect()
    }

    pub fn note_only_medications(&self) -> Vec<String> {
        self.medications
            .iter()
            .filter(|m| m.note_only)
            .map(|m| m.name.clone())
            .collect()
    }

    /// Diseases a record presents with, recovered purely from record content:
    /// coded ones from the diagnosis codes, note-only ones from their symptom
    /// phrase in the HPI.
    pub fn active_diseases(&self, record: &VisitRecord) -> BTreeSet<usize> {
        let mut active = BTreeSet::new();
        for c in &record.diagnoses {
            if let Some(d) = self.diseases.iter().find(|d| d.code == c.code) {
                active.insert(d.index);
            }
        }
        for d in self.diseases.iter().filter(|d| d.note_only) {
            if record.note.hpi.contains(&d.symptom_phrase()) {
                active.insert(d.index);
            }
        }
        active
    }

    /// Recomputes the label set for a record from the rule table alone.
    pub fn expected_medications(&self, record: &VisitRecord) -> Vec<String> {
        let active = self.active_diseases(record);
        let allergies: BTreeSet<String> =
            record.note.allergies.iter().map(|a| a.to_lowercase()).collect();
        self.medications
            .iter()
            .filter(|m| {
                m.indications.iter().any(|d| active.contains(d))
                    && !allergies.contains(&m.blocker.to_lowercase())
            })
            .map(|m| m.name.clone())
            .collect()
    }
}

fn make_rule_table(n_diseases: usize, n_meds: usize) -> RuleTable {
    let diseases: Vec<DiseaseRule> = (0..n_diseases)
        .map(|d| {
            let root = if d < ROOTS.len() {
                ROOTS[d].to_string()
            } else {
                format!("{}{}", ROOTS[d % ROOTS.len()], d / ROOTS.len())
            };
            let symptom = if d < SYMPTOMS.len() {
                SYMPTOMS[d].to_string()
            } else {
                format!("{}-{}", SYMPTOMS[d % SYMPTOMS.len()], d / SYMPTOMS.len())
            };
            DiseaseRule {
                index: d,
                code: format!("D{d:03}"),
                original_title: format!(
                    "Chronic {} dysregulation syndrome, unspecified severity",
                    root.to_lowercase()
                ),
                concise_title: format!("{root} disorder"),
                root,
                note_only: d % 5 == 0,
                symptom,
            }
        })
        .collect();

    let medications: Vec<MedicationRule> = (0..n_meds)
        .map(|m| {
            let d = m % n_diseases;
            let twin_rank = m / n_diseases;
            let suffix = if twin_rank < SUFFIXES.len() {
                SUFFIXES[twin_rank].to_string()
            } else {
                format!("{}{}", SUFFIXES[twin_rank % SUFFIXES.len()], twin_rank)
            };
            let name = format!("{}{suffix}", diseases[d].root);
            MedicationRule {
                index: m,
                blocker: name.clone(),
                name,
                indications: vec![d],
                note_only: diseases[d].note_only,
            }
        })
        .collect();

    RuleTable { diseases, medications }
}

/// Generates a corpus of `n_patients` patients. Deterministic given `seed`.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_patients: usize,
    n_diseases: usize,
    n_meds: usize,
) -> (Vec<VisitRecord>, RuleTable) {
    assert!(n_diseases >= 2, "need at least 2 diseases");
    assert!(n_meds >= 2, "need at least 2 medications");
    let table = make_rule_table(n_diseases, n_meds);
    let mut rng = Rng::new(seed);
    let mut records = Vec::new();

    for p in 0..n_patients {
        let patient_id = format!("p{p:04}");
        let n_visits = match rng.next_f64() {
            x if x < 0.55 => 1,
            x if x < 0.85 => 2,
            _ => 3,
        };
        let age0 = rng.range(18, 92) as u32;
        let gender = match rng.next_f64() {
            x if x < 0.48 => Gender::Male,
            x if x < 0.96 => Gender::Female,
            _ => Gender::Other,
        };

        let n_chronic = rng.range(3, 6.min(n_diseases));
        let chronic: BTreeSet<usize> =
            rng.sample_indices(n_diseases, n_chronic).into_iter().collect();

        let mut allergies: BTreeSet<usize> = BTreeSet::new();
        let n_allergies = match rng.next_f64() {
            x if x < 0.45 => 0,
            x if x < 0.75 => 1,
            x if x < 0.90 => 2,
            _ => 3,
        };
        for idx in rng.sample_indices(n_meds, n_allergies.min(n_meds)) {
            allergies.insert(idx);
        }

        let mut prev_discharge: Vec<String> = Vec::new();
        for v in 0..n_visits {
            let mut active = chronic.clone();
            if rng.chance(0.3) {
                active.insert(rng.below(n_diseases));
            }

            let mut discharge: Vec<String> = table
                .medications
                .iter()
                .filter(|m| {
                    m.indications.iter().any(|d| active.contains(d))
                        && !allergies.contains(&m.index)
                })
                .map(|m| m.name.clone())
                .collect();
            if discharge.is_empty() {
                // An allergy set can block every indicated medication; drop
                // the allergies rather than emit a label-less visit.
                allergies.clear();
                discharge = table
                    .medications
                    .iter()
                    .filter(|m| m.indications.iter().any(|d| active.contains(d)))
                    .map(|m| m.name.clone())
                    .collect();
            }

            let coded: Vec<&DiseaseRule> = active
                .iter()
                .map(|&d| &table.diseases[d])
                .filter(|d| !d.note_only)
                .collect();
            let noted: Vec<&DiseaseRule> = active
                .iter()
                .map(|&d| &table.diseases[d])
                .filter(|d| d.note_only)
                .collect();

            let mut hpi = String::new();
            for d in &noted {
                if !hpi.is_empty() {
                    hpi.push(' ');
                }
                hpi.push_str(&format!("Reports {}.", d.symptom_phrase()));
            }
            if hpi.is_empty() {
                hpi = "No acute complaints reported.".to_string();
            }

            let pmh = if coded.is_empty() {
                "None notable.".to_string()
            } else {
                format!(
                    "Notable for {}.",
                    coded
                        .iter()
                        .take(2)
                        .map(|d| d.concise_title.to_lowercase())
                        .collect::<Vec<_>>()
                        .join(" and ")
                )
            };

            let meds_on_admission = if v == 0 {
                let mut moa = Vec::new();
                let n_moa = rng.range(0, 2);
                for idx in rng.sample_indices(n_meds, n_moa) {
                    let name = &table.medications[idx].name;
                    if !discharge.contains(name) {
                        moa.push(name.clone());
                    }
                }
                moa.sort();
                moa
            } else {
                prev_discharge.clone()
            };

            let allergy_names: Vec<String> = allergies
                .iter()
                .map(|&i| table.medications[i].name.clone())
                .collect();

            let n_proc = rng.range(0, 2);
            let procedures: Vec<CodedConcept> = rng
                .sample_indices(PROCEDURES.len(), n_proc)
                .into_iter()
                .map(|i| CodedConcept {
                    code: PROCEDURES[i].0.into(),
                    original_title: PROCEDURES[i].1.into(),
                    concise_title: PROCEDURES[i].2.into(),
                })
                .collect();

            records.push(VisitRecord {
                patient_id: patient_id.clone(),
                visit_index: v as u32,
                age: age0 + v as u32,
                gender,
                diagnoses: coded
                    .iter()
                    .map(|d| CodedConcept {
                        code: d.code.clone(),
                        original_title: d.original_title.clone(),
                        concise_title: d.concise_title.clone(),
                    })
                    .collect(),
                procedures,
                note: ClinicalNoteFields {
                    hpi,
                    pmh,
                    allergies: allergy_names,
                    meds_on_admission,
                },
                discharge_medications: discharge.clone(),
            });
            prev_discharge = discharge;
        }
    }
    (records, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_corpus;

    #[test]
    fn same_seed_gives_byte_identical_corpora() {
        let dir = tempfile::tempdir().unwrap();
        let (a, _) = generate_synthetic_corpus(9, 20, 10, 15);
        let (b, _) = generate_synthetic_corpus(9, 20, 10, 15);
        let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
        write_corpus(&a, &pa).unwrap();
        write_corpus(&b, &pb).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }

    #[test]
    fn indicated_unblocked_med_is_prescribed() {
        let (records, table) = generate_synthetic_corpus(3, 40, 10, 15);
        // Find a visit presenting a coded disease and check its medication.
        let mut checked = 0;
        for r in &records {
            for c in &r.diagnoses {
                let d = table.diseases.iter().find(|d| d.code == c.code).unwrap();
                for m in &table.medications {
                    if m.indications.contains(&d.index)
                        && !r.note.allergies.iter().any(|a| a.eq_ignore_ascii_case(&m.blocker))
                    {
                        assert!(
                            r.discharge_medications.contains(&m.name),
                            "{} indicated by {} but absent",
                            m.name,
                            d.code
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn blocked_med_is_never_prescribed() {
        let (records, table) = generate_synthetic_corpus(4, 60, 10, 15);
        let mut hits = 0;
        for r in &records {
            for m in &table.medications {
                if r.note.allergies.iter().any(|a| a.eq_ignore_ascii_case(&m.blocker)) {
                    assert!(!r.discharge_medications.contains(&m.name));
                    hits += 1;
                }
            }
        }
        assert!(hits > 0, "fixture never produced an allergy veto");
    }

    #[test]
    fn labels_recompute_from_rule_table() {
        let (records, table) = generate_synthetic_corpus(7, 50, 20, 30);
        for r in &records {
            assert_eq!(
                table.expected_medications(r),
                r.discharge_medications,
                "label mismatch for {} visit {}",
                r.patient_id,
                r.visit_index
            );
        }
    }

    #[test]
    fn note_only_diseases_never_coded() {
        let (records, table) = generate_synthetic_corpus(5, 50, 20, 30);
        let note_only_codes: Vec<&str> = table
            .diseases
            .iter()
            .filter(|d| d.note_only)
            .map(|d| d.code.as_str())
            .collect();
        assert!(!note_only_codes.is_empty());
        for r in &records {
            for c in &r.diagnoses {
                assert!(!note_only_codes.contains(&c.code.as_str()));
            }
        }
    }

    #[test]
    fn med_names_are_never_substrings_of_each_other() {
        let table = make_rule_table(20, 30);
        for a in &table.medications {
            for b in &table.medications {
                if a.index != b.index {
                    assert!(
                        !a.name.contains(&b.name),
                        "{} contains {}",
                        a.name,
                        b.name
                    );
                }
            }
        }
    }

    #[test]
    fn every_visit_has_discharge_meds() {
        let (records, _) = generate_synthetic_corpus(11, 100, 20, 30);
        assert!(records.iter().all(|r| !r.discharge_medications.is_empty()));
    }
}
