//! Recommendation assembly across group adapters, split evaluation, the
//! input-factor/title ablations, and the zero-shot transfer table.

use super::metrics::{
    aggregate_metrics, binary_f1, pooled_metrics, visit_metrics, MetricRow, RecommendationResult,
};
use crate::corpus::{build_history, group_by_patient, VisitRecord};
use crate::error::Result;
use crate::grouping::MedicationGroupMap;
use crate::instruction::{AblationMask, InstructionInstance, PromptTemplate, Renderer, TitleMode};
use crate::lora::AdapterRegistry;
use crate::model::{decide_yes_no, Decision, ModelParams, Tokenizer, BOS};
use crate::rng::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Decision source for one rendered prompt. The production backend routes to
/// the candidate group's adapters on the micro model; tests may script it.
pub trait YesNoBackend: Sync {
    fn decide(&self, prompt_text: &str, group_id: usize) -> Result<Decision>;
}

pub struct ModelBackend<'a> {
    pub model: &'a ModelParams<f32>,
    pub registry: &'a AdapterRegistry<f32>,
    pub template: &'a PromptTemplate,
}

impl YesNoBackend for ModelBackend<'_> {
    fn decide(&self, prompt_text: &str, group_id: usize) -> Result<Decision> {
        let adapters = self.registry.get(group_id)?;
        let mut tokens = vec![BOS];
        tokens.extend(Tokenizer.encode(prompt_text));
        decide_yes_no(
            self.model,
            Some(adapters),
            &tokens,
            &format!(" {}", self.template.yes_text),
            &format!(" {}", self.template.no_text),
        )
    }
}

/// Adapter-free decisions on the bare base model.
pub struct BaseOnlyBackend<'a> {
    pub model: &'a ModelParams<f32>,
    pub template: &'a PromptTemplate,
}

impl YesNoBackend for BaseOnlyBackend<'_> {
    fn decide(&self, prompt_text: &str, _group_id: usize) -> Result<Decision> {
        let mut tokens = vec![BOS];
        tokens.extend(Tokenizer.encode(prompt_text));
        decide_yes_no(
            self.model,
            None,
            &tokens,
            &format!(" {}", self.template.yes_text),
            &format!(" {}", self.template.no_text),
        )
    }
}

/// Runs every candidate medication for one visit through its group's
/// decision path. Decisions are parallel over candidates; the result is
/// assembled in vocabulary order, so repeated runs are identical.
pub fn recommend_for_visit(
    visit: &VisitRecord,
    history: Option<&crate::corpus::HistoryBlock>,
    renderer: &Renderer<'_>,
    group_map: &MedicationGroupMap,
    backend: &dyn YesNoBackend,
) -> Result<RecommendationResult> {
    let decisions: Vec<Result<(String, Decision)>> = renderer
        .vocabulary
        .par_iter()
        .map(|med| {
            let group_id = group_map.assign_group(med)?;
            let instance = renderer.render_instance(visit, history, med, group_id)?;
            let decision = backend.decide(&instance.text, group_id)?;
            Ok((med.clone(), decision))
        })
        .collect();
    let mut predicted = std::collections::BTreeSet::new();
    let mut margins = BTreeMap::new();
    for d in decisions {
        let (med, decision) = d?;
        if decision.yes {
            predicted.insert(med.clone());
        }
        margins.insert(med, decision.margin);
    }
    Ok(RecommendationResult {
        patient_id: visit.patient_id.clone(),
        visit_index: visit.visit_index,
        predicted,
        truth: visit.discharge_medications.iter().cloned().collect(),
        margins,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_visits: usize,
    pub skipped_empty_truth: usize,
    /// Headline: unweighted mean of per-visit metrics.
    pub mean: MetricRow,
    /// Micro-averaged pooled counts, reported alongside.
    pub pooled: MetricRow,
    pub truth_mean_meds: f64,
    /// Predict-the-whole-vocabulary reference row.
    pub always_yes: MetricRow,
    pub per_visit: Vec<RecommendationResult>,
}

/// Evaluates a split: recommendations for every visit (with per-patient
/// history), aggregate metrics, and the always-Yes overprescription
/// reference.
pub fn evaluate_split(
    records: &[VisitRecord],
    renderer: &Renderer<'_>,
    group_map: &MedicationGroupMap,
    backend: &dyn YesNoBackend,
) -> Result<EvalReport> {
    let mut results = Vec::new();
    let mut skipped = 0usize;
    for patient in group_by_patient(records) {
        for (vi, visit) in patient.iter().enumerate() {
            if visit.discharge_medications.is_empty() {
                skipped += 1;
                continue;
            }
            let history = build_history(&patient, vi);
            results.push(recommend_for_visit(
                visit,
                history.as_ref(),
                renderer,
                group_map,
                backend,
            )?);
        }
    }
    let rows: Vec<MetricRow> = results.iter().map(visit_metrics).collect();
    let mean = aggregate_metrics(&rows)?;
    let pooled = pooled_metrics(&results);
    let truth_mean_meds =
        results.iter().map(|r| r.truth.len() as f64).sum::<f64>() / results.len() as f64;

    // The always-Yes baseline predicts the entire vocabulary for every visit.
    let full_vocab: std::collections::BTreeSet<String> =
        renderer.vocabulary.iter().cloned().collect();
    let always_rows: Vec<MetricRow> = results
        .iter()
        .map(|r| {
            visit_metrics(&RecommendationResult {
                patient_id: r.patient_id.clone(),
                visit_index: r.visit_index,
                predicted: full_vocab.clone(),
                truth: r.truth.clone(),
                margins: BTreeMap::new(),
            })
        })
        .collect();
    let always_yes = aggregate_metrics(&always_rows)?;

    Ok(EvalReport {
        n_visits: results.len(),
        skipped_empty_truth: skipped,
        mean,
        pooled,
        truth_mean_meds,
        always_yes,
        per_visit: results,
    })
}

/// Binary F1 of the current adapters over labelled instances, used as the
/// per-group validation measure during training. `max_instances` subsamples
/// with the given seed.
pub fn instances_binary_f1(
    model: &ModelParams<f32>,
    adapters: &crate::lora::LoraAdapterSet<f32>,
    instances: &[InstructionInstance],
    template: &PromptTemplate,
    max_instances: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let picked: Vec<&InstructionInstance> = match max_instances {
        Some(cap) if cap < instances.len() => {
            let mut rng = Rng::new(seed);
            rng.sample_indices(instances.len(), cap)
                .into_iter()
                .map(|i| &instances[i])
                .collect()
        }
        _ => instances.iter().collect(),
    };
    let decisions: Vec<Result<(bool, bool)>> = picked
        .par_iter()
        .map(|inst| {
            let mut tokens = vec![BOS];
            tokens.extend(Tokenizer.encode(&inst.text));
            let d = decide_yes_no(
                model,
                Some(adapters),
                &tokens,
                &format!(" {}", template.yes_text),
                &format!(" {}", template.no_text),
            )?;
            Ok((d.yes, inst.label))
        })
        .collect();
    let pairs: Result<Vec<(bool, bool)>> = decisions.into_iter().collect();
    Ok(binary_f1(&pairs?))
}

/// Per-medication-subset binary F1 over a split's recommendation results.
pub fn subset_binary_f1(results: &[RecommendationResult], subset: &[String]) -> f64 {
    let mut decisions = Vec::new();
    for r in results {
        for med in subset {
            decisions.push((r.predicted.contains(med), r.truth.contains(med)));
        }
    }
    binary_f1(&decisions)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub mask: AblationMask,
    pub title_mode: TitleMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean: MetricRow,
    pub pooled: MetricRow,
    /// Binary F1 per named medication subset.
    pub subset_f1: BTreeMap<String, f64>,
}

/// Re-renders and re-scores the split under each variant with the same
/// trained registry.
pub fn ablation_report(
    records: &[VisitRecord],
    variants: &[AblationVariant],
    subsets: &BTreeMap<String, Vec<String>>,
    template: &PromptTemplate,
    vocabulary: &[String],
    group_map: &MedicationGroupMap,
    backend: &dyn YesNoBackend,
) -> Result<Vec<AblationRow>> {
    assert!(!variants.is_empty(), "ablation needs at least one variant");
    let mut rows = Vec::new();
    for variant in variants {
        let renderer = Renderer::new(template, variant.mask, variant.title_mode, vocabulary);
        let report = evaluate_split(records, &renderer, group_map, backend)?;
        let subset_f1 = subsets
            .iter()
            .map(|(name, meds)| (name.clone(), subset_binary_f1(&report.per_visit, meds)))
            .collect();
        rows.push(AblationRow {
            variant: variant.name.clone(),
            mean: report.mean,
            pooled: report.pooled,
            subset_f1,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferRow {
    pub medication: String,
    pub f1_zero_shot: f64,
    pub f1_full: f64,
    /// `100 * f1_zero_shot / f1_full`; None when the full-training F1 is 0.
    pub relative_percent: Option<f64>,
}

/// Relative zero-shot transfer per target medication: the zero-shot side was
/// trained without the targets, the full side with them; both score the same
/// held-out visits.
pub fn transfer_relative(
    records: &[VisitRecord],
    targets: &[String],
    renderer: &Renderer<'_>,
    group_map: &MedicationGroupMap,
    zero_backend: &dyn YesNoBackend,
    full_backend: &dyn YesNoBackend,
) -> Result<Vec<TransferRow>> {
    let mut per_med_decisions: BTreeMap<String, (Vec<(bool, bool)>, Vec<(bool, bool)>)> =
        targets.iter().map(|t| (t.clone(), (Vec::new(), Vec::new()))).collect();
    for patient in group_by_patient(records) {
        for (vi, visit) in patient.iter().enumerate() {
            let history = build_history(&patient, vi);
            for med in targets {
                let group_id = group_map.assign_group(med)?;
                let instance = renderer.render_instance(visit, history.as_ref(), med, group_id)?;
                let label = visit.discharge_medications.contains(med);
                let zero = zero_backend.decide(&instance.text, group_id)?;
                let full = full_backend.decide(&instance.text, group_id)?;
                let entry = per_med_decisions.get_mut(med).unwrap();
                entry.0.push((zero.yes, label));
                entry.1.push((full.yes, label));
            }
        }
    }
    Ok(targets
        .iter()
        .map(|med| {
            let (zero, full) = &per_med_decisions[med];
            let f1_zero_shot = binary_f1(zero);
            let f1_full = binary_f1(full);
            TransferRow {
                medication: med.clone(),
                f1_zero_shot,
                f1_full,
                relative_percent: (f1_full > 0.0).then(|| 100.0 * f1_zero_shot / f1_full),
            }
        })
        .collect())
}
