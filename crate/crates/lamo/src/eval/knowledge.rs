//! Drug-disease relation knowledge test under four output-space settings.

use crate::error::{Error, Result};
use crate::lora::LoraAdapterSet;
use crate::model::{answer_logprob, ModelParams, Tokenizer, BOS};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Indication,
    Contraindication,
    OffLabelUse,
    Unknown,
}

impl Relation {
    pub fn label(self) -> &'static str {
        match self {
            Relation::Indication => "indication",
            Relation::Contraindication => "contraindication",
            Relation::OffLabelUse => "off-label use",
            Relation::Unknown => "unknown",
        }
    }

    pub fn parse(text: &str) -> Option<Relation> {
        let t = text.trim().to_lowercase();
        // "contraindication" contains "indication"; match the longer first.
        if t.contains("contraindication") {
            Some(Relation::Contraindication)
        } else if t.contains("off-label") || t.contains("off label") {
            Some(Relation::OffLabelUse)
        } else if t.contains("indication") {
            Some(Relation::Indication)
        } else if t.contains("unknown") {
            Some(Relation::Unknown)
        } else {
            None
        }
    }
}

/// One ground-truth triple. Ground truth is always one of the three real
/// relation classes; "unknown" exists only as a model output option.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub drug: String,
    pub disease: String,
    pub relation: Relation,
}

/// The four admissible output spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSetting(pub u8);

impl KnowledgeSetting {
    pub fn allowed(self) -> Vec<Relation> {
        match self.0 {
            1 => vec![Relation::Indication, Relation::Contraindication],
            2 => vec![Relation::Indication, Relation::Contraindication, Relation::Unknown],
            3 => vec![Relation::Indication, Relation::Contraindication, Relation::OffLabelUse],
            4 => vec![
                Relation::Indication,
                Relation::Contraindication,
                Relation::OffLabelUse,
                Relation::Unknown,
            ],
            other => panic!("knowledge settings are 1..=4, got {other}"),
        }
    }

    pub fn choices_text(self) -> String {
        self.allowed()
            .iter()
            .map(|r| format!("{{{}}}", r.label()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Classifier interface: the model under test answers with a label string.
pub trait RelationClassifier {
    fn classify(&self, item: &KnowledgeItem, setting: KnowledgeSetting) -> Result<String>;
}

pub const KNOWLEDGE_PROMPT_TEMPLATE: &str = "You are taking a medical exam right now.
Your task is to ignore the individual physical condition of the patient and only consider the matching relationship between the drug and the disease.
From the following options enclosed in single quotes, select the one that most appropriately describes the drug-disease relationship, without any other word.
Choices: \"{{choices}}\"
Drug: {{drug}}.
Disease: {{disease}}.
You just need to choose an answer from the above choices to give without any explanation!
The most appropriate option without explanation is:";

/// The micro-LM as a relation classifier: scores each allowed label as a
/// continuation of the relation prompt and answers with the argmax.
pub struct ModelRelationClassifier<'a> {
    pub model: &'a ModelParams<f32>,
    pub adapters: Option<&'a LoraAdapterSet<f32>>,
    pub prompt_template: String,
}

impl<'a> ModelRelationClassifier<'a> {
    pub fn new(model: &'a ModelParams<f32>, adapters: Option<&'a LoraAdapterSet<f32>>) -> Self {
        Self {
            model,
            adapters,
            prompt_template: KNOWLEDGE_PROMPT_TEMPLATE.to_string(),
        }
    }
}

impl RelationClassifier for ModelRelationClassifier<'_> {
    fn classify(&self, item: &KnowledgeItem, setting: KnowledgeSetting) -> Result<String> {
        let prompt = self
            .prompt_template
            .replace("{{choices}}", &setting.choices_text())
            .replace("{{drug}}", &item.drug)
            .replace("{{disease}}", &item.disease);
        let mut tokens = vec![BOS];
        tokens.extend(Tokenizer.encode(&prompt));
        let mut best = (f64::NEG_INFINITY, Relation::Unknown);
        for relation in setting.allowed() {
            let lp = answer_logprob(
                self.model,
                self.adapters,
                &tokens,
                &format!(" {}", relation.label()),
            )?;
            if lp > best.0 {
                best = (lp, relation);
            }
        }
        Ok(best.1.label().to_string())
    }
}

/// One confusion row: percentages over the allowed outputs plus an
/// "invalid" bucket for out-of-space answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub ground_truth: Relation,
    pub total: usize,
    pub percent: BTreeMap<String, u32>,
    pub counts: BTreeMap<String, usize>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeReport {
    pub setting: u8,
    pub rows: Vec<ConfusionRow>,
}

fn percent_half_up(count: usize, total: usize) -> u32 {
    ((200 * count + total) / (2 * total)) as u32
}

/// Row-normalized confusion matrix in integer percents (rounded half-up).
pub fn knowledge_test(
    items: &[KnowledgeItem],
    classifier: &dyn RelationClassifier,
    setting: KnowledgeSetting,
) -> Result<KnowledgeReport> {
    if items.is_empty() {
        return Err(Error::Eval("knowledge test needs at least one item".into()));
    }
    let allowed = setting.allowed();
    let mut columns: Vec<String> = allowed.iter().map(|r| r.label().to_string()).collect();
    columns.push("invalid".into());

    let mut rows: BTreeMap<Relation, BTreeMap<String, usize>> = BTreeMap::new();
    let mut totals: BTreeMap<Relation, usize> = BTreeMap::new();
    for item in items {
        let answer = classifier.classify(item, setting)?;
        let column = match Relation::parse(&answer) {
            Some(r) if allowed.contains(&r) => r.label().to_string(),
            _ => "invalid".to_string(),
        };
        let row = rows.entry(item.relation).or_insert_with(|| {
            columns.iter().map(|c| (c.clone(), 0usize)).collect()
        });
        *row.get_mut(&column).unwrap() += 1;
        *totals.entry(item.relation).or_insert(0) += 1;
    }

    let report_rows = rows
        .into_iter()
        .map(|(ground_truth, counts)| {
            let total = totals[&ground_truth];
            let diagonal = counts.get(ground_truth.label()).copied().unwrap_or(0);
            ConfusionRow {
                ground_truth,
                total,
                percent: counts
                    .iter()
                    .map(|(c, &n)| (c.clone(), percent_half_up(n, total)))
                    .collect(),
                counts,
                accuracy: diagonal as f64 / total as f64,
            }
        })
        .collect();
    Ok(KnowledgeReport {
        setting: setting.0,
        rows: report_rows,
    })
}

/// `drug<TAB>disease<TAB>relation` lines.
pub fn load_knowledge_items(path: impl AsRef<Path>) -> Result<Vec<KnowledgeItem>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::CorpusFormat {
                line: i + 1,
                reason: "expected drug<TAB>disease<TAB>relation".into(),
            });
        }
        let relation = Relation::parse(parts[2]).ok_or_else(|| Error::CorpusFormat {
            line: i + 1,
            reason: format!("unknown relation {:?}", parts[2]),
        })?;
        items.push(KnowledgeItem {
            drug: parts[0].to_string(),
            disease: parts[1].to_string(),
            relation,
        });
    }
    Ok(items)
}
