//! Evaluation: recommendation metrics, the knowledge test, ablations, and
//! zero-shot transfer.

mod harness;
mod knowledge;
mod metrics;

pub use harness::{
    ablation_report, evaluate_split, instances_binary_f1, recommend_for_visit, subset_binary_f1,
    transfer_relative, AblationRow, AblationVariant, BaseOnlyBackend, EvalReport, ModelBackend,
    TransferRow, YesNoBackend,
};
pub use knowledge::{
    knowledge_test, load_knowledge_items, ConfusionRow, KnowledgeItem, KnowledgeReport,
    KnowledgeSetting, ModelRelationClassifier, Relation, RelationClassifier,
    KNOWLEDGE_PROMPT_TEMPLATE,
};
pub use metrics::{
    aggregate_metrics, binary_f1, pooled_metrics, visit_metrics, MetricRow, RecommendationResult,
};
