//! Command implementations tying the pipeline together. Each command reads
//! its declared inputs, writes its declared outputs under the run directory,
//! and appends a run-metadata record. Every artifact embeds the digest of the
//! config that produced it, and consumers refuse mismatches.

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::corpus::{
    self, build_history, group_by_patient, medication_vocabulary, split_corpus, RuleTable,
    VisitRecord,
};
use crate::error::{Error, Result};
use crate::eval::{
    self, ablation_report, evaluate_split, instances_binary_f1, transfer_relative,
    AblationVariant, KnowledgeSetting, ModelBackend, ModelRelationClassifier,
};
use crate::grouping::{self, MedicationGroupMap};
use crate::instruction::{AblationMask, InstructionInstance, PromptTemplate, Renderer, TitleMode};
use crate::logging;
use crate::model::{ModelParams, Tokenizer};
use crate::notes::{extract_fields, segment_note, HeadingAliasTable, RawNote};
use crate::train::{self, train_all_groups, warm_phase, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

pub struct Pipeline {
    pub config: RunConfig,
    pub digest: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactHeader {
    artifact: String,
    config_digest: u64,
    master_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitsFile {
    config_digest: u64,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        let digest = config.digest();
        Pipeline { config, digest }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.config.out_dir)
            .map_err(|e| Error::io(self.config.out_dir.display().to_string(), e))
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                artifact: name.to_string(),
                producer: producer.to_string(),
            });
        }
        Ok(path)
    }

    fn header(&self, artifact: &str) -> ArtifactHeader {
        ArtifactHeader {
            artifact: artifact.to_string(),
            config_digest: self.digest,
            master_seed: self.config.master_seed,
        }
    }

    fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.path(name);
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &self.header(name)).expect("header serializes");
        out.push(b'\n');
        for row in rows {
            serde_json::to_writer(&mut out, row).expect("row serializes");
            out.push(b'\n');
        }
        std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn read_jsonl<T: for<'de> Deserialize<'de>>(&self, name: &str, producer: &str) -> Result<Vec<T>> {
        let path = self.require(name, producer)?;
        let file =
            std::fs::File::open(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header_line = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .ok_or_else(|| Error::Other(format!("{name} is empty")))?;
        let header: ArtifactHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::Other(format!(
                "{name}: bad artifact header: {e}"
            )))?;
        if header.config_digest != self.digest {
            return Err(Error::ArtifactDigestMismatch {
                path: path.display().to_string(),
                expected: self.digest,
                found: header.config_digest,
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line).map_err(|e| Error::CorpusFormat {
                line: i + 2,
                reason: e.to_string(),
            })?);
        }
        Ok(rows)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let wrapped = serde_json::json!({
            "header": self.header(name),
            "data": value,
        });
        let mut text = serde_json::to_string_pretty(&wrapped).expect("serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    #[allow(dead_code)]
    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, producer: &str) -> Result<T> {
        let path = self.require(name, producer)?;
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let wrapped: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Other(format!("{name}: {e}")))?;
        let header: ArtifactHeader = serde_json::from_value(wrapped["header"].clone())
            .map_err(|e| Error::Other(format!("{name}: bad header: {e}")))?;
        if header.config_digest != self.digest {
            return Err(Error::ArtifactDigestMismatch {
                path: path.display().to_string(),
                expected: self.digest,
                found: header.config_digest,
            });
        }
        serde_json::from_value(wrapped["data"].clone())
            .map_err(|e| Error::Other(format!("{name}: {e}")))
    }

    fn append_run_meta(&self, command: &str, wall_seconds: f64) -> Result<()> {
        let path = self.path("run_meta.jsonl");
        let record = serde_json::json!({
            "command": command,
            "config_digest": self.digest,
            "master_seed": self.config.master_seed,
            "version": env!("CARGO_PKG_VERSION"),
            "wall_seconds": wall_seconds,
            "unix_time": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        });
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        writeln!(file, "{record}").map_err(|e| Error::io(path.display().to_string(), e))
    }

    // ------------------------------------------------------------------
    // Shared loading helpers
    // ------------------------------------------------------------------

    pub fn template(&self) -> Result<PromptTemplate> {
        let mut template = if self.config.template_file.is_empty() {
            PromptTemplate::default()
        } else {
            PromptTemplate::load(&self.config.template_file)?
        };
        if !self.config.task_instruction.is_empty() {
            template.task_instruction = self.config.task_instruction.clone();
        }
        Ok(template)
    }

    fn load_corpus_artifact(&self) -> Result<Vec<VisitRecord>> {
        let path = if self.config.corpus_source == "file" {
            PathBuf::from(&self.config.corpus_path)
        } else {
            self.require("corpus.jsonl", "gen-synthetic")?
        };
        let (records, _) = corpus::load_corpus(path)?;
        Ok(records)
    }

    fn load_splits(&self, records: &[VisitRecord]) -> Result<(Vec<VisitRecord>, Vec<VisitRecord>, Vec<VisitRecord>)> {
        let path = self.require("splits.json", "gen-synthetic")?;
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let splits: SplitsFile =
            serde_json::from_str(&text).map_err(|e| Error::Other(format!("splits.json: {e}")))?;
        if splits.config_digest != self.digest {
            return Err(Error::ArtifactDigestMismatch {
                path: path.display().to_string(),
                expected: self.digest,
                found: splits.config_digest,
            });
        }
        let pick = |ids: &[String]| -> Vec<VisitRecord> {
            records
                .iter()
                .filter(|r| ids.contains(&r.patient_id))
                .cloned()
                .collect()
        };
        Ok((pick(&splits.train), pick(&splits.val), pick(&splits.test)))
    }

    fn load_group_map(&self) -> Result<MedicationGroupMap> {
        let path = self.require("groups.tsv", "group")?;
        MedicationGroupMap::read(path)
    }

    fn load_base_model(&self) -> Result<ModelParams<f32>> {
        let path = self.require("base.ckpt", "warm")?;
        let (model, meta) = checkpoint::load_base_model(path)?;
        if let Some(found) = meta.config_digest {
            if found != self.digest {
                return Err(Error::ArtifactDigestMismatch {
                    path: self.path("base.ckpt").display().to_string(),
                    expected: self.digest,
                    found,
                });
            }
        }
        Ok(model)
    }

    fn rule_table(&self) -> Option<RuleTable> {
        let path = self.path("rule_table.json");
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config_digest: Some(self.digest),
            master_seed: Some(self.config.master_seed),
            ..Default::default()
        }
    }

    // ------------------------------------------------------------------
    // Commands
    // ------------------------------------------------------------------

    pub fn cmd_gen_synthetic(&self) -> Result<()> {
        let start = std::time::Instant::now();
        self.ensure_out_dir()?;
        std::fs::write(self.path("config.echo.cfg"), self.config.canonical())
            .map_err(|e| Error::io("config.echo.cfg", e))?;
        let (records, table) = corpus::generate_synthetic_corpus(
            self.config.seed_for("corpus"),
            self.config.synthetic_patients,
            self.config.synthetic_diseases,
            self.config.synthetic_meds,
        );
        corpus::write_corpus(&records, self.path("corpus.jsonl"))?;
        let table_json = serde_json::to_string_pretty(&table).expect("serializes");
        std::fs::write(self.path("rule_table.json"), table_json)
            .map_err(|e| Error::io("rule_table.json", e))?;
        let stats = corpus::compute_stats(&records);
        self.write_json("stats.json", &stats)?;
        // Knowledge triples derived from the rule table: the indicated
        // disease, a designated contraindicated one, and an off-label one.
        let mut lines = String::new();
        let n_dis = table.diseases.len();
        for med in &table.medications {
            let d = med.indications[0];
            lines.push_str(&format!(
                "{}\t{}\tindication\n",
                med.name, table.diseases[d].concise_title
            ));
            lines.push_str(&format!(
                "{}\t{}\tcontraindication\n",
                med.name,
                table.diseases[(d + n_dis / 2) % n_dis].concise_title
            ));
            lines.push_str(&format!(
                "{}\t{}\toff-label use\n",
                med.name,
                table.diseases[(d + 1) % n_dis].concise_title
            ));
        }
        std::fs::write(self.path("knowledge_items.tsv"), lines)
            .map_err(|e| Error::io("knowledge_items.tsv", e))?;

        self.write_splits(&records)?;
        logging::info(
            "corpus",
            &format!("{} visits, {} patients", stats.visit_count, stats.patient_count),
        );
        self.append_run_meta("gen-synthetic", start.elapsed().as_secs_f64())
    }

    fn write_splits(&self, records: &[VisitRecord]) -> Result<()> {
        let splits = split_corpus(records, self.config.split, self.config.seed_for("split"))?;
        let ids = |rs: &[VisitRecord]| -> Vec<String> {
            let mut ids: Vec<String> = rs.iter().map(|r| r.patient_id.clone()).collect();
            ids.sort();
            ids.dedup();
            ids
        };
        let file = SplitsFile {
            config_digest: self.digest,
            train: ids(&splits.train),
            val: ids(&splits.val),
            test: ids(&splits.test),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("serializes");
        text.push('\n');
        std::fs::write(self.path("splits.json"), text)
            .map_err(|e| Error::io("splits.json", e))
    }

    /// Fills note fields of a corpus from raw discharge summaries using the
    /// deterministic extractor.
    pub fn cmd_extract(&self, raw_notes: &Path, base_corpus: &Path) -> Result<()> {
        let start = std::time::Instant::now();
        self.ensure_out_dir()?;
        #[derive(Deserialize)]
        struct RawLine {
            patient_id: String,
            visit_index: u32,
            text: String,
        }
        let text = std::fs::read_to_string(raw_notes)
            .map_err(|e| Error::io(raw_notes.display().to_string(), e))?;
        let mut aliases = HeadingAliasTable::default();
        if !self.config.alias_file.is_empty() {
            aliases.extend_from_file(&self.config.alias_file)?;
        }
        let mut fields_by_visit = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawLine = serde_json::from_str(line).map_err(|e| Error::CorpusFormat {
                line: i + 1,
                reason: e.to_string(),
            })?;
            let note = RawNote::new(raw.text);
            let spans = segment_note(&note, &aliases);
            let fields = extract_fields(&spans, self.config.note_budget_chars);
            fields_by_visit.insert((raw.patient_id, raw.visit_index), fields);
        }
        let (mut records, _) = corpus::load_corpus(base_corpus)?;
        let mut filled = 0usize;
        for record in &mut records {
            if let Some(fields) =
                fields_by_visit.remove(&(record.patient_id.clone(), record.visit_index))
            {
                record.note = fields;
                filled += 1;
            }
        }
        corpus::write_corpus(&records, self.path("corpus.jsonl"))?;
        self.write_json("stats.json", &corpus::compute_stats(&records))?;
        self.write_splits(&records)?;
        logging::info("extract", &format!("filled note fields for {filled} visits"));
        self.append_run_meta("extract", start.elapsed().as_secs_f64())
    }

    /// Renders instruction instances for all three splits.
    pub fn cmd_build_instructions(&self) -> Result<()> {
        let start = std::time::Instant::now();
        let records = self.load_corpus_artifact()?;
        let (train, val, test) = self.load_splits(&records)?;
        let group_map = self.load_group_map()?;
        let template = self.template()?;
        let vocabulary = medication_vocabulary(&records);
        let renderer = Renderer::new(
            &template,
            AblationMask::none(),
            self.config.title_mode,
            &vocabulary,
        );
        let mut neg_rng = crate::rng::Rng::new(self.config.seed_for("negatives"));

        let mut render_split = |records: &[VisitRecord],
                                subsample_negatives: bool|
         -> Result<Vec<InstructionInstance>> {
            let mut out = Vec::new();
            for patient in group_by_patient(records) {
                for (vi, visit) in patient.iter().enumerate() {
                    let history = build_history(&patient, vi);
                    let instances = if subsample_negatives
                        && self.config.train_negatives_per_positive > 0
                    {
                        renderer.expand_visit_sampled(
                            visit,
                            history.as_ref(),
                            &group_map,
                            self.config.train_negatives_per_positive,
                            &mut neg_rng,
                        )?
                    } else {
                        renderer.expand_visit(visit, history.as_ref(), &group_map)?
                    };
                    for inst in instances {
                        out.push(renderer.enforce_budget(
                            visit,
                            history.as_ref(),
                            inst,
                            self.config.max_prompt_tokens,
                            &Tokenizer,
                        )?);
                    }
                }
            }
            Ok(out)
        };

        let train_instances = render_split(&train, true)?;
        let val_instances = render_split(&val, false)?;
        let test_instances = render_split(&test, false)?;
        self.write_jsonl("instances.train.jsonl", &train_instances)?;
        self.write_jsonl("instances.val.jsonl", &val_instances)?;
        self.write_jsonl("instances.test.jsonl", &test_instances)?;
        logging::info(
            "instructions",
            &format!(
                "rendered {}/{}/{} train/val/test instances",
                train_instances.len(),
                val_instances.len(),
                test_instances.len()
            ),
        );
        self.append_run_meta("build-instructions", start.elapsed().as_secs_f64())
    }

    /// Builds the medication group map from training co-occurrence.
    pub fn cmd_group(&self) -> Result<()> {
        let start = std::time::Instant::now();
        let records = self.load_corpus_artifact()?;
        let (train, _, _) = self.load_splits(&records)?;
        let vocabulary = medication_vocabulary(&records);
        let map = if self.config.group_method == "class_file" {
            grouping::group_by_class_file(&self.config.class_file, &vocabulary)?
        } else {
            let (features, never) = grouping::build_cooccurrence(&train, &vocabulary);
            for med in &never {
                logging::warn("grouping", &format!("{med} never prescribed in training"));
            }
            grouping::cluster_medications(
                &features,
                &vocabulary,
                self.config.group_k,
                self.config.seed_for("grouping"),
            )?
        };
        map.write(self.path("groups.tsv"))?;
        logging::info(
            "grouping",
            &format!("k={} method={} digest={:#x}", map.k, map.method, map.digest()),
        );
        self.append_run_meta("group", start.elapsed().as_secs_f64())
    }


    /// Warm-phase text mix: a stride-sampled share of full-format instances
    /// plus compact decision renderings of every (train visit, medication in
    /// `meds`) pair. Both are renderings of the training split; the compact
    /// share concentrates answer supervision so the base learns the decision
    /// within a CPU-minutes budget.
    fn warm_texts(
        &self,
        instances: &[InstructionInstance],
        train_records: &[VisitRecord],
        meds: &[String],
        template: &PromptTemplate,
        vocabulary: &[String],
    ) -> Result<Vec<String>> {
        let mut texts = Vec::new();
        let pct = self.config.warm_full_mix_percent.min(100);
        let full_count = instances.len() * pct / 100;
        if full_count > 0 {
            let stride = (instances.len() as f64 / full_count as f64).max(1.0);
            let mut picked = 0usize;
            let mut next = 0.0f64;
            for (i, inst) in instances.iter().enumerate() {
                if picked < full_count && i as f64 >= next {
                    texts.push(train::supervised_text(inst, template));
                    picked += 1;
                    next += stride;
                }
            }
        }
        if pct < 100 {
            let renderer = Renderer::new(
                template,
                AblationMask::none(),
                self.config.title_mode,
                vocabulary,
            );
            for visit in train_records {
                for med in meds {
                    let compact = renderer.render_compact(visit, med)?;
                    texts.push(train::supervised_text(&compact, template));
                }
            }
        }
        Ok(texts)
    }
    /// Causal-LM warm phase over renderings of the training split; writes
    /// the frozen base checkpoint.
    pub fn cmd_warm(&self) -> Result<()> {
        let start = std::time::Instant::now();
        let template = self.template()?;
        let train_instances: Vec<InstructionInstance> =
            self.read_jsonl("instances.train.jsonl", "build-instructions")?;
        let records = self.load_corpus_artifact()?;
        let (train_records, _, _) = self.load_splits(&records)?;
        let vocabulary = medication_vocabulary(&records);
        let texts = self.warm_texts(&train_instances, &train_records, &vocabulary, &template, &vocabulary)?;
        logging::info("warm", &format!("{} warm texts", texts.len()));
        let mut model: ModelParams<f32> = ModelParams::init(self.config.model_config())?;
        let loss = warm_phase(&mut model, &texts, &self.config.warm_config())?;
        checkpoint::save_base_model(&model, self.checkpoint_meta(), self.path("base.ckpt"))?;
        logging::info("warm", &format!("final loss {loss:.4}; base frozen"));
        self.append_run_meta("warm", start.elapsed().as_secs_f64())
    }

    /// Trains one adapter set per medication group and writes the registry.
    pub fn cmd_train(&self) -> Result<()> {
        let start = std::time::Instant::now();
        let group_map = self.load_group_map()?;
        let model = self.load_base_model()?;
        let template = self.template()?;
        let train_instances: Vec<InstructionInstance> =
            self.read_jsonl("instances.train.jsonl", "build-instructions")?;
        let val_instances: Vec<InstructionInstance> =
            self.read_jsonl("instances.val.jsonl", "build-instructions")?;

        let mut by_group: BTreeMap<usize, Vec<InstructionInstance>> = BTreeMap::new();
        for inst in train_instances {
            by_group.entry(inst.group_id).or_default().push(inst);
        }
        let mut val_by_group: BTreeMap<usize, Vec<InstructionInstance>> = BTreeMap::new();
        for inst in val_instances {
            val_by_group.entry(inst.group_id).or_default().push(inst);
        }
        let empty: Vec<InstructionInstance> = Vec::new();
        let train_config = self.config.train_config();
        let lora = self.config.lora;
        let val_cap = train_config.val_max_instances;
        let val_seed = self.config.seed_for("val.subsample");
        let template_ref = &template;
        let model_ref = &model;
        let (registry, reports) = train_all_groups(
            &model,
            group_map.k,
            group_map.digest(),
            |g| by_group.get(&g).map_or(&empty[..], |v| &v[..]),
            |g| {
                let val: Vec<InstructionInstance> =
                    val_by_group.get(&g).cloned().unwrap_or_default();
                Box::new(move |set| {
                    if val.is_empty() {
                        return Ok(0.0);
                    }
                    instances_binary_f1(model_ref, set, &val, template_ref, val_cap, val_seed)
                })
            },
            &template,
            lora,
            &train_config,
        )?;
        checkpoint::save_registry(
            &registry,
            lora,
            self.checkpoint_meta(),
            self.path("adapters.ckpt"),
        )?;
        self.write_jsonl("train_report.jsonl", &reports)?;
        for r in &reports {
            logging::info(
                "trainer",
                &format!(
                    "group {}: steps {}, best F1 {:.4}, stop {}",
                    r.group_id, r.steps, r.best_f1, r.stop_reason
                ),
            );
        }
        self.append_run_meta("train", start.elapsed().as_secs_f64())
    }

    fn inference_parts(
        &self,
    ) -> Result<(
        Vec<VisitRecord>,
        Vec<VisitRecord>,
        MedicationGroupMap,
        ModelParams<f32>,
        crate::lora::AdapterRegistry<f32>,
        PromptTemplate,
        Vec<String>,
    )> {
        let records = self.load_corpus_artifact()?;
        let (_, _, test) = self.load_splits(&records)?;
        let group_map = self.load_group_map()?;
        let model = self.load_base_model()?;
        let path = self.require("adapters.ckpt", "train")?;
        let (registry, meta) = checkpoint::load_registry(path, Some(group_map.digest()))?;
        if let Some(found) = meta.config_digest {
            if found != self.digest {
                return Err(Error::ArtifactDigestMismatch {
                    path: self.path("adapters.ckpt").display().to_string(),
                    expected: self.digest,
                    found,
                });
            }
        }
        if !registry.is_complete(group_map.k) {
            let missing = (0..group_map.k)
                .find(|g| !registry.sets.contains_key(g))
                .unwrap_or(0);
            return Err(Error::MissingAdapter(missing));
        }
        let template = self.template()?;
        let vocabulary = medication_vocabulary(&records);
        Ok((records, test, group_map, model, registry, template, vocabulary))
    }

    /// Full-input recommendations over the test split.
    pub fn cmd_recommend(&self) -> Result<()> {
        let start = std::time::Instant::now();
        let (_, test, group_map, model, registry, template, vocabulary) = self.inference_parts()?;
        let renderer = Renderer::new(
            &template,
            AblationMask::none(),
            self.config.title_mode,
            &vocabulary,
        );
        let backend = ModelBackend {
            model: &model,
            registry: &registry,
            template: &template,
        };
        let report = evaluate_split(&test, &renderer, &group_map, &backend)?;
        self.write_jsonl("recommendations.jsonl", &report.per_visit)?;
        logging::info(
            "recommend",
            &format!(
                "{} visits, mean predicted set {:.2}",
                report.n_visits, report.mean.n_med
            ),
        );
        self.append_run_meta("recommend", start.elapsed().as_secs_f64())
    }

    /// Metric report from stored recommendations.
    pub fn cmd_eval(&self) -> Result<()> {
        let start = std::time::Instant::now();
        let results: Vec<eval::RecommendationResult> =
            self.read_jsonl("recommendations.jsonl", "recommend")?;
        if results.is_empty() {
            return Err(Error::Eval("no recommendations to evaluate".into()));
        }
        let records = self.load_corpus_artifact()?;
        let vocabulary = medication_vocabulary(&records);
        let rows: Vec<eval::MetricRow> = results.iter().map(eval::visit_metrics).collect();
        let mean = eval::aggregate_metrics(&rows)?;
        let pooled = eval::pooled_metrics(&results);
        let truth_mean =
            results.iter().map(|r| r.truth.len() as f64).sum::<f64>() / results.len() as f64;
        let always_rows: Vec<eval::MetricRow> = results
            .iter()
            .map(|r| {
                eval::visit_metrics(&eval::RecommendationResult {
                    patient_id: r.patient_id.clone(),
                    visit_index: r.visit_index,
                    predicted: vocabulary.iter().cloned().collect(),
                    truth: r.truth.clone(),
                    margins: BTreeMap::new(),
                })
            })
            .collect();
        let always_yes = eval::aggregate_metrics(&always_rows)?;

        #[derive(Serialize, Deserialize)]
        struct EvalSummary {
            n_visits: usize,
            truth_mean_meds: f64,
            mean: eval::MetricRow,
            pooled: eval::MetricRow,
            always_yes: eval::MetricRow,
        }
        let summary = EvalSummary {
            n_visits: results.len(),
            truth_mean_meds: truth_mean,
            mean,
            pooled,
            always_yes,
        };
        self.write_json("eval_report.json", &summary)?;

        let fmt_row = |name: &str, m: &eval::MetricRow| {
            format!(
                "{name:<14} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>7.2}\n",
                m.f1, m.jaccard, m.recall, m.precision, m.n_med
            )
        };
        let mut table = String::new();
        table.push_str(&format!(
            "visits: {}   ground-truth mean #Med: {:.2}\n\n",
            summary.n_visits, summary.truth_mean_meds
        ));
        table.push_str(&format!(
            "{:<14} {:>8} {:>8} {:>8} {:>9} {:>7}\n",
            "model", "F1", "Jaccard", "Recall", "Precision", "#Med"
        ));
        table.push_str(&fmt_row("trained", &summary.mean));
        table.push_str(&fmt_row("pooled", &summary.pooled));
        table.push_str(&fmt_row("always-yes", &summary.always_yes));
        std::fs::write(self.path("eval_report.txt"), table)
            .map_err(|e| Error::io("eval_report.txt", e))?;
        logging::info(
            "eval",
            &format!(
                "mean F1 {:.4}, #Med {:.2} vs truth {:.2}",
                summary.mean.f1, summary.mean.n_med, summary.truth_mean_meds
            ),
        );
        self.append_run_meta("eval", start.elapsed().as_secs_f64())
    }

    /// Input-factor and title-mode ablations over the test split with the
    /// trained registry.
    pub fn cmd_ablate(&self) -> Result<()> {
        let start = std::time::Instant::now();
        let (_, test, group_map, model, registry, template, vocabulary) = self.inference_parts()?;
        let backend = ModelBackend {
            model: &model,
            registry: &registry,
            template: &template,
        };
        let mask = |f: fn(&mut AblationMask)| {
            let mut m = AblationMask::none();
            f(&mut m);
            m
        };
        let mut variants = vec![AblationVariant {
            name: "full".into(),
            mask: AblationMask::none(),
            title_mode: self.config.title_mode,
        }];
        let factor_variants: [(&str, fn(&mut AblationMask)); 9] = [
            ("drop_history", |m| m.drop_history = true),
            ("drop_notes", |m| m.drop_notes = true),
            ("drop_codes", |m| m.drop_codes = true),
            ("drop_diagnoses", |m| m.drop_diagnoses = true),
            ("drop_procedures", |m| m.drop_procedures = true),
            ("drop_hpi", |m| m.drop_hpi = true),
            ("drop_pmh", |m| m.drop_pmh = true),
            ("drop_allergies", |m| m.drop_allergies = true),
            ("drop_moa", |m| m.drop_moa = true),
        ];
        for (name, f) in factor_variants {
            variants.push(AblationVariant {
                name: name.into(),
                mask: mask(f),
                title_mode: self.config.title_mode,
            });
        }
        for mode in [TitleMode::CodeOnly, TitleMode::OriginalTitle, TitleMode::ConciseTitle] {
            variants.push(AblationVariant {
                name: format!("title_{}", mode.as_str()),
                mask: AblationMask::none(),
                title_mode: mode,
            });
        }
        if !self.config.ablation_variants.is_empty() {
            variants.retain(|v| self.config.ablation_variants.contains(&v.name));
        }
        let mut subsets = BTreeMap::new();
        if let Some(table) = self.rule_table() {
            let note_only = table.note_only_medications();
            let coded: Vec<String> = table
                .medications
                .iter()
                .filter(|m| !m.note_only)
                .map(|m| m.name.clone())
                .collect();
            subsets.insert("note_only".to_string(), note_only);
            subsets.insert("coded".to_string(), coded);
        }
        let rows = ablation_report(
            &test,
            &variants,
            &subsets,
            &template,
            &vocabulary,
            &group_map,
            &backend,
        )?;
        self.write_jsonl("ablation.jsonl", &rows)?;
        for row in &rows {
            logging::info(
                "ablate",
                &format!("{:<22} mean F1 {:.4}", row.variant, row.mean.f1),
            );
        }
        self.append_run_meta("ablate", start.elapsed().as_secs_f64())
    }

    /// Knowledge test of the warmed base model on a drug-disease triple file.
    pub fn cmd_knowledge_test(&self) -> Result<()> {
        let start = std::time::Instant::now();
        let items_path = if self.config.knowledge_items.is_empty() {
            self.require("knowledge_items.tsv", "gen-synthetic")?
        } else {
            PathBuf::from(&self.config.knowledge_items)
        };
        let items = eval::load_knowledge_items(items_path)?;
        let model = self.load_base_model()?;
        let classifier = ModelRelationClassifier::new(&model, None);
        let setting = KnowledgeSetting(self.config.knowledge_setting);
        let report = eval::knowledge_test(&items, &classifier, setting)?;
        self.write_json("knowledge.json", &report)?;
        for row in &report.rows {
            logging::info(
                "knowledge",
                &format!(
                    "setting {} gt={} accuracy {:.2}",
                    report.setting,
                    row.ground_truth.label(),
                    row.accuracy
                ),
            );
        }
        self.append_run_meta("knowledge-test", start.elapsed().as_secs_f64())
    }

    /// Zero-shot transfer: trains a source-only pipeline and a full pipeline
    /// for one group, then reports per-target relative performance.
    pub fn cmd_transfer(&self) -> Result<()> {
        let start = std::time::Instant::now();
        let records = self.load_corpus_artifact()?;
        let (train_recs, val_recs, test_recs) = self.load_splits(&records)?;
        let group_map = self.load_group_map()?;
        let template = self.template()?;
        let vocabulary = medication_vocabulary(&records);
        let group_id = self.config.transfer_group;
        let members = group_map.group_members(group_id);
        if members.is_empty() {
            return Err(Error::Eval(format!("group {group_id} is empty")));
        }
        let targets: Vec<String> = self.config.transfer_targets.clone();
        if targets.is_empty() {
            return Err(Error::Eval("no transfer targets configured".into()));
        }
        for t in &targets {
            if !members.contains(t) {
                return Err(Error::Eval(format!(
                    "target {t} is not in group {group_id}"
                )));
            }
        }
        let sources: Vec<String> = members
            .iter()
            .filter(|m| !targets.contains(m) && !self.config.transfer_exclude.contains(m))
            .cloned()
            .collect();
        if sources.is_empty() {
            return Err(Error::Eval("no source medications left in group".into()));
        }
        logging::info(
            "transfer",
            &format!("group {group_id}: {} sources, {} targets", sources.len(), targets.len()),
        );

        let renderer = Renderer::new(
            &template,
            AblationMask::none(),
            self.config.title_mode,
            &vocabulary,
        );
        let render_for = |records: &[VisitRecord], meds: &[String]| -> Result<Vec<InstructionInstance>> {
            let mut out = Vec::new();
            for patient in group_by_patient(records) {
                for (vi, visit) in patient.iter().enumerate() {
                    let history = build_history(&patient, vi);
                    for med in meds {
                        let inst = renderer.render_instance(
                            visit,
                            history.as_ref(),
                            med,
                            group_map.assign_group(med)?,
                        )?;
                        out.push(renderer.enforce_budget(
                            visit,
                            history.as_ref(),
                            inst,
                            self.config.max_prompt_tokens,
                            &Tokenizer,
                        )?);
                    }
                }
            }
            Ok(out)
        };

        let mut with_targets = sources.clone();
        with_targets.extend(targets.iter().cloned());
        let run_side = |label: &str, meds: &[String]| -> Result<(ModelParams<f32>, crate::lora::LoraAdapterSet<f32>)> {
            let train_instances = render_for(&train_recs, meds)?;
            let val_instances = render_for(&val_recs, meds)?;
            let texts = self.warm_texts(&train_instances, &train_recs, meds, &template, &vocabulary)?;
            let mut model: ModelParams<f32> = ModelParams::init(self.config.model_config())?;
            warm_phase(&mut model, &texts, &self.config.warm_config())?;
            let train_config = TrainConfig {
                seed: self.config.seed_for(&format!("transfer.{label}")),
                ..self.config.train_config()
            };
            let model_ref = &model;
            let template_ref = &template;
            let val_cap = train_config.val_max_instances;
            let val_seed = self.config.seed_for("val.subsample");
            let mut eval_fn = move |set: &crate::lora::LoraAdapterSet<f32>| {
                instances_binary_f1(model_ref, set, &val_instances, template_ref, val_cap, val_seed)
            };
            let (set, _) = crate::train::train_group(
                &model,
                group_id,
                &train_instances,
                &template,
                self.config.lora,
                &train_config,
                &mut eval_fn,
            )?;
            Ok((model, set))
        };

        let (model_zero, set_zero) = run_side("zero", &sources)?;
        let (model_full, set_full) = run_side("full", &with_targets)?;

        struct SingleBackend<'a> {
            model: &'a ModelParams<f32>,
            set: &'a crate::lora::LoraAdapterSet<f32>,
            template: &'a PromptTemplate,
        }
        impl eval::YesNoBackend for SingleBackend<'_> {
            fn decide(&self, prompt_text: &str, _group_id: usize) -> Result<crate::model::Decision> {
                let mut tokens = vec![crate::model::BOS];
                tokens.extend(Tokenizer.encode(prompt_text));
                crate::model::decide_yes_no(
                    self.model,
                    Some(self.set),
                    &tokens,
                    &format!(" {}", self.template.yes_text),
                    &format!(" {}", self.template.no_text),
                )
            }
        }
        let zero_backend = SingleBackend {
            model: &model_zero,
            set: &set_zero,
            template: &template,
        };
        let full_backend = SingleBackend {
            model: &model_full,
            set: &set_full,
            template: &template,
        };
        let rows = transfer_relative(
            &test_recs,
            &targets,
            &renderer,
            &group_map,
            &zero_backend,
            &full_backend,
        )?;
        #[derive(Serialize)]
        struct TransferReport {
            group_id: usize,
            sources: Vec<String>,
            targets: Vec<String>,
            rows: Vec<eval::TransferRow>,
        }
        self.write_json(
            "transfer.json",
            &TransferReport {
                group_id,
                sources,
                targets,
                rows: rows.clone(),
            },
        )?;
        for row in &rows {
            logging::info(
                "transfer",
                &format!(
                    "{}: zero {:.4} / full {:.4} -> {}",
                    row.medication,
                    row.f1_zero_shot,
                    row.f1_full,
                    row.relative_percent
                        .map(|p| format!("{p:.1}%"))
                        .unwrap_or_else(|| "undefined".into())
                ),
            );
        }
        self.append_run_meta("transfer", start.elapsed().as_secs_f64())
    }

    /// The full chain: generate -> group -> build -> warm -> train ->
    /// recommend -> eval.
    pub fn cmd_all(&self) -> Result<()> {
        if self.config.corpus_source == "synthetic" {
            self.cmd_gen_synthetic()?;
        } else {
            self.ensure_out_dir()?;
            let (records, _) = corpus::load_corpus(&self.config.corpus_path)?;
            std::fs::write(self.path("config.echo.cfg"), self.config.canonical())
                .map_err(|e| Error::io("config.echo.cfg", e))?;
            self.write_splits(&records)?;
        }
        self.cmd_group()?;
        self.cmd_build_instructions()?;
        self.cmd_warm()?;
        self.cmd_train()?;
        self.cmd_recommend()?;
        self.cmd_eval()
    }
}
