//! Run configuration: plain-text `key = value` sections, environment
//! overrides under the `LAMO_` prefix, a canonical echo, and seed derivation
//! for every stage from the master seed.

use crate::corpus::SplitRatios;
use crate::error::{Error, Result};
use crate::instruction::TitleMode;
use crate::lora::LoraConfig;
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::train::{TrainConfig, WarmConfig};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,

    // [corpus]
    pub corpus_source: String, // "synthetic" | "file"
    pub corpus_path: String,
    pub synthetic_patients: usize,
    pub synthetic_diseases: usize,
    pub synthetic_meds: usize,
    pub split: SplitRatios,

    // [notes]
    pub note_budget_chars: usize,
    pub alias_file: String,

    // [instructions]
    pub template_file: String,
    pub task_instruction: String, // inline override; empty keeps the template's
    pub title_mode: TitleMode,
    pub max_prompt_tokens: usize,
    pub train_negatives_per_positive: usize, // 0 = full expansion

    // [grouping]
    pub group_k: usize,
    pub group_method: String, // "cooccurrence" | "class_file"
    pub class_file: String,

    // [model]
    pub model: ModelConfig,

    // [lora]
    pub lora: LoraConfig,

    // [warm]
    pub warm: WarmConfig,
    /// Percent of full-format instances in the warm text mix; the rest are
    /// compact decision renderings. 100 disables the compact mix.
    pub warm_full_mix_percent: usize,

    // [train]
    pub train: TrainConfig,

    // [eval]
    pub knowledge_items: String,
    pub knowledge_setting: u8,
    /// Ablation variants to run; empty means the full sweep.
    pub ablation_variants: Vec<String>,

    // [transfer]
    pub transfer_group: usize,
    pub transfer_targets: Vec<String>,
    pub transfer_exclude: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 42,
            out_dir: PathBuf::from("run"),
            corpus_source: "synthetic".into(),
            corpus_path: String::new(),
            synthetic_patients: 200,
            synthetic_diseases: 20,
            synthetic_meds: 30,
            split: SplitRatios::default(),
            note_budget_chars: 600,
            alias_file: String::new(),
            template_file: String::new(),
            task_instruction: String::new(),
            title_mode: TitleMode::ConciseTitle,
            max_prompt_tokens: 1024,
            train_negatives_per_positive: 0,
            group_k: 10,
            group_method: "cooccurrence".into(),
            class_file: String::new(),
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            warm: WarmConfig::default(),
            warm_full_mix_percent: 30,
            train: TrainConfig::default(),
            knowledge_items: String::new(),
            knowledge_setting: 1,
            ablation_variants: Vec::new(),
            transfer_group: 0,
            transfer_targets: Vec::new(),
            transfer_exclude: Vec::new(),
        }
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl RunConfig {
    /// Parses `key = value` lines under `[section]` headers. Unknown keys are
    /// errors; omitted keys keep their defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                path: origin.to_string(),
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            config
                .apply(&section, key, value)
                .map_err(|reason| Error::Config {
                    path: origin.to_string(),
                    line: i + 1,
                    reason,
                })?;
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut config = Self::parse(&text, &path.display().to_string())?;
        config.apply_env_overrides()?;
        Ok(config)
    }

    /// `LAMO_SEED` overrides the master seed; `LAMO_<SECTION>_<KEY>` overrides
    /// any section key (e.g. `LAMO_TRAIN_MAX_STEPS`).
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        let vars: Vec<(String, String)> = std::env::vars().collect();
        for (name, value) in vars {
            if name == "LAMO_SEED" {
                self.apply("", "master_seed", &value)
                    .map_err(|reason| Error::Config {
                        path: "env:LAMO_SEED".into(),
                        line: 0,
                        reason,
                    })?;
                continue;
            }
            let Some(rest) = name.strip_prefix("LAMO_") else {
                continue;
            };
            let lower = rest.to_lowercase();
            let (section, key) = match lower.split_once('_') {
                Some((s, k))
                    if [
                        "corpus", "notes", "instructions", "grouping", "model", "lora",
                        "warm", "train", "eval", "transfer",
                    ]
                    .contains(&s) =>
                {
                    (s.to_string(), k.to_string())
                }
                _ => (String::new(), lower),
            };
            self.apply(&section, &key, &value)
                .map_err(|reason| Error::Config {
                    path: format!("env:{name}"),
                    line: 0,
                    reason,
                })?;
        }
        Ok(())
    }

    /// Applies one `--set`-style override.
    pub fn set_override(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        self.apply(section, key, value)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad numeric value {v:?}"))
        }
        match (section, key) {
            ("", "master_seed") => self.master_seed = num(value)?,
            ("", "out_dir") => self.out_dir = PathBuf::from(value),
            ("corpus", "source") => {
                if value != "synthetic" && value != "file" {
                    return Err(format!("corpus source must be synthetic|file, got {value:?}"));
                }
                self.corpus_source = value.into();
            }
            ("corpus", "path") => self.corpus_path = value.into(),
            ("corpus", "synthetic_patients") => self.synthetic_patients = num(value)?,
            ("corpus", "synthetic_diseases") => self.synthetic_diseases = num(value)?,
            ("corpus", "synthetic_meds") => self.synthetic_meds = num(value)?,
            ("corpus", "split_train") => self.split.train = num(value)?,
            ("corpus", "split_val") => self.split.val = num(value)?,
            ("corpus", "split_test") => self.split.test = num(value)?,
            ("notes", "budget_chars") => self.note_budget_chars = num(value)?,
            ("notes", "alias_file") => self.alias_file = value.into(),
            ("instructions", "template_file") => self.template_file = value.into(),
            ("instructions", "task_instruction") => self.task_instruction = value.into(),
            ("instructions", "title_mode") => {
                self.title_mode = match value {
                    "code_only" => TitleMode::CodeOnly,
                    "original_title" => TitleMode::OriginalTitle,
                    "concise_title" => TitleMode::ConciseTitle,
                    other => return Err(format!("unknown title mode {other:?}")),
                }
            }
            ("instructions", "max_tokens") => self.max_prompt_tokens = num(value)?,
            ("instructions", "train_negatives_per_positive") => {
                self.train_negatives_per_positive = num(value)?
            }
            ("grouping", "k") => self.group_k = num(value)?,
            ("grouping", "method") => {
                if value != "cooccurrence" && value != "class_file" {
                    return Err(format!("grouping method must be cooccurrence|class_file, got {value:?}"));
                }
                self.group_method = value.into();
            }
            ("grouping", "class_file") => self.class_file = value.into(),
            ("model", "d_model") => self.model.d_model = num(value)?,
            ("model", "n_layers") => self.model.n_layers = num(value)?,
            ("model", "n_heads") => self.model.n_heads = num(value)?,
            ("model", "d_ffn") => self.model.d_ffn = num(value)?,
            ("model", "context_length") => self.model.context_length = num(value)?,
            ("lora", "rank") => self.lora.rank = num(value)?,
            ("lora", "alpha") => self.lora.alpha = num(value)?,
            ("lora", "dropout") => self.lora.dropout_p = num(value)?,
            ("warm", "steps") => self.warm.steps = num(value)?,
            ("warm", "batch_size") => self.warm.batch_size = num(value)?,
            ("warm", "base_lr") => self.warm.base_lr = num(value)?,
            ("warm", "warmup_steps") => self.warm.warmup_steps = num(value)?,
            ("warm", "max_tokens") => self.warm.max_tokens = num(value)?,
            ("warm", "full_mix_percent") => {
                self.warm_full_mix_percent = num(value)?;
                if self.warm_full_mix_percent > 100 {
                    return Err("full_mix_percent must be 0..=100".into());
                }
            }
            ("train", "base_lr") => self.train.base_lr = num(value)?,
            ("train", "batch_size") => self.train.batch_size = num(value)?,
            ("train", "eval_interval_batches") => self.train.eval_interval_batches = num(value)?,
            ("train", "patience_evals") => self.train.patience_evals = num(value)?,
            ("train", "warmup_steps") => self.train.warmup_steps = num(value)?,
            ("train", "max_steps") => self.train.max_steps = num(value)?,
            ("train", "val_max_instances") => {
                self.train.val_max_instances =
                    if value.is_empty() { None } else { Some(num(value)?) }
            }
            ("eval", "knowledge_items") => self.knowledge_items = value.into(),
            ("eval", "knowledge_setting") => self.knowledge_setting = num(value)?,
            ("eval", "ablation_variants") => self.ablation_variants = parse_list(value),
            ("transfer", "group") => self.transfer_group = num(value)?,
            ("transfer", "targets") => self.transfer_targets = parse_list(value),
            ("transfer", "exclude") => self.transfer_exclude = parse_list(value),
            (s, k) => {
                return Err(if s.is_empty() {
                    format!("unknown key {k:?}")
                } else {
                    format!("unknown key {k:?} in section [{s}]")
                })
            }
        }
        Ok(())
    }

    /// Canonical echo: every field, fixed order. Parsing the echo reproduces
    /// the config, and the digest is the FNV-1a hash of this text.
    pub fn canonical(&self) -> String {
        let opt = |v: &Option<usize>| v.map(|n| n.to_string()).unwrap_or_default();
        format!(
            "master_seed = {}\nout_dir = {}\n\n[corpus]\nsource = {}\npath = {}\nsynthetic_patients = {}\nsynthetic_diseases = {}\nsynthetic_meds = {}\nsplit_train = {}\nsplit_val = {}\nsplit_test = {}\n\n[notes]\nbudget_chars = {}\nalias_file = {}\n\n[instructions]\ntemplate_file = {}\ntask_instruction = {}\ntitle_mode = {}\nmax_tokens = {}\ntrain_negatives_per_positive = {}\n\n[grouping]\nk = {}\nmethod = {}\nclass_file = {}\n\n[model]\nd_model = {}\nn_layers = {}\nn_heads = {}\nd_ffn = {}\ncontext_length = {}\n\n[lora]\nrank = {}\nalpha = {}\ndropout = {}\n\n[warm]\nsteps = {}\nbatch_size = {}\nbase_lr = {}\nwarmup_steps = {}\nmax_tokens = {}\nfull_mix_percent = {}\n\n[train]\nbase_lr = {}\nbatch_size = {}\neval_interval_batches = {}\npatience_evals = {}\nwarmup_steps = {}\nmax_steps = {}\nval_max_instances = {}\n\n[eval]\nknowledge_items = {}\nknowledge_setting = {}\nablation_variants = {}\n\n[transfer]\ngroup = {}\ntargets = {}\nexclude = {}\n",
            self.master_seed,
            self.out_dir.display(),
            self.corpus_source,
            self.corpus_path,
            self.synthetic_patients,
            self.synthetic_diseases,
            self.synthetic_meds,
            self.split.train,
            self.split.val,
            self.split.test,
            self.note_budget_chars,
            self.alias_file,
            self.template_file,
            self.task_instruction,
            self.title_mode.as_str(),
            self.max_prompt_tokens,
            self.train_negatives_per_positive,
            self.group_k,
            self.group_method,
            self.class_file,
            self.model.d_model,
            self.model.n_layers,
            self.model.n_heads,
            self.model.d_ffn,
            self.model.context_length,
            self.lora.rank,
            self.lora.alpha,
            self.lora.dropout_p,
            self.warm.steps,
            self.warm.batch_size,
            self.warm.base_lr,
            self.warm.warmup_steps,
            self.warm.max_tokens,
            self.warm_full_mix_percent,
            self.train.base_lr,
            self.train.batch_size,
            self.train.eval_interval_batches,
            self.train.patience_evals,
            self.train.warmup_steps,
            self.train.max_steps,
            opt(&self.train.val_max_instances),
            self.knowledge_items,
            self.knowledge_setting,
            self.ablation_variants.join(","),
            self.transfer_group,
            self.transfer_targets.join(","),
            self.transfer_exclude.join(","),
        )
    }

    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for &b in self.canonical().as_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Stage seed derived from the master seed; documented splitter, so every
    /// module's stream is reproducible in isolation.
    pub fn seed_for(&self, stage: &str) -> u64 {
        derive_seed(self.master_seed, stage)
    }

    /// Materialized per-stage configs with their derived seeds filled in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed_for("model.init"),
            ..self.model
        }
    }

    pub fn warm_config(&self) -> WarmConfig {
        WarmConfig {
            seed: self.seed_for("warm"),
            ..self.warm
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed_for("train"),
            ..self.train
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_echo() {
        let config = RunConfig::default();
        let echoed = RunConfig::parse(&config.canonical(), "test").unwrap();
        assert_eq!(echoed, config);
        assert_eq!(echoed.digest(), config.digest());
    }

    #[test]
    fn parse_error_names_line() {
        let err = RunConfig::parse("[train]\nnot a pair\n", "cfg").unwrap_err();
        match err {
            Error::Config { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::parse("[train]\nbananas = 7\n", "cfg").is_err());
    }

    #[test]
    fn paper_defaults_are_wired() {
        let c = RunConfig::default();
        assert_eq!(c.train.base_lr, 5e-4);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.eval_interval_batches, 32);
        assert_eq!(c.train.patience_evals, 10);
        assert_eq!(c.lora.rank, 8);
        assert_eq!(c.lora.alpha, 16.0);
        assert_eq!(c.lora.dropout_p, 0.05);
        assert_eq!(c.group_k, 10);
    }

    #[test]
    fn stage_seeds_differ_but_are_stable() {
        let c = RunConfig::default();
        assert_ne!(c.seed_for("corpus"), c.seed_for("split"));
        assert_eq!(c.seed_for("corpus"), c.seed_for("corpus"));
    }

    #[test]
    fn digest_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.group_k = 5;
        assert_ne!(a.digest(), b.digest());
    }
}
