use lamo::config::RunConfig;
use lamo::pipeline::Pipeline;
use std::path::PathBuf;

const USAGE: &str = "usage: lamo <command> [options]

commands:
  gen-synthetic       generate a seeded synthetic corpus, splits and stats
  extract             fill corpus note fields from raw discharge summaries
                      (--raw notes.jsonl --base corpus.jsonl)
  group               partition the medication vocabulary into adapter groups
  build-instructions  render instruction instances for all splits
  warm                causal-LM warm phase; writes the frozen base checkpoint
  train               train one adapter set per group
  recommend           run test-split recommendations with all adapters
  eval                metric report from stored recommendations
  knowledge-test      drug-disease relation test of the base model
  transfer            zero-shot transfer protocol for one group
  ablate              input-factor and title-mode ablations
  all                 the full chain: gen -> group -> build -> warm -> train
                      -> recommend -> eval

options:
  --config <path>     run-config file (key = value sections); defaults apply
                      when omitted
  --set <sec.key=v>   override one config key (repeatable), e.g.
                      --set train.max_steps=64 or --set master_seed=7
  --out <dir>         output directory (same as --set out_dir=<dir>)
  --raw <path>        raw notes file for `extract`
  --base <path>       base corpus file for `extract`

environment:
  LAMO_SEED           overrides master_seed
  LAMO_<SEC>_<KEY>    overrides any section key, e.g. LAMO_TRAIN_MAX_STEPS
";

fn fail(msg: &str) -> ! {
    eprintln!("error: {msg}");
    eprintln!("{USAGE}");
    std::process::exit(2);
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        println!("{USAGE}");
        return;
    }
    let command = args[0].clone();
    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<String> = Vec::new();
    let mut raw_path: Option<PathBuf> = None;
    let mut base_path: Option<PathBuf> = None;
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--config" => {
                config_path = Some(PathBuf::from(expect_value(&args, &mut i)));
            }
            "--set" => {
                overrides.push(expect_value(&args, &mut i));
            }
            "--out" => {
                overrides.push(format!("out_dir={}", expect_value(&args, &mut i)));
            }
            "--raw" => {
                raw_path = Some(PathBuf::from(expect_value(&args, &mut i)));
            }
            "--base" => {
                base_path = Some(PathBuf::from(expect_value(&args, &mut i)));
            }
            other => fail(&format!("unknown option {other}")),
        }
        i += 1;
    }

    let mut config = match config_path {
        Some(path) => RunConfig::load(&path).unwrap_or_else(|e| fail(&e.to_string())),
        None => {
            let mut c = RunConfig::default();
            c.apply_env_overrides().unwrap_or_else(|e| fail(&e.to_string()));
            c
        }
    };
    for entry in &overrides {
        apply_override(&mut config, entry).unwrap_or_else(|e| fail(&e));
    }

    let pipeline = Pipeline::new(config);
    let result = match command.as_str() {
        "gen-synthetic" => pipeline.cmd_gen_synthetic(),
        "extract" => {
            let raw = raw_path.unwrap_or_else(|| fail("extract needs --raw <notes.jsonl>"));
            let base = base_path.unwrap_or_else(|| fail("extract needs --base <corpus.jsonl>"));
            pipeline.cmd_extract(&raw, &base)
        }
        "group" => pipeline.cmd_group(),
        "build-instructions" => pipeline.cmd_build_instructions(),
        "warm" => pipeline.cmd_warm(),
        "train" => pipeline.cmd_train(),
        "recommend" => pipeline.cmd_recommend(),
        "eval" => pipeline.cmd_eval(),
        "knowledge-test" => pipeline.cmd_knowledge_test(),
        "transfer" => pipeline.cmd_transfer(),
        "ablate" => pipeline.cmd_ablate(),
        "all" => pipeline.cmd_all(),
        other => fail(&format!("unknown command {other}")),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn expect_value(args: &[String], i: &mut usize) -> String {
    *i += 1;
    args.get(*i)
        .cloned()
        .unwrap_or_else(|| fail(&format!("{} needs a value", args[*i - 1])))
}

/// `section.key=value` or `key=value` for top-level keys.
fn apply_override(config: &mut RunConfig, entry: &str) -> Result<(), String> {
    let (key_path, value) = entry
        .split_once('=')
        .ok_or_else(|| format!("override {entry:?} is not key=value"))?;
    let (section, key) = match key_path.trim().split_once('.') {
        Some((s, k)) => (s.to_string(), k.to_string()),
        None => (String::new(), key_path.trim().to_string()),
    };
    config
        .set_override(&section, &key, value.trim())
        .map_err(|e| format!("override {entry:?}: {e}"))
}
