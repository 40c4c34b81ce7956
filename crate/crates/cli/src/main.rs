//! `unforge`: runs unlearning scenarios, evaluates checkpoints and prints
//! greedy decodes.
//!
//! ```text
//! unforge <scenario> [--config <path>] [--out <dir>] [--seed N] [--<key> <value> ...]
//! unforge suite      [--config <path>] [--out <dir>] [--seed N] [--<key> <value> ...]
//! unforge eval   --ckpt <path> --data <dir>
//! unforge decode --ckpt <path> --prompt "<text>" [--max-new N]
//! ```
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 only divergence failures, 4 IO or corrupt file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use unforge::data::{read_jsonl, Vocabulary};
use unforge::eval::{evaluate, EvalOptions, MAX_NEW_TOKENS};
use unforge::model::{TokenSeq, Transformer, BOS};
use unforge::runner::{load_checkpoint, run_scenario, run_suite, ExperimentConfig, RunManifest, Scenario};
use unforge::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "unforge", version, about = "Desk-scale machine unlearning lab")]
#[command(after_help = scenario_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario into <out>/<scenario>, sharing one model cache.
    Suite(RunArgs),
    /// Evaluate a checkpoint against a data bundle written by a scenario.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding split.jsonl, ref.ckpt and oracle.ckpt.
        #[arg(long)]
        data: PathBuf,
    },
    /// Greedy-decode a continuation of a prompt.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = MAX_NEW_TOKENS)]
        max_new: usize,
    },
    #[command(external_subcommand)]
    Scenario(Vec<OsString>),
}

/// Arguments shared by scenario runs and the suite. Any other
/// `--<key> <value>` pair overrides the config key of the same name.
#[derive(Parser, Debug)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    overrides: Vec<String>,
}

fn scenario_help() -> String {
    let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
    format!("Scenarios (run as `unforge <scenario>`):\n  {}", names.join("\n  "))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Suite(args) => {
            let cfg = build_config(None, &args)?;
            let manifests = run_suite(&cfg)?;
            Ok(manifests.iter().map(report_manifest).max().unwrap_or(0))
        }
        Command::Scenario(raw) => {
            let name = raw.first().and_then(|s| s.to_str()).context("missing scenario name")?;
            let scenario: Scenario = name.parse().map_err(anyhow::Error::from)?;
            let args = RunArgs::try_parse_from(&raw).map_err(|e| Error::Config(e.to_string()))?;
            let cfg = build_config(Some(scenario), &args)?;
            let manifest = run_scenario(&cfg)?;
            Ok(report_manifest(&manifest))
        }
        Command::Eval { ckpt, data } => {
            eval(&ckpt, &data)?;
            Ok(0)
        }
        Command::Decode { ckpt, prompt, max_new } => {
            decode(&ckpt, &prompt, max_new)?;
            Ok(0)
        }
    }
}

/// Config file (or defaults), then `--out`/`--seed`, then free overrides.
fn build_config(scenario: Option<Scenario>, args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let (mut config, mut out, mut seed) = (args.config.clone(), args.out.clone(), args.seed);
    let mut pairs = Vec::new();
    // Named flags that follow an override land in the trailing list.
    for (key, value) in override_pairs(&args.overrides)? {
        match key.as_str() {
            "config" => config = Some(PathBuf::from(value)),
            "out" => out = Some(PathBuf::from(value)),
            "seed" => seed = Some(value.parse().map_err(|_| Error::Config(format!("invalid seed `{value}`")))?),
            _ => pairs.push((key, value)),
        }
    }
    let mut cfg = match &config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = scenario {
        cfg.scenario = s;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seeds = vec![seed];
    }
    let cfg = cfg.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `--key value` and `--key=value` tokens into pairs.
fn override_pairs(tokens: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            return Err(Error::Config(format!("expected `--<key>`, found `{tok}`")).into());
        };
        match flag.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let value = it.next().ok_or_else(|| Error::Config(format!("`--{flag}` needs a value")))?;
                out.push((flag.to_string(), value.clone()));
            }
        }
    }
    Ok(out)
}

fn report_manifest(manifest: &RunManifest) -> u8 {
    log::info!(
        "{}: {} rows, {} failures, {:.1}s",
        manifest.scenario,
        manifest.rows.len(),
        manifest.failures.len(),
        manifest.total_seconds()
    );
    for f in &manifest.failures {
        log::warn!("{}: {}", f.stage, f.message);
    }
    match (manifest.failures.is_empty(), manifest.only_divergences()) {
        (true, _) => 0,
        (false, true) => EXIT_DIVERGENCE,
        (false, false) => EXIT_OTHER,
    }
}

fn eval(ckpt: &Path, data: &Path) -> anyhow::Result<()> {
    let vocab = Vocabulary::standard();
    let (theta, meta) = load_checkpoint(ckpt)?;
    let (theta_ref, _) = load_checkpoint(&data.join("ref.ckpt"))?;
    let (theta_oracle, _) = load_checkpoint(&data.join("oracle.ckpt"))?;
    let split = read_jsonl(&data.join("split.jsonl"), &vocab)?;
    let model = Transformer::new(meta.model)?;
    let report = evaluate(&model, &theta, &theta_ref, &theta_oracle, &split, &EvalOptions::default())?;
    println!("{}", report.to_json()?);
    Ok(())
}

fn decode(ckpt: &Path, prompt: &str, max_new: usize) -> anyhow::Result<()> {
    let vocab = Vocabulary::standard();
    let (theta, meta) = load_checkpoint(ckpt)?;
    let model = Transformer::new(meta.model)?;
    let mut tokens = vec![BOS];
    tokens.extend(vocab.tokenize_strict(prompt)?);
    if tokens.len() >= model.config().ctx_len {
        return Err(Error::Argument(format!("prompt of {} tokens leaves no room in the context", tokens.len())).into());
    }
    let budget = max_new.min(model.config().ctx_len - tokens.len());
    let out = model.greedy_decode(&theta, &TokenSeq::prompt(tokens.clone()), budget)?;
    println!("{}", vocab.detokenize(&out.tokens()[tokens.len()..]));
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Argument(_) | Error::Unsupported(_)) => EXIT_CONFIG,
        Some(Error::Io { .. } | Error::Format { .. }) => EXIT_IO,
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}
