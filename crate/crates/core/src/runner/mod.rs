//! Experiment orchestration: builds data and models for a scenario, runs
//! every training and extrapolation step, evaluates and persists each
//! resulting model, and records what was produced in a [`RunManifest`].
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! checkpoints/<slug>.ckpt   models referenced by CSV rows
//! reports/<slug>.json       one evaluation document per checkpoint
//! traces/<run>.csv          per-step training traces
//! data/<split>/             split.jsonl + ref.ckpt + oracle.ckpt, for `eval`
//! <scenario>.csv            aggregate, one row per evaluated model
//! summary.txt               headline metrics as a text table
//! manifest.json             config hash, file list, stage timings, failures
//! ```
//!
//! Reference and oracle models are cached by a content hash of their
//! training inputs, so scenarios sharing a cache directory train them once.

pub mod checkpoint;
pub mod config;
pub mod report;
mod scenarios;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_corpus, write_jsonl, DatasetSplit, QAPair, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::Transformer;
use crate::tensor::ParamStore;
use crate::trainer::{train_with_hook, TrainConfig, TrainData, TrainTrace};

pub use checkpoint::{load_checkpoint, quantize, save_checkpoint, CheckpointMeta, Provenance};
pub use config::{ExperimentConfig, Scenario};
pub use report::{ReportRow, RowStatus};

use checkpoint::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Divergence,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub kind: FailureKind,
    pub message: String,
}

/// One cosine between two normalized parameter-space directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineEntry {
    pub seed: u64,
    pub a: String,
    pub b: String,
    pub cosine: f64,
}

/// One per-epoch point of a utility/divergence curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub seed: u64,
    pub method: String,
    pub beta: f64,
    pub epoch: usize,
    pub heldout_utility: f64,
    pub divergence_from_ref: f64,
}

/// Everything a scenario run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: Scenario,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Paths relative to the output directory, in creation order.
    pub files: Vec<String>,
    pub stages: Vec<StageTiming>,
    pub failures: Vec<Failure>,
    pub rows: Vec<ReportRow>,
    pub cosines: Vec<CosineEntry>,
    pub curves: Vec<CurvePoint>,
}

impl RunManifest {
    pub fn empty(scenario: Scenario, config_hash: String, seeds: Vec<u64>) -> Self {
        Self {
            scenario,
            config_hash,
            seeds,
            files: Vec::new(),
            stages: Vec::new(),
            failures: Vec::new(),
            rows: Vec::new(),
            cosines: Vec::new(),
            curves: Vec::new(),
        }
    }

    /// True when something failed and every failure was a divergence.
    pub fn only_divergences(&self) -> bool {
        !self.failures.is_empty() && self.failures.iter().all(|f| f.kind == FailureKind::Divergence)
    }

    pub fn total_seconds(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }

    /// Rows matching a method name (and seed, when given).
    pub fn rows_for<'a>(&'a self, method: &'a str, seed: Option<u64>) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method && seed.map_or(true, |s| r.seed == s))
    }
}

/// Result of a training run that is allowed to diverge.
pub(crate) enum Trained {
    Done(ParamStore),
    Diverged,
}

/// Per-seed shared inputs: the model definition, the corpus and θ_ref.
pub(crate) struct Base {
    pub seed: u64,
    pub model: Transformer,
    pub corpus: Vec<QAPair>,
    pub theta_ref: ParamStore,
}

/// A split together with its oracle and the directory holding both.
pub(crate) struct Prepared {
    pub tag: String,
    pub split: DatasetSplit,
    pub oracle: ParamStore,
}

pub(crate) struct Run<'c> {
    pub cfg: &'c ExperimentConfig,
    dir: PathBuf,
    cache: PathBuf,
    pub vocab: Vocabulary,
    pub manifest: RunManifest,
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

impl<'c> Run<'c> {
    fn new(cfg: &'c ExperimentConfig) -> Result<Self> {
        let manifest = RunManifest::empty(cfg.scenario, cfg.hash()?, cfg.seeds.clone());
        Ok(Self {
            cfg,
            dir: cfg.output_dir.clone(),
            cache: cfg.cache_path(),
            vocab: Vocabulary::standard(),
            manifest,
        })
    }

    pub fn scenario(&self) -> &'static str {
        self.cfg.scenario.name()
    }

    /// Absolute path for an output file, recorded in the manifest.
    pub fn output(&mut self, rel: &str) -> PathBuf {
        if !self.manifest.files.iter().any(|f| f == rel) {
            self.manifest.files.push(rel.to_string());
        }
        self.dir.join(rel)
    }

    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        let seconds = start.elapsed().as_secs_f64();
        log::debug!("{} {stage}: {seconds:.2}s", self.scenario());
        self.manifest.stages.push(StageTiming { stage: stage.to_string(), seconds });
        out
    }

    fn cached_training(
        &mut self,
        kind: Provenance,
        model: &Transformer,
        config: &TrainConfig,
        retain: &[QAPair],
        forget: &[QAPair],
    ) -> Result<(ParamStore, PathBuf)> {
        let tokens: Vec<u8> = retain
            .iter()
            .chain(forget)
            .flat_map(|p| p.sequence().tokens().iter().flat_map(|t| t.to_le_bytes()).chain([0xff; 4]).collect::<Vec<u8>>())
            .collect();
        let key = sha_hex(&[
            kind.name().as_bytes(),
            &serde_json::to_vec(model.config())?,
            &serde_json::to_vec(config)?,
            &tokens,
        ]);
        let stem = format!("{}-{}", kind.name(), &key[..16]);
        let ckpt = self.cache.join(format!("{stem}.ckpt"));
        let trace_path = self.cache.join(format!("{stem}.csv"));
        if ckpt.exists() && trace_path.exists() {
            let (theta, meta) = load_checkpoint(&ckpt)?;
            if &meta.model == model.config() {
                return Ok((theta, trace_path));
            }
        }
        let stage = format!("train {}", kind.name());
        let (theta, trace) = self.timed(&stage, |_| {
            let data = TrainData::new(retain, forget);
            train_with_hook(model, &model.init_params(), None, &data, config, |_, _| Ok(())).map_err(Error::from)
        })?;
        let theta = quantize(&theta);
        let meta = CheckpointMeta::new(model.config().clone(), &theta, kind).with("cache_key", &key);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        write_atomic(&trace_path, &buf)?;
        save_checkpoint(&theta, &meta, &ckpt)?;
        Ok((theta, trace_path))
    }

    /// Corpus, model and reference model for one seed. The reference is
    /// fine-tuned on the whole corpus, so every split of it shares θ_ref.
    pub fn base(&mut self, seed: u64) -> Result<Base> {
        let cfg = self.cfg;
        let corpus = generate_corpus(seed, cfg.n_entities, cfg.attrs_per_entity)?;
        let model = Transformer::new(cfg.model_config(seed))?;
        let (theta_ref, trace) =
            self.cached_training(Provenance::Ref, &model, &cfg.finetune_config(seed), &corpus, &[])?;
        if self.cfg.scenario == Scenario::Finetune {
            self.copy_into(&trace, &format!("traces/ref-s{seed}.csv"))?;
        }
        Ok(Base { seed, model, corpus, theta_ref })
    }

    /// Trains (or loads) the oracle for `split` and writes the data bundle
    /// `data/<tag>/` used by the `eval` command.
    pub fn prepare(&mut self, base: &Base, tag: &str, split: DatasetSplit) -> Result<Prepared> {
        let config = self.cfg.finetune_config(base.seed);
        let (oracle, trace) = self.cached_training(Provenance::Oracle, &base.model, &config, &split.retain, &[])?;
        if self.cfg.scenario == Scenario::Finetune {
            self.copy_into(&trace, &format!("traces/oracle-{tag}.csv"))?;
        }
        let data_path = self.output(&format!("data/{tag}/split.jsonl"));
        if let Some(dir) = data_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_jsonl(&data_path, &split, &self.vocab)?;
        let cfg = base.model.config().clone();
        let ref_path = self.output(&format!("data/{tag}/ref.ckpt"));
        save_checkpoint(&base.theta_ref, &CheckpointMeta::new(cfg.clone(), &base.theta_ref, Provenance::Ref), &ref_path)?;
        let oracle_path = self.output(&format!("data/{tag}/oracle.ckpt"));
        save_checkpoint(&oracle, &CheckpointMeta::new(cfg, &oracle, Provenance::Oracle), &oracle_path)?;
        Ok(Prepared { tag: tag.to_string(), split, oracle })
    }

    fn copy_into(&mut self, from: &Path, rel: &str) -> Result<()> {
        let bytes = std::fs::read(from).map_err(|e| Error::io(from, e))?;
        let to = self.output(rel);
        write_atomic(&to, &bytes)
    }

    /// Runs one training job, saving its trace. Divergence is recorded as a
    /// failure and returned as a value; other errors propagate.
    pub fn train(
        &mut self,
        name: &str,
        model: &Transformer,
        theta0: &ParamStore,
        theta_ref: Option<&ParamStore>,
        data: &TrainData,
        config: &TrainConfig,
        hook: impl FnMut(usize, &ParamStore) -> Result<()>,
    ) -> Result<Trained> {
        let result = self.timed(&format!("train {name}"), |_| Ok(train_with_hook(model, theta0, theta_ref, data, config, hook)))?;
        let (outcome, trace): (Trained, TrainTrace) = match result {
            Ok((theta, trace)) => (Trained::Done(theta), trace),
            Err(f) if f.error.is_divergence() => {
                self.manifest.failures.push(Failure {
                    stage: name.to_string(),
                    kind: FailureKind::Divergence,
                    message: f.error.to_string(),
                });
                (Trained::Diverged, f.trace)
            }
            Err(f) => return Err(f.error),
        };
        let path = self.output(&format!("traces/{name}.csv"));
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        write_atomic(&path, &buf)?;
        Ok(outcome)
    }

    /// Quantizes, optionally persists, evaluates and records one model.
    pub fn record(
        &mut self,
        mut row: ReportRow,
        base: &Base,
        prep: &Prepared,
        theta: Option<&ParamStore>,
        provenance: Option<Provenance>,
    ) -> Result<ReportRow> {
        let Some(theta) = theta else {
            row.status = RowStatus::Diverged;
            self.manifest.rows.push(row.clone());
            return Ok(row);
        };
        let theta = quantize(theta);
        let slug = row.slug();
        if let Some(kind) = provenance {
            let rel = format!("checkpoints/{slug}.ckpt");
            let mut meta = CheckpointMeta::new(base.model.config().clone(), &theta, kind)
                .with("scenario", self.scenario())
                .with("method", &row.method)
                .with("seed", row.seed)
                .with("split", &prep.tag);
            for (k, v) in [("alpha", row.alpha), ("eta", row.eta), ("beta", row.beta)] {
                if let Some(v) = v {
                    meta = meta.with(k, v);
                }
            }
            let path = self.output(&rel);
            save_checkpoint(&theta, &meta, &path)?;
            row.checkpoint = rel;
        }
        let opts = self.cfg.eval_options();
        let report = self.timed(&format!("eval {slug}"), |_| {
            evaluate(&base.model, &theta, &base.theta_ref, &prep.oracle, &prep.split, &opts)
        })?;
        row.metrics = Some(report);
        if provenance.is_some() {
            let path = self.output(&format!("reports/{slug}.json"));
            report::save_row_json(&row, &path)?;
        }
        self.manifest.rows.push(row.clone());
        Ok(row)
    }

    /// A row pointing at the reference or oracle inside a data bundle.
    pub fn record_bundle(&mut self, mut row: ReportRow, base: &Base, prep: &Prepared, oracle: bool) -> Result<ReportRow> {
        let (theta, file) = if oracle { (&prep.oracle, "oracle") } else { (&base.theta_ref, "ref") };
        row.checkpoint = format!("data/{}/{file}.ckpt", prep.tag);
        let opts = self.cfg.eval_options();
        let report = self.timed(&format!("eval {}", row.slug()), |_| {
            evaluate(&base.model, theta, &base.theta_ref, &prep.oracle, &prep.split, &opts)
        })?;
        row.metrics = Some(report);
        self.manifest.rows.push(row.clone());
        Ok(row)
    }

    fn finish(&mut self) -> Result<()> {
        let rows = self.manifest.rows.clone();
        let csv = self.output(&format!("{}.csv", self.scenario()));
        report::save_aggregate_csv(&rows, &csv)?;
        let summary = self.output("summary.txt");
        write_atomic(&summary, report::summary_table(&rows).as_bytes())?;
        if !self.manifest.cosines.is_empty() {
            let path = self.output("cosines.csv");
            write_atomic(&path, &scenarios::cosines_csv(&self.manifest.cosines)?)?;
        }
        if !self.manifest.curves.is_empty() {
            let path = self.output("curves.csv");
            write_atomic(&path, &scenarios::curves_csv(&self.manifest.curves)?)?;
        }
        Ok(())
    }

    fn write_manifest(&mut self) -> Result<()> {
        let path = self.output("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }
}

/// Runs one scenario end to end. On failure the manifest (with whatever
/// completed) is still written before the error is returned.
pub fn run_scenario(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let mut run = Run::new(config)?;
    log::info!("{} -> {}", config.scenario, config.output_dir.display());
    std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))?;
    let outcome = scenarios::dispatch(&mut run).and_then(|_| run.finish());
    if let Err(e) = &outcome {
        run.manifest.failures.push(Failure { stage: "scenario".into(), kind: FailureKind::Error, message: e.to_string() });
    }
    run.write_manifest()?;
    outcome.map(|_| run.manifest)
}

/// Every scenario in order, each in `<output_dir>/<scenario>` with one
/// shared model cache.
pub fn run_suite(config: &ExperimentConfig) -> Result<Vec<RunManifest>> {
    let cache = config.cache_path();
    Scenario::ALL
        .iter()
        .map(|&scenario| {
            let cfg = ExperimentConfig {
                scenario,
                output_dir: config.output_dir.join(scenario.name()),
                cache_dir: cache.clone(),
                ..config.clone()
            };
            run_scenario(&cfg)
        })
        .collect()
}
