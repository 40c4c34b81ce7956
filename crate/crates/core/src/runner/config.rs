//! Flat experiment configuration: one TOML document whose keys are the
//! fields below, each overridable from the command line.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DEFAULT_TARGET;
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, FqStatistic};
use crate::extrapolation::{ALPHA_GRID, ETA_GRID};
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveSpec, Variant};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Finetune,
    UnlearnBaselines,
    MoxAlphaSweep,
    EtaSweep,
    Ablation,
    StabilityWeightSweep,
    ForgetSizeSweep,
    DirectionAnalysis,
    Trajectory,
    Continual,
    Relearn,
    Overlap,
    MotivationFig1,
}

impl Scenario {
    pub const ALL: [Scenario; 13] = [
        Scenario::Finetune,
        Scenario::UnlearnBaselines,
        Scenario::MoxAlphaSweep,
        Scenario::EtaSweep,
        Scenario::Ablation,
        Scenario::StabilityWeightSweep,
        Scenario::ForgetSizeSweep,
        Scenario::DirectionAnalysis,
        Scenario::Trajectory,
        Scenario::Continual,
        Scenario::Relearn,
        Scenario::Overlap,
        Scenario::MotivationFig1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Finetune => "finetune",
            Scenario::UnlearnBaselines => "unlearn_baselines",
            Scenario::MoxAlphaSweep => "mox_alpha_sweep",
            Scenario::EtaSweep => "eta_sweep",
            Scenario::Ablation => "ablation",
            Scenario::StabilityWeightSweep => "stability_weight_sweep",
            Scenario::ForgetSizeSweep => "forget_size_sweep",
            Scenario::DirectionAnalysis => "direction_analysis",
            Scenario::Trajectory => "trajectory",
            Scenario::Continual => "continual",
            Scenario::Relearn => "relearn",
            Scenario::Overlap => "overlap",
            Scenario::MotivationFig1 => "motivation_fig1",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario `{s}`")))
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Every knob of a run. Missing keys take the desk defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Where trained reference and oracle models are cached; empty means
    /// `<output_dir>/cache`.
    pub cache_dir: PathBuf,

    pub n_entities: usize,
    pub attrs_per_entity: usize,
    pub forget_ratio: f64,
    /// Forget ratios for the forget-size sweep and the continual stages.
    pub forget_ratios: Vec<f64>,
    pub target_text: String,

    pub ctx_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,

    /// Reference and oracle fine-tuning.
    pub ft_lr: f64,
    pub ft_epochs: usize,
    pub ft_batch_size: usize,

    /// Unlearning and memorization runs.
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub retain_batch_size: usize,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    /// Gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub eval_every: usize,

    /// Temperature of the preference-optimization losses.
    pub npo_beta: f64,
    pub kl_weight: f64,
    pub alpha: f64,
    pub eta: f64,
    pub alpha_grid: Vec<f64>,
    pub eta_grid: Vec<f64>,
    /// Forget-term weights of the retain-anchored objectives.
    pub weighted_betas: Vec<f64>,
    pub stability_betas: Vec<f64>,

    pub motivation_epochs: usize,
    pub continual_epochs: usize,
    pub relearn_epochs: usize,
    pub relearn_lr: f64,

    pub fq_statistic: FqStatistic,
    pub collapse_cap: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            scenario: Scenario::UnlearnBaselines,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            cache_dir: PathBuf::new(),
            n_entities: 50,
            attrs_per_entity: 4,
            forget_ratio: 0.1,
            forget_ratios: vec![0.01, 0.05, 0.1],
            target_text: DEFAULT_TARGET.to_string(),
            ctx_len: m.ctx_len,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            ft_lr: 1e-3,
            ft_epochs: 100,
            ft_batch_size: 4,
            lr: 3e-4,
            epochs: 10,
            batch_size: 16,
            retain_batch_size: 64,
            weight_decay: 0.01,
            warmup_epochs: 1.0,
            grad_clip: 0.0,
            eval_every: 0,
            npo_beta: 0.1,
            kl_weight: 5.0,
            alpha: 4.0,
            eta: 0.675,
            alpha_grid: ALPHA_GRID.to_vec(),
            eta_grid: ETA_GRID.to_vec(),
            weighted_betas: vec![1.0, 2.0, 4.0],
            stability_betas: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            motivation_epochs: 30,
            continual_epochs: 3,
            relearn_epochs: 5,
            relearn_lr: 3e-4,
            fq_statistic: FqStatistic::TruthRatio,
            collapse_cap: 500,
        }
    }
}

impl ExperimentConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        Self { scenario, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Applies `key = value` overrides. Values are parsed as TOML literals,
    /// falling back to a bare string; unknown keys are rejected.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        for (key, raw) in overrides {
            let key = key.replace('-', "_");
            if !table.contains_key(&key) {
                return Err(Error::config(format!("unknown key `{key}`")));
            }
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key, value);
        }
        let text = toml::to_string(&table).map_err(|e| Error::Serde(e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Checks every field a scenario may touch before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.n_entities < 10 || self.attrs_per_entity < 2 {
            return bad("need at least 10 entities and 2 attributes per entity".into());
        }
        let ratio_ok = |r: f64| r > 0.0 && r < 1.0;
        if !ratio_ok(self.forget_ratio) {
            return bad(format!("forget_ratio must lie in (0, 1), got {}", self.forget_ratio));
        }
        if self.forget_ratios.is_empty() || !self.forget_ratios.iter().all(|&r| ratio_ok(r)) {
            return bad("forget_ratios must be non-empty with values in (0, 1)".into());
        }
        if self.scenario == Scenario::Continual && self.forget_ratios.iter().sum::<f64>() >= 1.0 {
            return bad("continual stages must leave a retain set".into());
        }
        if self.target_text.trim().is_empty() {
            return bad("target_text must not be empty".into());
        }
        self.model_config(0).validate()?;
        for (name, v) in [("ft_lr", self.ft_lr), ("lr", self.lr), ("relearn_lr", self.relearn_lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("ft_epochs", self.ft_epochs), ("epochs", self.epochs), ("motivation_epochs", self.motivation_epochs)]
        {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.continual_epochs == 0 || self.relearn_epochs == 0 {
            return bad("continual_epochs and relearn_epochs must be at least 1".into());
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return bad("grad_clip and weight_decay must be non-negative".into());
        }
        if self.alpha_grid.is_empty() || self.eta_grid.is_empty() {
            return bad("alpha_grid and eta_grid must not be empty".into());
        }
        if self.weighted_betas.is_empty() || self.stability_betas.is_empty() {
            return bad("weighted_betas and stability_betas must not be empty".into());
        }
        if self.alpha_grid.iter().chain(&[self.alpha]).any(|&a| !(a > 0.0) || !a.is_finite()) {
            return bad("alpha values must be positive".into());
        }
        if self.eta_grid.iter().chain(&[self.eta]).any(|&e| !(e > 0.0 && e <= 1.0)) {
            return bad("eta values must lie in (0, 1]".into());
        }
        if self.collapse_cap == 0 {
            return bad("collapse_cap must be positive".into());
        }
        for b in self.weighted_betas.iter().chain(&self.stability_betas) {
            ObjectiveSpec::new(Variant::WeightedGa).with_beta(*b).validate()?;
        }
        ObjectiveSpec::new(Variant::Npo).with_beta(self.npo_beta).validate()?;
        ObjectiveSpec::new(Variant::MoxMemCe).with_kl_weight(self.kl_weight).validate()?;
        self.finetune_config(0).validate()?;
        self.unlearn_config(ObjectiveSpec::new(Variant::Ga), 0).validate()
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            ctx_len: self.ctx_len,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            seed,
            ..ModelConfig::default()
        }
    }

    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.ft_epochs,
            batch_size: self.ft_batch_size,
            lr_peak: self.ft_lr,
            seed,
            ..self.unlearn_config(ObjectiveSpec::new(Variant::Ce), seed)
        }
    }

    pub fn unlearn_config(&self, objective: ObjectiveSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_peak: self.lr,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            seed,
            objective,
            eval_every: self.eval_every,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            retain_batch_size: self.retain_batch_size,
            ..TrainConfig::new(objective)
        }
    }

    /// Objective with this config's β and KL weight for the variant family.
    pub fn objective(&self, variant: Variant) -> ObjectiveSpec {
        let spec = ObjectiveSpec::new(variant).with_kl_weight(self.kl_weight);
        match variant {
            Variant::Npo | Variant::MoxMemPo | Variant::MoxTargetedPo => spec.with_beta(self.npo_beta),
            _ => spec,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { fq_statistic: self.fq_statistic, collapse_cap: self.collapse_cap, ..EvalOptions::default() }
    }

    pub fn cache_path(&self) -> PathBuf {
        if self.cache_dir.as_os_str().is_empty() {
            self.output_dir.join("cache")
        } else {
            self.cache_dir.clone()
        }
    }

    /// SHA-256 over the canonical TOML of every field that affects results
    /// (output and cache locations excluded).
    pub fn hash(&self) -> Result<String> {
        let canonical = Self { output_dir: PathBuf::new(), cache_dir: PathBuf::new(), ..self.clone() };
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn overrides_parse_literals_and_reject_unknown_keys() {
        let c = ExperimentConfig::default();
        let o = c
            .with_overrides([("alpha", "2"), ("seeds", "[1, 2]"), ("scenario", "eta_sweep"), ("fq-statistic", "nll")])
            .unwrap();
        assert_eq!(o.alpha, 2.0);
        assert_eq!(o.seeds, vec![1, 2]);
        assert_eq!(o.scenario, Scenario::EtaSweep);
        assert_eq!(o.fq_statistic, FqStatistic::Nll);
        assert!(matches!(c.with_overrides([("no_such_key", "1")]), Err(Error::Config(_))));
        assert!(matches!(c.with_overrides([("epochs", "\"ten\"")]), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let bad = [("forget_ratio", "1.5"), ("eta", "0"), ("seeds", "[]"), ("d_model", "63"), ("lr", "-1")];
        for (k, v) in bad {
            let c = ExperimentConfig::default().with_overrides([(k, v)]).unwrap();
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{k}={v} should be rejected");
        }
    }

    #[test]
    fn hash_ignores_locations_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: "elsewhere".into(), cache_dir: "c".into(), ..a.clone() };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = ExperimentConfig { alpha: 2.0, ..a.clone() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("nope".parse::<Scenario>().is_err());
    }
}
