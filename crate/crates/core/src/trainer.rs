//! AdamW training loop with warmup plus linear decay, reference-model
//! plumbing and per-step diagnostics.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::QAPair;
use crate::error::{Error, Result};
use crate::eval::{collapse_metric, CollapseContexts, DEFAULT_CONTEXT_CAP};
use crate::model::Transformer;
use crate::objectives::{loss_and_grad, Batch, ObjectiveSpec, TermData, Variant};
use crate::tensor::{cosine, distance, norm, GradStore, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup to the peak, then linear decay toward zero.
    #[default]
    WarmupLinear,
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    AdamW,
    /// Plain gradient descent with decoupled decay.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Zero means the whole driving set in one batch.
    pub batch_size: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub seed: u64,
    pub objective: ObjectiveSpec,
    /// Collapse sampling cadence in steps; zero disables it.
    pub eval_every: usize,
    pub grad_clip: Option<f64>,
    /// Retain pairs drawn per step by forget-driven objectives; zero
    /// matches the forget batch.
    pub retain_batch_size: usize,
    pub schedule: Schedule,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveSpec) -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr_peak: 3e-4,
            weight_decay: 0.01,
            warmup_epochs: 1.0,
            seed: 0,
            objective,
            eval_every: 0,
            grad_clip: None,
            retain_batch_size: 0,
            schedule: Schedule::WarmupLinear,
            optimizer: Optimizer::AdamW,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.lr_peak > 0.0) || !self.lr_peak.is_finite() {
            return Err(Error::config(format!("lr_peak must be positive, got {}", self.lr_peak)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        let warm_ok = self.warmup_epochs >= 0.0 && (self.warmup_epochs < self.epochs as f64 || (self.epochs == 0 && self.warmup_epochs == 0.0));
        if !warm_ok {
            return Err(Error::config(format!(
                "warmup_epochs must lie in [0, epochs), got {} with {} epochs",
                self.warmup_epochs, self.epochs
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Warmup from 0 to the peak over `warmup` steps, then linear decay that
/// would reach 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, lr_peak: f64) -> f64 {
    if step < warmup {
        lr_peak * step as f64 / warmup as f64
    } else if total > warmup {
        lr_peak * (total - step) as f64 / (total - warmup) as f64
    } else {
        lr_peak
    }
}

/// Learning rate actually applied at optimizer step `t` (0-based): during
/// warmup the post-increment value so the first step is not wasted.
pub fn applied_lr(t: usize, total: usize, warmup: usize, config: &TrainConfig) -> f64 {
    match config.schedule {
        Schedule::Constant => config.lr_peak,
        Schedule::WarmupLinear if t < warmup => lr_at(t + 1, total, warmup, config.lr_peak),
        Schedule::WarmupLinear => lr_at(t, total, warmup, config.lr_peak),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: GradStore,
    pub v: GradStore,
    pub t: u64,
}

impl OptimState {
    pub fn new(theta: &ParamStore) -> Self {
        Self { m: theta.zeros_like(), v: theta.zeros_like(), t: 0 }
    }
}

/// One decoupled-weight-decay Adam update in place.
pub fn adamw_step(theta: &mut ParamStore, grads: &GradStore, state: &mut OptimState, lr: f64, weight_decay: f64) -> Result<()> {
    theta.check_congruent(grads)?;
    theta.check_congruent(&state.m)?;
    if !grads.is_finite() {
        return Err(Error::Divergence { step: state.t as usize, reason: "non-finite gradient".into() });
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    let shrink = 1.0 - lr * weight_decay;
    for i in 0..theta.len() {
        let g = grads.tensor(i).data();
        let m = state.m.tensor_mut(i).data_mut();
        for (mk, &gk) in m.iter_mut().zip(g) {
            *mk = BETA1 * *mk + (1.0 - BETA1) * gk;
        }
        let v = state.v.tensor_mut(i).data_mut();
        for (vk, &gk) in v.iter_mut().zip(g) {
            *vk = BETA2 * *vk + (1.0 - BETA2) * gk * gk;
        }
        let (m, v) = (state.m.tensor(i).data(), state.v.tensor(i).data());
        for ((x, &mk), &vk) in theta.tensor_mut(i).data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mk / bc1;
            let vhat = vk / bc2;
            *x = *x * shrink - lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn sgd_step(theta: &mut ParamStore, grads: &GradStore, state: &mut OptimState, lr: f64, weight_decay: f64) -> Result<()> {
    theta.check_congruent(grads)?;
    if !grads.is_finite() {
        return Err(Error::Divergence { step: state.t as usize, reason: "non-finite gradient".into() });
    }
    state.t += 1;
    let shrink = 1.0 - lr * weight_decay;
    for i in 0..theta.len() {
        let g = grads.tensor(i).data().to_vec();
        for (x, gk) in theta.tensor_mut(i).data_mut().iter_mut().zip(g) {
            *x = *x * shrink - lr * gk;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub divergence_from_ref: f64,
    pub cosine_to_ref: f64,
    pub collapse_retain: Option<f64>,
    pub collapse_forget: Option<f64>,
}

/// State at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub divergence_from_ref: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub epochs: Vec<EpochRecord>,
    pub final_collapse_retain: Option<f64>,
    pub final_collapse_forget: Option<f64>,
}

impl TrainTrace {
    pub const COLUMNS: [&'static str; 9] = [
        "step",
        "epoch",
        "lr",
        "loss",
        "grad_norm",
        "divergence_from_ref",
        "cosine_to_ref",
        "collapse_retain",
        "collapse_forget",
    ];

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Serde(e.to_string());
        out.write_record(Self::COLUMNS).map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.step.to_string(),
                r.epoch.to_string(),
                format!("{}", r.lr),
                format!("{}", r.loss),
                format!("{}", r.grad_norm),
                format!("{}", r.divergence_from_ref),
                format!("{}", r.cosine_to_ref),
                opt(r.collapse_retain),
                opt(r.collapse_forget),
            ])
            .map_err(err)?;
        }
        out.flush().map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Pairs a training run reads. `targeted[i]` is `forget[i]` with the target
/// answer.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainData<'a> {
    pub retain: &'a [QAPair],
    pub forget: &'a [QAPair],
    pub targeted: &'a [QAPair],
}

impl<'a> TrainData<'a> {
    pub fn new(retain: &'a [QAPair], forget: &'a [QAPair]) -> Self {
        Self { retain, forget, targeted: &[] }
    }

    pub fn with_targets(mut self, targeted: &'a [QAPair]) -> Self {
        self.targeted = targeted;
        self
    }
}

/// A run that stopped early; the trace up to the failure is kept.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub trace: TrainTrace,
    pub theta: ParamStore,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} recorded steps)", self.error, self.trace.rows.len())
    }
}

impl std::error::Error for TrainFailure {}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

pub type TrainResult = std::result::Result<(ParamStore, TrainTrace), TrainFailure>;

/// Step plan for one epoch: indices into the driving set, and for
/// forget-driven objectives the paired retain indices.
struct Plan {
    forget_driven: bool,
    uses_retain: bool,
    uses_targets: bool,
}

impl Plan {
    fn new(spec: &ObjectiveSpec) -> Self {
        let forget_driven = spec.variant != Variant::Ce;
        Self {
            forget_driven,
            uses_retain: forget_driven && spec.uses(TermData::Retain),
            uses_targets: spec.uses(TermData::Target),
        }
    }

    fn driving_len(&self, data: &TrainData) -> usize {
        if self.forget_driven {
            data.forget.len()
        } else {
            data.retain.len() + data.forget.len()
        }
    }
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    if n == 0 {
        0
    } else if batch_size == 0 {
        1
    } else {
        n.div_ceil(batch_size)
    }
}

/// Trains `theta0`, calling `hook(epoch, θ)` after every epoch.
pub fn train_with_hook(
    model: &Transformer,
    theta0: &ParamStore,
    theta_ref: Option<&ParamStore>,
    data: &TrainData,
    config: &TrainConfig,
    mut hook: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> TrainResult {
    let fail = |error: Error, trace: TrainTrace, theta: ParamStore| TrainFailure { error, trace, theta };
    let mut trace = TrainTrace::default();
    if let Err(e) = config.validate().and_then(|_| model.check_params(theta0)) {
        return Err(fail(e, trace, theta0.clone()));
    }
    let plan = Plan::new(&config.objective);
    if config.objective.needs_reference() && theta_ref.is_none() {
        let e = Error::arg(format!("{} requires a reference model", config.objective.variant.name()));
        return Err(fail(e, trace, theta0.clone()));
    }
    if plan.uses_targets && data.targeted.len() != data.forget.len() {
        let e = Error::arg("targeted pairs must align one-to-one with forget pairs");
        return Err(fail(e, trace, theta0.clone()));
    }
    if plan.uses_retain && data.retain.is_empty() {
        let e = Error::arg(format!("{} needs retain pairs", config.objective.variant.name()));
        return Err(fail(e, trace, theta0.clone()));
    }
    let n = plan.driving_len(data);
    let spe = steps_per_epoch(n, config.batch_size);
    let total = spe * config.epochs;
    let warmup = (config.warmup_epochs * spe as f64).round() as usize;
    let batch = if config.batch_size == 0 { n.max(1) } else { config.batch_size };
    let anchor = theta_ref.unwrap_or(theta0);

    let contexts = (config.eval_every > 0).then(|| {
        let retain: Vec<QAPair> = if plan.forget_driven {
            data.retain.to_vec()
        } else {
            data.retain.iter().chain(data.forget).cloned().collect()
        };
        (
            CollapseContexts::from_pairs(&retain, DEFAULT_CONTEXT_CAP, config.seed),
            CollapseContexts::from_pairs(data.forget, DEFAULT_CONTEXT_CAP, config.seed),
        )
    });
    let collapse = |theta: &ParamStore| -> Result<(Option<f64>, Option<f64>)> {
        match &contexts {
            None => Ok((None, None)),
            Some((r, f)) => Ok((
                if r.is_empty() { None } else { Some(collapse_metric(model, theta, r)?) },
                if f.is_empty() { None } else { Some(collapse_metric(model, theta, f)?) },
            )),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = theta0.clone();
    let mut state = OptimState::new(&theta);
    let mut retain_order: Vec<usize> = (0..data.retain.len()).collect();
    let mut retain_cursor = retain_order.len();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut b = Batch::default();
            if plan.forget_driven {
                b.forget = chunk.iter().map(|&i| &data.forget[i]).collect();
                if plan.uses_targets {
                    b.targeted = chunk.iter().map(|&i| &data.targeted[i]).collect();
                }
                if plan.uses_retain {
                    let want = if config.retain_batch_size == 0 { chunk.len() } else { config.retain_batch_size };
                    for _ in 0..want.min(data.retain.len()) {
                        if retain_cursor == retain_order.len() {
                            retain_order.shuffle(&mut rng);
                            retain_cursor = 0;
                        }
                        b.retain.push(&data.retain[retain_order[retain_cursor]]);
                        retain_cursor += 1;
                    }
                }
            } else {
                for &i in chunk {
                    if i < data.retain.len() {
                        b.retain.push(&data.retain[i]);
                    } else {
                        b.forget.push(&data.forget[i - data.retain.len()]);
                    }
                }
            }
            let lr = applied_lr(step, total, warmup, config);
            let (loss, mut grad) = match loss_and_grad(model, &theta, theta_ref, &config.objective, &b) {
                Ok(v) => v,
                Err(e) => return Err(fail(e, trace, theta)),
            };
            let grad_norm = norm(&grad);
            let (collapse_retain, collapse_forget) = if config.eval_every > 0 && step % config.eval_every == 0 {
                match collapse(&theta) {
                    Ok(c) => c,
                    Err(e) => return Err(fail(e, trace, theta)),
                }
            } else {
                (None, None)
            };
            let divergence_from_ref = distance(&theta, anchor).unwrap_or(f64::NAN);
            let cosine_to_ref = cosine(&theta, anchor).unwrap_or(f64::NAN);
            trace.rows.push(TraceRow {
                step,
                epoch,
                lr,
                loss,
                grad_norm,
                divergence_from_ref,
                cosine_to_ref,
                collapse_retain,
                collapse_forget,
            });
            if !loss.is_finite() || !grad_norm.is_finite() {
                let e = Error::Divergence { step, reason: format!("loss {loss}, gradient norm {grad_norm}") };
                return Err(fail(e, trace, theta));
            }
            if let Some(c) = config.grad_clip {
                if grad_norm > c {
                    grad = grad.map(|g| g * c / grad_norm);
                }
            }
            let before = theta.clone();
            let res = match config.optimizer {
                Optimizer::AdamW => adamw_step(&mut theta, &grad, &mut state, lr, config.weight_decay),
                Optimizer::Sgd => sgd_step(&mut theta, &grad, &mut state, lr, config.weight_decay),
            };
            if let Err(e) = res {
                return Err(fail(e, trace, before));
            }
            if !theta.is_finite() {
                let e = Error::Divergence { step, reason: "non-finite parameters".into() };
                return Err(fail(e, trace, before));
            }
            epoch_loss += loss;
            step += 1;
        }
        trace.epochs.push(EpochRecord {
            epoch,
            divergence_from_ref: distance(&theta, anchor).unwrap_or(f64::NAN),
            mean_loss: if spe > 0 { epoch_loss / spe as f64 } else { 0.0 },
        });
        if let Err(e) = hook(epoch, &theta) {
            return Err(fail(e, trace, theta));
        }
    }
    if total > 0 {
        match collapse(&theta) {
            Ok((r, f)) => {
                trace.final_collapse_retain = r;
                trace.final_collapse_forget = f;
            }
            Err(e) => return Err(fail(e, trace, theta)),
        }
    }
    Ok((theta, trace))
}

pub fn train(
    model: &Transformer,
    theta0: &ParamStore,
    theta_ref: Option<&ParamStore>,
    data: &TrainData,
    config: &TrainConfig,
) -> TrainResult {
    train_with_hook(model, theta0, theta_ref, data, config, |_, _| Ok(()))
}

fn ce_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig { objective: ObjectiveSpec::new(Variant::Ce), ..config.clone() }
}

/// CE training from the model's initial parameters on retain ∪ forget.
pub fn finetune_reference(model: &Transformer, config: &TrainConfig, retain: &[QAPair], forget: &[QAPair]) -> TrainResult {
    train(model, &model.init_params(), None, &TrainData::new(retain, forget), &ce_config(config))
}

/// CE training from the same initial parameters on the retain set only.
pub fn retrain_oracle(model: &Transformer, config: &TrainConfig, retain: &[QAPair]) -> TrainResult {
    train(model, &model.init_params(), None, &TrainData::new(retain, &[]), &ce_config(config))
}

/// Outcome of the monotone-descent verification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub lr: f64,
    pub halvings: usize,
    pub losses: Vec<f64>,
    pub max_increase: f64,
    pub collapse_start: f64,
    pub collapse_end: f64,
    pub monotone: bool,
}

/// Full-batch CE gradient descent at constant lr, halving the lr until the
/// full-set loss is non-increasing up to `tol` per step.
pub fn monotone_descent_check(
    model: &Transformer,
    theta0: &ParamStore,
    pairs: &[QAPair],
    steps: usize,
    lr_start: f64,
    max_halvings: usize,
    tol: f64,
) -> Result<DescentReport> {
    let contexts = CollapseContexts::from_pairs(pairs, DEFAULT_CONTEXT_CAP, 0);
    let collapse_start = collapse_metric(model, theta0, &contexts)?;
    let mut lr = lr_start;
    for halvings in 0..=max_halvings {
        let cfg = TrainConfig {
            epochs: steps,
            batch_size: 0,
            lr_peak: lr,
            weight_decay: 0.0,
            warmup_epochs: 0.0,
            schedule: Schedule::Constant,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::new(ObjectiveSpec::new(Variant::Ce))
        };
        let run = train(model, theta0, None, &TrainData::new(pairs, &[]), &cfg);
        if let Ok((theta, trace)) = run {
            let losses = trace.losses();
            let max_increase = losses.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
            if max_increase <= tol || halvings == max_halvings {
                return Ok(DescentReport {
                    lr,
                    halvings,
                    monotone: max_increase <= tol,
                    max_increase,
                    collapse_start,
                    collapse_end: collapse_metric(model, &theta, &contexts)?,
                    losses,
                });
            }
        }
        lr /= 2.0;
    }
    Err(Error::arg("descent check exhausted its halvings"))
}
