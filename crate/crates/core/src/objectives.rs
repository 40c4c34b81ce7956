//! Unlearning and memorization objectives.
//!
//! Every objective is a weighted sum of [`Term`]s drawn from three kinds:
//! mean answer NLL on a set of pairs, the retain-set KL to a reference
//! model, and the preference (NPO-style) log-sigmoid term on likelihood
//! ratios. The term table is what gets differentiated, so inspecting it is
//! inspecting the implementation: MOX-family objectives contain no term
//! whose minimization raises the NLL of a training pair.
//!
//! CE is negative log-likelihood throughout. Likelihood ratios in the
//! preference terms use length-normalized log-probabilities.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::QAPair;
use crate::error::{Error, Result};
use crate::model::{TokenSeq, Transformer};
use crate::tensor::{GradStore, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Ce,
    Ga,
    Gad,
    KlBaseline,
    Npo,
    MoxMemCe,
    MoxMemPo,
    MoxTargetedCe,
    MoxTargetedPo,
    WeightedGd,
    WeightedGa,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Ce,
        Variant::Ga,
        Variant::Gad,
        Variant::KlBaseline,
        Variant::Npo,
        Variant::MoxMemCe,
        Variant::MoxMemPo,
        Variant::MoxTargetedCe,
        Variant::MoxTargetedPo,
        Variant::WeightedGd,
        Variant::WeightedGa,
    ];

    pub fn is_mox(self) -> bool {
        matches!(self, Variant::MoxMemCe | Variant::MoxMemPo | Variant::MoxTargetedCe | Variant::MoxTargetedPo)
    }

    pub fn is_targeted(self) -> bool {
        matches!(self, Variant::MoxTargetedCe | Variant::MoxTargetedPo)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ce => "CE",
            Variant::Ga => "GA",
            Variant::Gad => "GAD",
            Variant::KlBaseline => "KL_BASELINE",
            Variant::Npo => "NPO",
            Variant::MoxMemCe => "MOX_MEM_CE",
            Variant::MoxMemPo => "MOX_MEM_PO",
            Variant::MoxTargetedCe => "MOX_TARGETED_CE",
            Variant::MoxTargetedPo => "MOX_TARGETED_PO",
            Variant::WeightedGd => "WEIGHTED_GD",
            Variant::WeightedGa => "WEIGHTED_GA",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown objective `{s}`")))
    }
}

/// Which pairs of a [`Batch`] a term reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermData {
    /// Retain and forget pairs together.
    All,
    Retain,
    Forget,
    /// Forget prompts paired with the target answer.
    Target,
}

impl TermData {
    /// Whether the pairs are (or may be) training data of the reference.
    pub fn is_training_data(self) -> bool {
        !matches!(self, TermData::Target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermKind {
    /// Mean over pairs of per-pair mean answer NLL.
    MeanNll,
    /// Mean over retain answer positions of `KL(h_ref ‖ h_θ)`.
    RetainKl,
    /// `−(2/nβ) Σ log σ(−β·(log h_θ − log h_ref))`, the NPO loss.
    Npo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub data: TermData,
    pub kind: TermKind,
    pub coef: f64,
}

impl Term {
    /// Minimizing this term pushes some pair's NLL up.
    pub fn raises_nll(&self) -> bool {
        match self.kind {
            TermKind::MeanNll => self.coef < 0.0,
            TermKind::Npo => self.coef > 0.0,
            TermKind::RetainKl => false,
        }
    }

    pub fn raises_training_nll(&self) -> bool {
        self.raises_nll() && self.data.is_training_data()
    }

    fn needs_reference(&self) -> bool {
        self.coef != 0.0 && matches!(self.kind, TermKind::RetainKl | TermKind::Npo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    /// NPO/PO temperature, or the forget weight of the weighted variants.
    pub beta: f64,
    pub kl_weight: f64,
}

impl ObjectiveSpec {
    pub fn new(variant: Variant) -> Self {
        let beta = match variant {
            Variant::WeightedGd | Variant::WeightedGa => 1.0,
            _ => 0.1,
        };
        Self { variant, beta, kl_weight: 1.0 }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_kl_weight(mut self, w: f64) -> Self {
        self.kl_weight = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) && self.variant != Variant::WeightedGd && self.variant != Variant::WeightedGa {
            return Err(Error::config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return Err(Error::config(format!("kl_weight must be non-negative, got {}", self.kl_weight)));
        }
        Ok(())
    }

    /// The weighted terms this objective sums.
    pub fn terms(&self) -> Vec<Term> {
        use TermData::*;
        use TermKind::*;
        let t = |data, kind, coef| Term { data, kind, coef };
        let kl = t(Retain, RetainKl, self.kl_weight);
        let mut terms = match self.variant {
            Variant::Ce => vec![t(All, MeanNll, 1.0)],
            Variant::Ga => vec![t(Forget, MeanNll, -1.0)],
            Variant::Gad => vec![t(Retain, MeanNll, 1.0), t(Forget, MeanNll, -1.0)],
            Variant::KlBaseline => vec![t(Forget, MeanNll, -1.0), kl],
            Variant::Npo => vec![t(Forget, Npo, 1.0)],
            Variant::MoxMemCe => vec![t(Forget, MeanNll, 1.0), kl],
            Variant::MoxMemPo => vec![t(Forget, Npo, -1.0), kl],
            Variant::MoxTargetedCe => vec![t(Forget, MeanNll, 1.0), kl, t(Target, MeanNll, -1.0)],
            Variant::MoxTargetedPo => vec![t(Forget, Npo, -1.0), kl, t(Target, Npo, 1.0)],
            Variant::WeightedGd => vec![t(Retain, MeanNll, 1.0), t(Forget, MeanNll, self.beta)],
            Variant::WeightedGa => vec![t(Retain, MeanNll, 1.0), t(Forget, MeanNll, -self.beta)],
        };
        terms.retain(|t| t.coef != 0.0);
        terms
    }

    pub fn needs_reference(&self) -> bool {
        self.terms().iter().any(Term::needs_reference)
    }

    pub fn uses(&self, data: TermData) -> bool {
        self.terms().iter().any(|t| t.data == data || (t.data == TermData::All && data != TermData::Target))
    }
}

/// Pairs for one optimization step.
#[derive(Clone, Debug, Default)]
pub struct Batch<'a> {
    pub retain: Vec<&'a QAPair>,
    pub forget: Vec<&'a QAPair>,
    /// Forget prompts carrying the target answer.
    pub targeted: Vec<&'a QAPair>,
}

impl<'a> Batch<'a> {
    pub fn new(retain: &'a [QAPair], forget: &'a [QAPair]) -> Self {
        Self { retain: retain.iter().collect(), forget: forget.iter().collect(), targeted: Vec::new() }
    }

    pub fn with_targets(mut self, targeted: &'a [QAPair]) -> Self {
        self.targeted = targeted.iter().collect();
        self
    }

    fn pairs(&self, data: TermData) -> Vec<&'a QAPair> {
        match data {
            TermData::All => self.retain.iter().chain(&self.forget).copied().collect(),
            TermData::Retain => self.retain.clone(),
            TermData::Forget => self.forget.clone(),
            TermData::Target => self.targeted.clone(),
        }
    }
}

/// Scalar node holding the mean over `seqs` of per-sequence mean answer NLL.
pub fn mean_nll_node(g: &mut Graph, model: &Transformer, seqs: &[TokenSeq]) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::arg("mean NLL over an empty set"));
    }
    let mut per = Vec::with_capacity(seqs.len());
    for s in seqs {
        let lp = model.answer_log_probs(g, s)?;
        per.push(g.mean(lp));
    }
    let total = g.add_all(&per)?;
    Ok(g.scale(total, -1.0 / seqs.len() as f64))
}

/// Mean over all answer positions of `KL(h_ref ‖ h_θ)`.
pub fn retain_kl_node(g: &mut Graph, model: &Transformer, theta_ref: &ParamStore, seqs: &[TokenSeq]) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::arg("KL over an empty retain set"));
    }
    let mut per = Vec::with_capacity(seqs.len());
    let mut positions = 0usize;
    for s in seqs {
        let rows: Vec<usize> = s.answer_positions().iter().map(|&p| p - 1).collect();
        if rows.is_empty() {
            return Err(Error::arg("retain sequence without answer tokens"));
        }
        positions += rows.len();
        let (ref_logp, ref_p) = {
            let mut rg = Graph::inference(theta_ref);
            let l = model.logits(&mut rg, s.unpadded())?;
            let sel = rg.select_rows(l, &rows)?;
            let lp = rg.log_softmax(sel);
            let lpv = rg.value(lp).clone();
            let pv = Tensor::new(lpv.shape().to_vec(), lpv.data().iter().map(|x| x.exp()).collect())?;
            (lpv, pv)
        };
        let l = model.logits(g, s.unpadded())?;
        let sel = g.select_rows(l, &rows)?;
        let lp = g.log_softmax(sel);
        let rl = g.constant(ref_logp);
        let rp = g.constant(ref_p);
        let diff = g.sub(rl, lp)?;
        let w = g.mul(rp, diff)?;
        per.push(g.sum(w));
    }
    let total = g.add_all(&per)?;
    Ok(g.scale(total, 1.0 / positions as f64))
}

/// Length-normalized answer log-probability.
fn normalized_log_prob(g: &mut Graph, model: &Transformer, seq: &TokenSeq) -> Result<Var> {
    let lp = model.answer_log_probs(g, seq)?;
    Ok(g.mean(lp))
}

/// NPO loss `−(2/nβ) Σ log σ(−β·(ℓ_θ − ℓ_ref))` with length-normalized `ℓ`.
pub fn npo_node(g: &mut Graph, model: &Transformer, theta_ref: &ParamStore, seqs: &[TokenSeq], beta: f64) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::arg("preference term over an empty set"));
    }
    if !(beta > 0.0) {
        return Err(Error::config(format!("beta must be positive, got {beta}")));
    }
    let mut per = Vec::with_capacity(seqs.len());
    for s in seqs {
        let ref_lp = {
            let lp = model.token_log_probs(theta_ref, s)?;
            lp.iter().sum::<f64>() / lp.len() as f64
        };
        let lp = normalized_log_prob(g, model, s)?;
        let r = g.add_scalar(lp, -ref_lp);
        let z = g.scale(r, -beta);
        per.push(g.log_sigmoid(z));
    }
    let total = g.add_all(&per)?;
    Ok(g.scale(total, -2.0 / (seqs.len() as f64 * beta)))
}

/// Records `Σ coef·term` for `spec` on `g`.
pub fn build_loss(
    g: &mut Graph,
    model: &Transformer,
    theta_ref: Option<&ParamStore>,
    spec: &ObjectiveSpec,
    batch: &Batch,
) -> Result<Var> {
    spec.validate()?;
    let terms = spec.terms();
    let mut parts = Vec::with_capacity(terms.len());
    for term in &terms {
        let pairs = batch.pairs(term.data);
        if pairs.is_empty() {
            return Err(Error::arg(format!(
                "{} needs {:?} pairs but the batch has none",
                spec.variant.name(),
                term.data
            )));
        }
        let seqs: Vec<TokenSeq> = pairs.iter().map(|p| p.sequence()).collect();
        let reference = || {
            theta_ref.ok_or_else(|| Error::arg(format!("{} requires a reference model", spec.variant.name())))
        };
        let node = match term.kind {
            TermKind::MeanNll => mean_nll_node(g, model, &seqs)?,
            TermKind::RetainKl => retain_kl_node(g, model, reference()?, &seqs)?,
            TermKind::Npo => npo_node(g, model, reference()?, &seqs, spec.beta)?,
        };
        parts.push(if term.coef == 1.0 { node } else { g.scale(node, term.coef) });
    }
    g.add_all(&parts)
}

pub fn loss_value(
    model: &Transformer,
    theta: &ParamStore,
    theta_ref: Option<&ParamStore>,
    spec: &ObjectiveSpec,
    batch: &Batch,
) -> Result<f64> {
    model.check_params(theta)?;
    let mut g = Graph::inference(theta);
    let l = build_loss(&mut g, model, theta_ref, spec, batch)?;
    Ok(g.scalar(l))
}

pub fn loss_and_grad(
    model: &Transformer,
    theta: &ParamStore,
    theta_ref: Option<&ParamStore>,
    spec: &ObjectiveSpec,
    batch: &Batch,
) -> Result<(f64, GradStore)> {
    model.check_params(theta)?;
    if let Some(r) = theta_ref {
        theta.check_congruent(r)?;
    }
    let mut g = Graph::new(theta);
    let l = build_loss(&mut g, model, theta_ref, spec, batch)?;
    let grad = g.backward(l)?;
    Ok((g.scalar(l), grad))
}

fn single(model: &Transformer, theta: &ParamStore, theta_ref: Option<&ParamStore>, data: TermData, kind: TermKind, beta: f64, batch: &Batch) -> Result<f64> {
    let pairs = batch.pairs(data);
    if pairs.is_empty() {
        return Err(Error::arg(format!("no {data:?} pairs in batch")));
    }
    let seqs: Vec<TokenSeq> = pairs.iter().map(|p| p.sequence()).collect();
    let mut g = Graph::inference(theta);
    let v = match kind {
        TermKind::MeanNll => mean_nll_node(&mut g, model, &seqs)?,
        TermKind::RetainKl => {
            let r = theta_ref.ok_or_else(|| Error::arg("KL needs a reference model"))?;
            theta.check_congruent(r)?;
            retain_kl_node(&mut g, model, r, &seqs)?
        }
        TermKind::Npo => {
            let r = theta_ref.ok_or_else(|| Error::arg("NPO needs a reference model"))?;
            theta.check_congruent(r)?;
            npo_node(&mut g, model, r, &seqs, beta)?
        }
    };
    Ok(g.scalar(v))
}

/// Mean per-pair answer NLL over every retain and forget pair supplied.
pub fn loss_ce(model: &Transformer, theta: &ParamStore, batch: &Batch) -> Result<f64> {
    single(model, theta, None, TermData::All, TermKind::MeanNll, 1.0, batch)
}

/// Gradient-ascent loss: `−CE(forget)`.
pub fn loss_ga(model: &Transformer, theta: &ParamStore, batch: &Batch) -> Result<f64> {
    loss_value(model, theta, None, &ObjectiveSpec::new(Variant::Ga), batch)
}

/// `CE(retain) − CE(forget)`.
pub fn loss_gad(model: &Transformer, theta: &ParamStore, batch: &Batch) -> Result<f64> {
    loss_value(model, theta, None, &ObjectiveSpec::new(Variant::Gad), batch)
}

pub fn loss_kl_retain(model: &Transformer, theta: &ParamStore, theta_ref: &ParamStore, batch: &Batch) -> Result<f64> {
    single(model, theta, Some(theta_ref), TermData::Retain, TermKind::RetainKl, 1.0, batch)
}

pub fn loss_npo(model: &Transformer, theta: &ParamStore, theta_ref: &ParamStore, batch: &Batch, beta: f64) -> Result<f64> {
    single(model, theta, Some(theta_ref), TermData::Forget, TermKind::Npo, beta, batch)
}

pub fn loss_mox_mem_ce(model: &Transformer, theta: &ParamStore, theta_ref: &ParamStore, batch: &Batch, kl_weight: f64) -> Result<f64> {
    let spec = ObjectiveSpec::new(Variant::MoxMemCe).with_kl_weight(kl_weight);
    loss_value(model, theta, Some(theta_ref), &spec, batch)
}

pub fn loss_mox_mem_po(model: &Transformer, theta: &ParamStore, theta_ref: &ParamStore, batch: &Batch, beta: f64, kl_weight: f64) -> Result<f64> {
    let spec = ObjectiveSpec::new(Variant::MoxMemPo).with_beta(beta).with_kl_weight(kl_weight);
    loss_value(model, theta, Some(theta_ref), &spec, batch)
}

/// Mean CE of the target answers on the forget prompts.
pub fn loss_target_term(model: &Transformer, theta: &ParamStore, batch: &Batch) -> Result<f64> {
    if batch.targeted.is_empty() {
        return Err(Error::arg("targeted unlearning needs target pairs"));
    }
    single(model, theta, None, TermData::Target, TermKind::MeanNll, 1.0, batch)
}

/// Memorization loss plus the target term, which drives the memorization
/// model away from the target so that extrapolation moves toward it.
pub fn loss_targeted(
    model: &Transformer,
    theta: &ParamStore,
    theta_ref: &ParamStore,
    batch: &Batch,
    variant: Variant,
    beta: f64,
    kl_weight: f64,
) -> Result<f64> {
    if !variant.is_targeted() {
        return Err(Error::arg(format!("{} is not a targeted variant", variant.name())));
    }
    if batch.targeted.is_empty() {
        return Err(Error::arg("targeted unlearning needs target pairs"));
    }
    let spec = ObjectiveSpec::new(variant).with_beta(beta).with_kl_weight(kl_weight);
    loss_value(model, theta, Some(theta_ref), &spec, batch)
}

/// `CE(retain) + sign·β·CE(forget)`.
pub fn loss_weighted(model: &Transformer, theta: &ParamStore, batch: &Batch, sign: i8, beta: f64) -> Result<f64> {
    let variant = match sign {
        1 => Variant::WeightedGd,
        -1 => Variant::WeightedGa,
        _ => return Err(Error::arg(format!("sign must be ±1, got {sign}"))),
    };
    if batch.retain.is_empty() || batch.forget.is_empty() {
        return Err(Error::arg("weighted objectives need retain and forget pairs"));
    }
    let spec = ObjectiveSpec::new(variant).with_beta(beta);
    let mut g = Graph::inference(theta);
    // β = 0 drops the forget term from the table but both sets are still required.
    let l = build_loss(&mut g, model, None, &spec, batch)?;
    Ok(g.scalar(l))
}

/// `Σ p·(ln p − ln q)` between two explicit distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi.ln() - qi.ln())).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};
    use crate::data::{generate_corpus, make_targeted, Vocabulary, DEFAULT_TARGET};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN64: f64 = 4.158_883_083_359_672;

    fn default_model() -> Transformer {
        Transformer::new(ModelConfig::default()).unwrap()
    }

    fn uniform(model: &Transformer) -> ParamStore {
        let mut t = model.init_params();
        let h = t.index_of("lm_head").unwrap();
        t.tensor_mut(h).data_mut().fill(0.0);
        t
    }

    fn jitter(theta: &ParamStore, seed: u64, scale: f64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        theta.map(|x| x + rng.gen_range(-scale..scale))
    }

    fn corpus() -> Vec<QAPair> {
        generate_corpus(3, 10, 4).unwrap()
    }

    #[test]
    fn ce_uniform_is_ln_vocab() {
        let m = default_model();
        let th = uniform(&m);
        let c = corpus();
        let b = Batch::new(&c[..3], &c[3..5]);
        assert!((loss_ce(&m, &th, &b).unwrap() - LN64).abs() < 1e-12);
        assert!((loss_ga(&m, &th, &b).unwrap() + LN64).abs() < 1e-12);
        assert!(loss_gad(&m, &th, &b).unwrap().abs() < 1e-12);
        assert!(matches!(loss_ce(&m, &th, &Batch::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn ga_is_negated_forget_ce() {
        let m = default_model();
        let th = jitter(&m.init_params(), 1, 0.05);
        let c = corpus();
        let b = Batch::new(&c[..2], &c[2..4]);
        let forget_only = Batch::new(&[], &c[2..4]);
        assert_eq!(loss_ga(&m, &th, &b).unwrap(), -loss_ce(&m, &th, &forget_only).unwrap());
        assert!(loss_ga(&m, &th, &Batch::new(&c[..2], &[])).is_err());
    }

    #[test]
    fn gad_cancels_on_identical_sets() {
        let m = default_model();
        let th = jitter(&m.init_params(), 2, 0.05);
        let c = corpus();
        let b = Batch::new(&c[..3], &c[..3]);
        assert_eq!(loss_gad(&m, &th, &b).unwrap(), 0.0);
        assert!(loss_gad(&m, &th, &Batch::new(&[], &c[..3])).is_err());
    }

    #[test]
    fn kl_closed_form() {
        // 0.5·ln 2 + 0.5·ln(2/3), evaluated independently at high precision.
        let expected = 0.143_841_036_225_890_2;
        assert!((kl_divergence(&[0.5, 0.5], &[0.25, 0.75]) - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_at_reference_and_nonnegative() {
        let m = default_model();
        let c = corpus();
        let b = Batch::new(&c[..4], &[]);
        let th = jitter(&m.init_params(), 3, 0.1);
        assert!(loss_kl_retain(&m, &th, &th, &b).unwrap().abs() < 1e-12);
        for s in 0..5 {
            let other = jitter(&th, 10 + s, 0.2);
            assert!(loss_kl_retain(&m, &other, &th, &b).unwrap() >= 0.0);
        }
        assert!(loss_kl_retain(&m, &th, &th, &Batch::new(&[], &c[..2])).is_err());
    }

    #[test]
    fn kl_graph_matches_explicit_distributions() {
        let m = default_model();
        let c = corpus();
        let th = jitter(&m.init_params(), 4, 0.3);
        let rf = jitter(&m.init_params(), 5, 0.3);
        let seq = c[0].sequence();
        let b = Batch::new(&c[..1], &[]);
        let p_ref = m.next_token_probs(&rf, seq.tokens()).unwrap();
        let p = m.next_token_probs(&th, seq.tokens()).unwrap();
        let pos = seq.answer_positions();
        let manual: f64 = pos.iter().map(|&i| kl_divergence(p_ref.row(i - 1), p.row(i - 1))).sum::<f64>() / pos.len() as f64;
        let v = loss_kl_retain(&m, &th, &rf, &b).unwrap();
        assert!((v - manual).abs() < 1e-12);
    }

    #[test]
    fn npo_at_reference() {
        let m = default_model();
        let c = corpus();
        let th = jitter(&m.init_params(), 6, 0.1);
        let b = Batch::new(&c[..3], &c[3..6]);
        let ln2 = std::f64::consts::LN_2;
        assert!((loss_npo(&m, &th, &th, &b, 1.0).unwrap() - 2.0 * ln2).abs() < 1e-10);
        assert!((loss_npo(&m, &th, &th, &b, 0.5).unwrap() - 4.0 * ln2).abs() < 1e-10);
        assert!((loss_mox_mem_po(&m, &th, &th, &b, 1.0, 1.0).unwrap() + 2.0 * ln2).abs() < 1e-10);
        assert!(matches!(loss_npo(&m, &th, &th, &b, 0.0), Err(Error::Config(_))));
        assert!(loss_npo(&m, &th, &th, &Batch::new(&c[..3], &[]), 1.0).is_err());
    }

    #[test]
    fn po_first_term_is_negated_npo() {
        let m = default_model();
        let c = corpus();
        let th = jitter(&m.init_params(), 7, 0.2);
        let rf = jitter(&m.init_params(), 8, 0.2);
        let b = Batch::new(&c[..3], &c[3..6]);
        let po = loss_mox_mem_po(&m, &th, &rf, &b, 0.7, 0.0).unwrap();
        assert_eq!(po, -loss_npo(&m, &th, &rf, &b, 0.7).unwrap());
    }

    #[test]
    fn npo_monotone_in_likelihood() {
        // Raise the forget answer's likelihood by scaling its output column.
        let m = default_model();
        let c = corpus();
        let rf = jitter(&m.init_params(), 9, 0.05);
        let b = Batch::new(&c[..1], &c[1..2]);
        let head = rf.index_of("lm_head").unwrap();
        let tok = c[1].answer.tokens()[0] as usize;
        let boosted = |amount: f64| {
            let mut t = rf.clone();
            let v = t.tensor(head).cols();
            for r in 0..t.tensor(head).rows() {
                let x = t.tensor(head).at(r, tok);
                t.tensor_mut(head).data_mut()[r * v + tok] = x * amount;
            }
            t
        };
        let lo = boosted(0.2);
        let hi = boosted(5.0);
        let lp = |t: &ParamStore| m.sequence_log_prob(t, &c[1].sequence()).unwrap();
        let (a, z) = if lp(&lo) < lp(&hi) { (lo, hi) } else { (hi, lo) };
        // a: lower likelihood, z: higher likelihood.
        assert!(loss_npo(&m, &a, &rf, &b, 1.0).unwrap() < loss_npo(&m, &z, &rf, &b, 1.0).unwrap());
        assert!(loss_mox_mem_po(&m, &z, &rf, &b, 1.0, 0.0).unwrap() < loss_mox_mem_po(&m, &a, &rf, &b, 1.0, 0.0).unwrap());
    }

    #[test]
    fn mox_ce_composition() {
        let m = default_model();
        let th = uniform(&m);
        let c = corpus();
        let b = Batch::new(&c[..3], &c[3..6]);
        assert!((loss_mox_mem_ce(&m, &th, &th, &b, 1.0).unwrap() - LN64).abs() < 1e-12);
        let th2 = jitter(&m.init_params(), 11, 0.1);
        let forget_only = Batch::new(&[], &c[3..6]);
        assert_eq!(
            loss_mox_mem_ce(&m, &th2, &th, &b, 0.0).unwrap(),
            loss_ce(&m, &th2, &forget_only).unwrap()
        );
    }

    #[test]
    fn target_term_cases() {
        let m = default_model();
        let vocab = Vocabulary::standard();
        let c = corpus();
        let forget = &c[3..6];
        let th = jitter(&m.init_params(), 12, 0.1);
        // Degenerate target: the true answer itself.
        let b = Batch::new(&c[..3], forget).with_targets(forget);
        let forget_only = Batch::new(&[], forget);
        assert_eq!(loss_target_term(&m, &th, &b).unwrap(), loss_ce(&m, &th, &forget_only).unwrap());
        let targets = make_targeted(forget, DEFAULT_TARGET, &vocab, 48).unwrap();
        let u = uniform(&m);
        let b = Batch::new(&c[..3], forget).with_targets(&targets);
        assert!((loss_target_term(&m, &u, &b).unwrap() - LN64).abs() < 1e-12);
        let plain = Batch::new(&c[..3], forget);
        assert!(loss_targeted(&m, &th, &th, &plain, Variant::MoxTargetedCe, 0.1, 1.0).is_err());
        let mem = loss_mox_mem_ce(&m, &th, &u, &b, 1.0).unwrap();
        let full = loss_targeted(&m, &th, &u, &b, Variant::MoxTargetedCe, 0.1, 1.0).unwrap();
        assert!((full - (mem - loss_target_term(&m, &th, &b).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn weighted_variants() {
        let m = default_model();
        let th = jitter(&m.init_params(), 13, 0.1);
        let c = corpus();
        let b = Batch::new(&c[..3], &c[3..6]);
        let r = loss_ce(&m, &th, &Batch::new(&c[..3], &[])).unwrap();
        let f = loss_ce(&m, &th, &Batch::new(&[], &c[3..6])).unwrap();
        assert!((loss_weighted(&m, &th, &b, 1, 1.0).unwrap() - (r + f)).abs() < 1e-12);
        assert_eq!(loss_weighted(&m, &th, &b, -1, 1.0).unwrap(), loss_gad(&m, &th, &b).unwrap());
        assert!((loss_weighted(&m, &th, &b, 1, 0.0).unwrap() - r).abs() < 1e-15);
        assert!(loss_weighted(&m, &th, &b, 0, 1.0).is_err());
    }

    #[test]
    fn reference_requirements() {
        for v in Variant::ALL {
            let spec = ObjectiveSpec::new(v);
            let expect = matches!(
                v,
                Variant::KlBaseline | Variant::Npo | Variant::MoxMemCe | Variant::MoxMemPo | Variant::MoxTargetedCe | Variant::MoxTargetedPo
            );
            assert_eq!(spec.needs_reference(), expect, "{v:?}");
        }
        assert!(!ObjectiveSpec::new(Variant::MoxMemCe).with_kl_weight(0.0).needs_reference());
        assert!(ObjectiveSpec::new(Variant::Npo).with_beta(0.0).validate().is_err());
        assert!(ObjectiveSpec::new(Variant::MoxMemCe).with_kl_weight(-1.0).validate().is_err());
        assert_eq!("mox_mem_po".parse::<Variant>().unwrap(), Variant::MoxMemPo);
    }

    /// No MOX-family objective carries a term that pushes a training
    /// pair's NLL up; every GA-family baseline does.
    #[test]
    fn irreversible_gradient_rule() {
        for v in Variant::ALL {
            let spec = ObjectiveSpec::new(v);
            let offending = spec.terms().iter().any(Term::raises_training_nll);
            match v {
                Variant::Ga | Variant::Gad | Variant::KlBaseline | Variant::Npo | Variant::WeightedGa => {
                    assert!(offending, "{v:?} should contain an ascent term")
                }
                _ => assert!(!offending, "{v:?} must not contain an ascent term on training data"),
            }
        }
    }

    fn tiny() -> (Transformer, Vec<QAPair>) {
        let cfg = ModelConfig { vocab_size: 64, ctx_len: 16, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8, seed: 5 };
        (Transformer::new(cfg).unwrap(), corpus())
    }

    #[test]
    fn every_objective_passes_gradient_check() {
        let (m, c) = tiny();
        assert!(m.param_count() <= 5_000);
        let vocab = Vocabulary::standard();
        let targets = make_targeted(&c[2..4], DEFAULT_TARGET, &vocab, 16).unwrap();
        let batch = Batch::new(&c[..2], &c[2..4]).with_targets(&targets);
        let th = jitter(&m.init_params(), 21, 0.3);
        let rf = jitter(&m.init_params(), 22, 0.3);
        for v in Variant::ALL {
            let spec = ObjectiveSpec::new(v).with_beta(if v.is_mox() || v == Variant::Npo { 0.5 } else { 1.5 });
            let (_, analytic) = loss_and_grad(&m, &th, Some(&rf), &spec, &batch).unwrap();
            let numeric = finite_diff_grad(|p| loss_value(&m, p, Some(&rf), &spec, &batch), &th, 1e-5).unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-8).unwrap();
            assert!(err < 1e-4, "{v:?}: rel err {err}");
        }
    }

    #[test]
    fn sign_duality_of_gradients() {
        let (m, c) = tiny();
        let th = jitter(&m.init_params(), 31, 0.3);
        let rf = jitter(&m.init_params(), 32, 0.3);
        let b = Batch::new(&c[..2], &c[2..4]);
        let fb = Batch::new(&[], &c[2..4]);
        let (_, g_ga) = loss_and_grad(&m, &th, None, &ObjectiveSpec::new(Variant::Ga), &b).unwrap();
        let (_, g_ce) = loss_and_grad(&m, &th, None, &ObjectiveSpec::new(Variant::Ce), &fb).unwrap();
        assert_eq!(g_ga, g_ce.map(|x| -x));
        let po = ObjectiveSpec::new(Variant::MoxMemPo).with_kl_weight(0.0).with_beta(0.3);
        let npo = ObjectiveSpec::new(Variant::Npo).with_beta(0.3);
        let (_, g_po) = loss_and_grad(&m, &th, Some(&rf), &po, &b).unwrap();
        let (_, g_npo) = loss_and_grad(&m, &th, Some(&rf), &npo, &b).unwrap();
        assert_eq!(g_po, g_npo.map(|x| -x));
    }
}
