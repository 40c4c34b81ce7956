//! Measurement: ROUGE-L on greedy decodes, answer probability, truth ratio,
//! forget quality against the retrained oracle, model utility and the
//! collapse metric.

mod collapse;
mod ks;
mod rouge;

pub use collapse::{collapse_metric, kl_sparse, CollapseContexts, Context, DEFAULT_CONTEXT_CAP};
pub use ks::{kolmogorov_q, ks_statistic, ks_two_sample, pooled_layout, KsResult, MIN_SAMPLE};
pub use rouge::{lcs_len, rouge_l, rouge_l_or_zero, RougeL};

use serde::{Deserialize, Serialize};

use crate::data::{strip_eos, DatasetSplit, QAPair};
use crate::error::{Error, Result};
use crate::model::{TokenSeq, Transformer};
use crate::tensor::{distance, ParamStore};

/// Generation budget for greedy decodes during evaluation.
pub const MAX_NEW_TOKENS: usize = 8;

/// Per-example statistic compared by the forget-quality KS test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FqStatistic {
    #[default]
    TruthRatio,
    Nll,
}

/// `exp(mean answer-token log-probability)` of `answer` after `qa`'s prompt.
pub fn normalized_probability(model: &Transformer, theta: &ParamStore, qa: &QAPair, answer: &TokenSeq) -> Result<f64> {
    let lp = model.token_log_probs(theta, &qa.with_answer(answer))?;
    Ok((lp.iter().sum::<f64>() / lp.len() as f64).exp())
}

pub fn answer_probability(model: &Transformer, theta: &ParamStore, qa: &QAPair) -> Result<f64> {
    normalized_probability(model, theta, qa, &qa.answer)
}

/// Mean per-token answer NLL.
pub fn answer_nll(model: &Transformer, theta: &ParamStore, qa: &QAPair) -> Result<f64> {
    Ok(-answer_probability(model, theta, qa)?.ln())
}

/// `P_para / (P_para + mean_k P_pert_k)` from length-normalized probabilities.
pub fn truth_ratio_from(p_para: f64, p_pert: &[f64]) -> Result<f64> {
    if p_pert.is_empty() {
        return Err(Error::arg("truth ratio needs perturbed answers"));
    }
    let mean = p_pert.iter().sum::<f64>() / p_pert.len() as f64;
    let denom = p_para + mean;
    if !(denom > 0.0) {
        return Err(Error::arg("truth ratio undefined when every probability is zero"));
    }
    Ok(p_para / denom)
}

pub fn truth_ratio(model: &Transformer, theta: &ParamStore, qa: &QAPair) -> Result<f64> {
    if qa.perturbed.len() < 2 || qa.paraphrase.is_empty() {
        return Err(Error::arg("truth ratio needs a paraphrase and at least two perturbed answers"));
    }
    let para = normalized_probability(model, theta, qa, &qa.paraphrase)?;
    let pert = qa
        .perturbed
        .iter()
        .map(|p| normalized_probability(model, theta, qa, p))
        .collect::<Result<Vec<_>>>()?;
    truth_ratio_from(para, &pert)
}

fn statistic(model: &Transformer, theta: &ParamStore, qa: &QAPair, stat: FqStatistic) -> Result<f64> {
    match stat {
        FqStatistic::TruthRatio => truth_ratio(model, theta, qa),
        FqStatistic::Nll => answer_nll(model, theta, qa),
    }
}

/// KS p-value between candidate and oracle per-example statistics.
pub fn forget_quality_with(
    model: &Transformer,
    candidate: &ParamStore,
    oracle: &ParamStore,
    forget: &[QAPair],
    stat: FqStatistic,
) -> Result<f64> {
    if forget.len() < MIN_SAMPLE {
        return Err(Error::arg(format!("forget quality needs at least {MIN_SAMPLE} forget pairs")));
    }
    let a = forget.iter().map(|q| statistic(model, candidate, q, stat)).collect::<Result<Vec<_>>>()?;
    let b = forget.iter().map(|q| statistic(model, oracle, q, stat)).collect::<Result<Vec<_>>>()?;
    Ok(ks_two_sample(&a, &b)?.p_value)
}

pub fn forget_quality(model: &Transformer, candidate: &ParamStore, oracle: &ParamStore, forget: &[QAPair]) -> Result<f64> {
    forget_quality_with(model, candidate, oracle, forget, FqStatistic::TruthRatio)
}

/// Generation and probability scores averaged over one set of pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub rouge_l: f64,
    pub rouge_l_recall: f64,
    pub answer_prob: f64,
    pub truth_ratio: f64,
    pub nll: f64,
}

/// Greedy-decodes the answer to `qa`'s prompt, without the trailing EOS.
pub fn decode_answer(model: &Transformer, theta: &ParamStore, qa: &QAPair) -> Result<Vec<u32>> {
    let budget = MAX_NEW_TOKENS.min(model.config().ctx_len.saturating_sub(qa.question.len()));
    let out = model.greedy_decode(theta, &qa.question, budget)?;
    Ok(strip_eos(&out.tokens()[qa.question.len()..]))
}

/// Gold answer words used for ROUGE; a targeted pair is scored against its
/// original answer when one is kept.
fn gold(qa: &QAPair) -> Vec<u32> {
    strip_eos(qa.original_answer.as_ref().unwrap_or(&qa.answer).tokens())
}

pub fn score_set(model: &Transformer, theta: &ParamStore, pairs: &[QAPair]) -> Result<SetScores> {
    if pairs.is_empty() {
        return Err(Error::arg("cannot score an empty set"));
    }
    let mut s = SetScores::default();
    for qa in pairs {
        let r = rouge_l_or_zero(&decode_answer(model, theta, qa)?, &gold(qa))?;
        s.rouge_l += r.f;
        s.rouge_l_recall += r.recall;
        let p = answer_probability(model, theta, qa)?;
        s.answer_prob += p;
        s.nll -= p.ln();
        s.truth_ratio += truth_ratio(model, theta, qa)?;
    }
    let n = pairs.len() as f64;
    s.rouge_l /= n;
    s.rouge_l_recall /= n;
    s.answer_prob /= n;
    s.truth_ratio /= n;
    s.nll /= n;
    Ok(s)
}

/// Harmonic mean; zero when any component is zero.
pub fn harmonic_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub mu: f64,
    pub heldout_utility: f64,
    pub retain: SetScores,
    pub heldout: SetScores,
}

impl Utility {
    pub fn from_scores(retain: SetScores, heldout: SetScores) -> Self {
        let mu = harmonic_mean(&[
            retain.rouge_l,
            retain.answer_prob,
            retain.truth_ratio,
            heldout.rouge_l,
            heldout.answer_prob,
            heldout.truth_ratio,
        ]);
        let heldout_utility = harmonic_mean(&[heldout.rouge_l, heldout.answer_prob, heldout.truth_ratio]);
        Self { mu, heldout_utility, retain, heldout }
    }
}

pub fn model_utility_breakdown(model: &Transformer, theta: &ParamStore, retain: &[QAPair], heldout: &[QAPair]) -> Result<Utility> {
    if retain.is_empty() || heldout.is_empty() {
        return Err(Error::arg("model utility needs non-empty retain and held-out sets"));
    }
    Ok(Utility::from_scores(score_set(model, theta, retain)?, score_set(model, theta, heldout)?))
}

/// Harmonic mean of ROUGE-L, answer probability and truth ratio on the
/// retain and held-out sets.
pub fn model_utility(model: &Transformer, theta: &ParamStore, retain: &[QAPair], heldout: &[QAPair]) -> Result<f64> {
    Ok(model_utility_breakdown(model, theta, retain, heldout)?.mu)
}

/// Held-out-only utility: harmonic mean of the three held-out components.
pub fn heldout_utility(model: &Transformer, theta: &ParamStore, heldout: &[QAPair]) -> Result<f64> {
    let h = score_set(model, theta, heldout)?;
    Ok(harmonic_mean(&[h.rouge_l, h.answer_prob, h.truth_ratio]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub fq_statistic: FqStatistic,
    pub collapse_cap: usize,
    pub collapse_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { fq_statistic: FqStatistic::TruthRatio, collapse_cap: DEFAULT_CONTEXT_CAP, collapse_seed: 0 }
    }
}

/// One checkpoint's measurements. Field order is the JSON and CSV order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// NaN (JSON `null`) when the forget set is too small for the KS test.
    #[serde(deserialize_with = "nan_from_null")]
    pub fq: f64,
    pub mu: f64,
    pub f_rl: f64,
    pub r_rl: f64,
    pub heldout_rl: f64,
    pub f_rl_recall: f64,
    pub r_rl_recall: f64,
    pub heldout_utility: f64,
    pub truth_ratio_forget: f64,
    pub truth_ratio_retain: f64,
    pub truth_ratio_heldout: f64,
    pub answer_prob_forget: f64,
    pub answer_prob_retain: f64,
    pub answer_prob_heldout: f64,
    pub nll_forget: f64,
    pub nll_retain: f64,
    pub collapse_retain: f64,
    pub collapse_forget: f64,
    pub divergence_from_ref: f64,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 19] = [
        "fq",
        "mu",
        "f_rl",
        "r_rl",
        "heldout_rl",
        "f_rl_recall",
        "r_rl_recall",
        "heldout_utility",
        "truth_ratio_forget",
        "truth_ratio_retain",
        "truth_ratio_heldout",
        "answer_prob_forget",
        "answer_prob_retain",
        "answer_prob_heldout",
        "nll_forget",
        "nll_retain",
        "collapse_retain",
        "collapse_forget",
        "divergence_from_ref",
    ];

    pub fn values(&self) -> [f64; 19] {
        [
            self.fq,
            self.mu,
            self.f_rl,
            self.r_rl,
            self.heldout_rl,
            self.f_rl_recall,
            self.r_rl_recall,
            self.heldout_utility,
            self.truth_ratio_forget,
            self.truth_ratio_retain,
            self.truth_ratio_heldout,
            self.answer_prob_forget,
            self.answer_prob_retain,
            self.answer_prob_heldout,
            self.nll_forget,
            self.nll_retain,
            self.collapse_retain,
            self.collapse_forget,
            self.divergence_from_ref,
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Scores `theta` on every split; forget quality compares against the
/// oracle on the forget set and is NaN below the KS minimum sample size.
pub fn evaluate(
    model: &Transformer,
    theta: &ParamStore,
    theta_ref: &ParamStore,
    theta_oracle: &ParamStore,
    split: &DatasetSplit,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    theta.check_congruent(theta_ref)?;
    theta.check_congruent(theta_oracle)?;
    let forget = score_set(model, theta, &split.forget)?;
    let util = model_utility_breakdown(model, theta, &split.retain, &split.heldout_world)?;
    let fq = if split.forget.len() < MIN_SAMPLE {
        f64::NAN
    } else {
        forget_quality_with(model, theta, theta_oracle, &split.forget, opts.fq_statistic)?
    };
    let retain_ctx = CollapseContexts::from_pairs(&split.retain, opts.collapse_cap, opts.collapse_seed);
    let forget_ctx = CollapseContexts::from_pairs(&split.forget, opts.collapse_cap, opts.collapse_seed);
    Ok(EvalReport {
        fq,
        mu: util.mu,
        f_rl: forget.rouge_l,
        r_rl: util.retain.rouge_l,
        heldout_rl: util.heldout.rouge_l,
        f_rl_recall: forget.rouge_l_recall,
        r_rl_recall: util.retain.rouge_l_recall,
        heldout_utility: util.heldout_utility,
        truth_ratio_forget: forget.truth_ratio,
        truth_ratio_retain: util.retain.truth_ratio,
        truth_ratio_heldout: util.heldout.truth_ratio,
        answer_prob_forget: forget.answer_prob,
        answer_prob_retain: util.retain.answer_prob,
        answer_prob_heldout: util.heldout.answer_prob,
        nll_forget: forget.nll,
        nll_retain: util.retain.nll,
        collapse_retain: collapse_metric(model, theta, &retain_ctx)?,
        collapse_forget: collapse_metric(model, theta, &forget_ctx)?,
        divergence_from_ref: distance(theta, theta_ref)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, split_by_ratio};
    use crate::model::ModelConfig;

    fn uniform() -> (Transformer, ParamStore) {
        let m = Transformer::new(ModelConfig::default()).unwrap();
        let mut t = m.init_params();
        let h = t.index_of("lm_head").unwrap();
        t.tensor_mut(h).data_mut().fill(0.0);
        (m, t)
    }

    #[test]
    fn probability_examples() {
        let (m, t) = uniform();
        let c = generate_corpus(0, 10, 4).unwrap();
        for qa in &c {
            assert!((answer_probability(&m, &t, qa).unwrap() - 1.0 / 64.0).abs() < 1e-12);
            assert!((truth_ratio(&m, &t, qa).unwrap() - 0.5).abs() < 1e-12);
        }
        let th = m.init_params();
        for qa in &c {
            let p = answer_probability(&m, &th, qa).unwrap();
            assert!(p > 0.0 && p <= 1.0);
        }
    }

    #[test]
    fn truth_ratio_closed_forms() {
        assert_eq!(truth_ratio_from(0.3, &[0.3, 0.3, 0.3]).unwrap(), 0.5);
        assert!(truth_ratio_from(1.0, &[1e-12, 1e-12]).unwrap() > 1.0 - 1e-11);
        assert!(truth_ratio_from(0.0, &[0.0]).is_err());
        assert!(truth_ratio_from(0.5, &[]).is_err());
        let mut prev = 0.0;
        for k in 1..20 {
            let tr = truth_ratio_from(k as f64 * 0.05, &[0.2, 0.4, 0.1]).unwrap();
            assert!(tr > prev);
            prev = tr;
        }
    }

    #[test]
    fn harmonic_mean_cases() {
        assert_eq!(harmonic_mean(&[1.0; 6]), 1.0);
        assert_eq!(harmonic_mean(&[1.0, 0.0, 0.5]), 0.0);
        assert!((harmonic_mean(&[0.5, 1.0]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fq_of_model_against_itself_is_one() {
        let m = Transformer::new(ModelConfig::default()).unwrap();
        let t = m.init_params();
        let c = generate_corpus(0, 10, 4).unwrap();
        assert_eq!(forget_quality(&m, &t, &t, &c).unwrap(), 1.0);
        assert_eq!(forget_quality_with(&m, &t, &t, &c, FqStatistic::Nll).unwrap(), 1.0);
        assert!(forget_quality(&m, &t, &t, &c[..4]).is_err());
    }

    #[test]
    fn report_ranges_on_random_theta() {
        let m = Transformer::new(ModelConfig { seed: 4, ..ModelConfig::default() }).unwrap();
        let t = m.init_params();
        let o = Transformer::new(ModelConfig { seed: 5, ..ModelConfig::default() }).unwrap().init_params();
        let corpus = generate_corpus(0, 20, 4).unwrap();
        let split = split_by_ratio(&corpus, 0.1, 0).unwrap();
        let opts = EvalOptions { collapse_cap: 40, ..EvalOptions::default() };
        let r = evaluate(&m, &t, &t, &o, &split, &opts).unwrap();
        for (name, v) in EvalReport::COLUMNS.iter().zip(r.values()) {
            assert!(v.is_finite() && v >= 0.0, "{name} = {v}");
        }
        for v in [r.fq, r.mu, r.f_rl, r.r_rl, r.heldout_rl, r.answer_prob_forget, r.truth_ratio_retain] {
            assert!(v <= 1.0);
        }
        assert_eq!(r.divergence_from_ref, 0.0);
        let self_eval = evaluate(&m, &o, &t, &o, &split, &opts).unwrap();
        assert_eq!(self_eval.fq, 1.0);
        let json = r.to_json().unwrap();
        let keys: Vec<&str> = json.lines().filter_map(|l| l.trim().strip_prefix('"')?.split('"').next()).collect();
        assert_eq!(keys, EvalReport::COLUMNS.to_vec());
    }
}
