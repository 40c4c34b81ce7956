//! Average KL from empirical next-token conditionals to the model.
//!
//! Contexts are the distinct prefixes (at least two tokens long) of the
//! question-plus-answer sequences of a split that are followed by an answer
//! token; `q` is the empirical distribution of that next token across the
//! split.
//! Because the model is causal, one forward pass over a sequence yields the
//! prediction after each of its prefixes, so contexts are stored as
//! (sequence, position) references.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::QAPair;
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::tensor::ParamStore;

pub const DEFAULT_CONTEXT_CAP: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    /// Index into [`CollapseContexts::sequences`].
    pub seq: usize,
    /// Row of that sequence's logits predicting the next token.
    pub row: usize,
    /// Sparse `q(·|c)`, sorted by token id.
    pub q: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollapseContexts {
    pub sequences: Vec<Vec<u32>>,
    pub contexts: Vec<Context>,
}

impl CollapseContexts {
    pub fn from_pairs(pairs: &[QAPair], cap: usize, seed: u64) -> Self {
        let seqs: Vec<_> = pairs.iter().map(|p| p.sequence()).collect();
        let sequences: Vec<Vec<u32>> = seqs.iter().map(|s| s.unpadded().to_vec()).collect();
        // prefix -> (first sequence holding it, next-token counts)
        let mut table: BTreeMap<&[u32], (usize, BTreeMap<u32, usize>)> = BTreeMap::new();
        for (s, toks) in sequences.iter().enumerate() {
            for len in seqs[s].answer_positions().into_iter().filter(|&p| p >= 2) {
                let e = table.entry(&toks[..len]).or_insert((s, BTreeMap::new()));
                *e.1.entry(toks[len]).or_insert(0) += 1;
            }
        }
        let mut contexts: Vec<Context> = table
            .iter()
            .map(|(prefix, (s, counts))| {
                let total: usize = counts.values().sum();
                Context {
                    seq: *s,
                    row: prefix.len() - 1,
                    q: counts.iter().map(|(&t, &c)| (t, c as f64 / total as f64)).collect(),
                }
            })
            .collect();
        if contexts.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = sample(&mut rng, contexts.len(), cap).into_vec();
            keep.sort_unstable();
            contexts = keep.into_iter().map(|i| contexts[i].clone()).collect();
        }
        Self { sequences, contexts }
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// `KL(q ‖ p)` with `q` sparse and `p` dense.
pub fn kl_sparse(q: &[(u32, f64)], p: &[f64]) -> f64 {
    q.iter().filter(|(_, w)| *w > 0.0).map(|&(t, w)| w * (w.ln() - p[t as usize].ln())).sum()
}

fn check_q(q: &[(u32, f64)], vocab: usize) -> Result<()> {
    let total: f64 = q.iter().map(|(_, w)| w).sum();
    if q.iter().any(|&(t, w)| t as usize >= vocab || !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg("context distribution is not a valid distribution over the vocabulary"));
    }
    Ok(())
}

pub fn collapse_metric(model: &Transformer, theta: &ParamStore, contexts: &CollapseContexts) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::arg("collapse metric needs at least one context"));
    }
    let vocab = model.config().vocab_size;
    let mut by_seq: BTreeMap<usize, Vec<&Context>> = BTreeMap::new();
    for c in &contexts.contexts {
        check_q(&c.q, vocab)?;
        by_seq.entry(c.seq).or_default().push(c);
    }
    let mut total = 0.0;
    for (s, ctxs) in by_seq {
        let toks = contexts.sequences.get(s).ok_or_else(|| Error::arg("context refers to a missing sequence"))?;
        let probs = model.next_token_probs(theta, toks)?;
        for c in ctxs {
            total += kl_sparse(&c.q, probs.row(c.row));
        }
    }
    Ok((total / contexts.len() as f64).max(0.0))
}
