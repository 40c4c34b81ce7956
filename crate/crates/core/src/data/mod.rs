//! Deterministic synthetic fact corpus: fictitious author profiles, one
//! question/answer pair per (entity, attribute), with a paraphrased answer
//! and perturbed wrong answers for truth-ratio scoring.

mod jsonl;
pub mod vocab;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenSeq, BOS, EOS};

pub use jsonl::{read_jsonl, write_jsonl, JsonRecord};
pub use vocab::{Attribute, Vocabulary, DEFAULT_TARGET, FIRST_NAMES, LAST_NAMES};

/// Perturbed (wrong-value) answers generated per pair.
pub const PERTURBED_PER_PAIR: usize = 3;
/// Fresh entities drawn for the held-out world split.
pub const HELDOUT_ENTITIES: usize = 5;

const SALT_NAMES: u64 = 0x6e61_6d65;
const SALT_VALUES: u64 = 0x7661_6c73;
const SALT_SPLIT: u64 = 0x7370_6c74;
const SALT_HELDOUT: u64 = 0x686c_6474;

/// Size of the entity-name space.
pub fn max_entities() -> usize {
    FIRST_NAMES.len() * LAST_NAMES.len()
}

pub fn entity_name(entity_id: u32) -> (&'static str, &'static str) {
    let n = LAST_NAMES.len() as u32;
    (FIRST_NAMES[(entity_id / n) as usize], LAST_NAMES[(entity_id % n) as usize])
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactRecord {
    pub entity_id: u32,
    pub attribute: Attribute,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QAPair {
    /// `<bos>` plus question words, all with the prompt role.
    pub question: TokenSeq,
    /// Answer words plus `<eos>`.
    pub answer: TokenSeq,
    pub paraphrase: TokenSeq,
    pub perturbed: Vec<TokenSeq>,
    pub fact: FactRecord,
    /// The true answer, kept when the answer has been swapped for a target.
    pub original_answer: Option<TokenSeq>,
}

impl QAPair {
    /// Question followed by the answer: the training sequence.
    pub fn sequence(&self) -> TokenSeq {
        self.with_answer(&self.answer)
    }

    pub fn with_answer(&self, answer: &TokenSeq) -> TokenSeq {
        self.question.concat(answer).expect("prompt followed by answer is a valid layout")
    }

    /// Answer tokens without the trailing `<eos>`.
    pub fn answer_words(&self) -> Vec<u32> {
        strip_eos(self.answer.tokens())
    }

    fn build(vocab: &Vocabulary, fact: FactRecord, wrong: &[&str]) -> Result<Self> {
        let (first, last) = entity_name(fact.entity_id);
        let (before, after) = fact.attribute.question();
        let mut q: Vec<&str> = before.to_vec();
        q.extend([first, last]);
        q.extend_from_slice(after);
        let mut question = vec![BOS];
        question.extend(vocab.tokenize_strict(&q.join(" "))?);

        let answer_seq = |value: &str, tail: &[&str]| -> Result<TokenSeq> {
            let mut words = vec![value];
            words.extend_from_slice(tail);
            let mut ids = vocab.tokenize_strict(&words.join(" "))?;
            ids.push(EOS);
            Ok(TokenSeq::answer(ids))
        };
        let answer = answer_seq(&fact.value, vocab::ANSWER_TAIL)?;
        let paraphrase = answer_seq(&fact.value, vocab::PARAPHRASE_TAIL)?;
        let perturbed =
            wrong.iter().map(|w| answer_seq(w, vocab::PARAPHRASE_TAIL)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            question: TokenSeq::prompt(question),
            answer,
            paraphrase,
            perturbed,
            fact,
            original_answer: None,
        })
    }
}

pub fn strip_eos(tokens: &[u32]) -> Vec<u32> {
    tokens.iter().copied().filter(|&t| t != EOS).collect()
}

/// Retain/forget partition plus a held-out world never trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub retain: Vec<QAPair>,
    pub forget: Vec<QAPair>,
    pub heldout_world: Vec<QAPair>,
    pub forget_ratio: f64,
}

impl DatasetSplit {
    /// Retain followed by forget.
    pub fn training_pairs(&self) -> Vec<QAPair> {
        self.retain.iter().chain(&self.forget).cloned().collect()
    }

    /// Same split with the forget set removed; what the oracle trains on.
    pub fn without_forget(&self) -> Self {
        Self { forget: Vec::new(), ..self.clone() }
    }

    pub fn forget_entities(&self) -> BTreeSet<u32> {
        self.forget.iter().map(|p| p.fact.entity_id).collect()
    }
}

fn make_pair(vocab: &Vocabulary, rng: &mut ChaCha8Rng, entity_id: u32, attribute: Attribute, value: &str) -> Result<QAPair> {
    let mut others: Vec<&str> = attribute.pool().iter().copied().filter(|v| *v != value).collect();
    if others.len() < PERTURBED_PER_PAIR {
        return Err(Error::Generation(format!(
            "value pool for {} too small for {PERTURBED_PER_PAIR} perturbations",
            attribute.name()
        )));
    }
    others.shuffle(rng);
    let fact = FactRecord { entity_id, attribute, value: value.to_string() };
    QAPair::build(vocab, fact, &others[..PERTURBED_PER_PAIR])
}

/// `n_entities × attrs_per_entity` pairs. Entity names are drawn without
/// replacement; each attribute's values are dealt so every pool item
/// appears within one of the uniform count.
pub fn generate_corpus(seed: u64, n_entities: usize, attrs_per_entity: usize) -> Result<Vec<QAPair>> {
    if n_entities < 10 {
        return Err(Error::arg(format!("need at least 10 entities, got {n_entities}")));
    }
    if attrs_per_entity < 2 {
        return Err(Error::arg(format!("need at least 2 attributes per entity, got {attrs_per_entity}")));
    }
    if n_entities > max_entities() {
        return Err(Error::Generation(format!(
            "name pool exhausted: {n_entities} entities requested, {} names exist",
            max_entities()
        )));
    }
    if attrs_per_entity > Attribute::ALL.len() {
        return Err(Error::Generation(format!(
            "attribute pool exhausted: {attrs_per_entity} requested, {} exist",
            Attribute::ALL.len()
        )));
    }
    let vocab = Vocabulary::standard();
    let mut ids: Vec<u32> = (0..max_entities() as u32).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SALT_NAMES));
    let entities = &ids[..n_entities];

    let attrs = &Attribute::ALL[..attrs_per_entity];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SALT_VALUES);
    let mut values: Vec<Vec<&str>> = Vec::with_capacity(attrs.len());
    for a in attrs {
        let pool = a.pool();
        let mut dealt: Vec<&str> = (0..n_entities).map(|i| pool[i % pool.len()]).collect();
        dealt.shuffle(&mut rng);
        values.push(dealt);
    }

    let mut out = Vec::with_capacity(n_entities * attrs_per_entity);
    for (e, &id) in entities.iter().enumerate() {
        for (k, &a) in attrs.iter().enumerate() {
            out.push(make_pair(&vocab, &mut rng, id, a, values[k][e])?);
        }
    }
    Ok(out)
}

fn entities_in_order(corpus: &[QAPair]) -> Vec<u32> {
    let mut seen = BTreeSet::new();
    corpus.iter().map(|p| p.fact.entity_id).filter(|e| seen.insert(*e)).collect()
}

fn attributes_in_order(corpus: &[QAPair]) -> Vec<Attribute> {
    let set: BTreeSet<Attribute> = corpus.iter().map(|p| p.fact.attribute).collect();
    set.into_iter().collect()
}

/// Facts about entities that never appear in `corpus`.
pub fn heldout_world(corpus: &[QAPair], seed: u64) -> Result<Vec<QAPair>> {
    let used: BTreeSet<u32> = corpus.iter().map(|p| p.fact.entity_id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SALT_HELDOUT);
    let mut ids: Vec<u32> = (0..max_entities() as u32).filter(|e| !used.contains(e)).collect();
    if ids.is_empty() {
        return Err(Error::Generation("no fresh entity names left for the held-out world".into()));
    }
    ids.shuffle(&mut rng);
    ids.truncate(HELDOUT_ENTITIES);
    ids.sort_unstable();
    let vocab = Vocabulary::standard();
    let attrs = attributes_in_order(corpus);
    let mut out = Vec::new();
    for id in ids {
        for &a in &attrs {
            let value = *a.pool().choose(&mut rng).expect("pools are non-empty");
            out.push(make_pair(&vocab, &mut rng, id, a, value)?);
        }
    }
    Ok(out)
}

fn check_ratio(forget_ratio: f64) -> Result<()> {
    if !(forget_ratio > 0.0 && forget_ratio < 1.0) {
        return Err(Error::arg(format!("forget ratio must lie in (0, 1), got {forget_ratio}")));
    }
    Ok(())
}

/// Number of units to forget: `round(ratio · n)`, half away from zero.
fn forget_count(forget_ratio: f64, n: usize, unit: &str) -> Result<usize> {
    let k = (forget_ratio * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::arg(format!("forget ratio {forget_ratio} selects zero of {n} {unit}")));
    }
    if k >= n {
        return Err(Error::arg(format!("forget ratio {forget_ratio} leaves no {unit} to retain")));
    }
    Ok(k)
}

/// Entity-level split: every pair of a forgotten entity goes to the forget
/// set.
pub fn split_by_ratio(corpus: &[QAPair], forget_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    check_ratio(forget_ratio)?;
    let mut entities = entities_in_order(corpus);
    let k = forget_count(forget_ratio, entities.len(), "entities")?;
    entities.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SALT_SPLIT));
    let chosen: BTreeSet<u32> = entities[..k].iter().copied().collect();
    let (forget, retain): (Vec<QAPair>, Vec<QAPair>) =
        corpus.iter().cloned().partition(|p| chosen.contains(&p.fact.entity_id));
    Ok(DatasetSplit { retain, forget, heldout_world: heldout_world(corpus, seed)?, forget_ratio })
}

/// Pair-level split inside shared entities: each forgotten pair's entity
/// keeps at least one retained pair.
pub fn split_overlap(corpus: &[QAPair], forget_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    check_ratio(forget_ratio)?;
    let k = forget_count(forget_ratio, corpus.len(), "pairs")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SALT_SPLIT);
    let mut entities = entities_in_order(corpus);
    entities.shuffle(&mut rng);
    // One shuffled pair list per entity; the last pair of each is never taken.
    let mut per_entity: Vec<Vec<usize>> = entities
        .iter()
        .map(|&e| {
            let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].fact.entity_id == e).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let capacity: usize = per_entity.iter().map(|v| v.len().saturating_sub(1)).sum();
    if k > capacity {
        return Err(Error::arg(format!("forget ratio {forget_ratio} cannot keep every entity in retain")));
    }
    let mut chosen = BTreeSet::new();
    'outer: loop {
        for list in per_entity.iter_mut() {
            if chosen.len() == k {
                break 'outer;
            }
            if list.len() > 1 {
                chosen.insert(list.pop().expect("non-empty"));
            }
        }
    }
    let mut forget = Vec::with_capacity(k);
    let mut retain = Vec::with_capacity(corpus.len() - k);
    for (i, p) in corpus.iter().enumerate() {
        if chosen.contains(&i) {
            forget.push(p.clone());
        } else {
            retain.push(p.clone());
        }
    }
    Ok(DatasetSplit { retain, forget, heldout_world: heldout_world(corpus, seed)?, forget_ratio })
}

/// Disjoint entity-level forget sets, one per ratio (each ratio taken
/// against the full corpus), plus the pairs left over. Used for sequential
/// unlearning.
pub fn split_stages(corpus: &[QAPair], ratios: &[f64], seed: u64) -> Result<(Vec<Vec<QAPair>>, Vec<QAPair>)> {
    let mut entities = entities_in_order(corpus);
    let n = entities.len();
    entities.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SALT_SPLIT));
    let mut stages = Vec::with_capacity(ratios.len());
    let mut taken = 0;
    for &r in ratios {
        check_ratio(r)?;
        let k = forget_count(r, n, "entities")?;
        if taken + k >= n {
            return Err(Error::arg("stage ratios leave nothing to retain"));
        }
        let chosen: BTreeSet<u32> = entities[taken..taken + k].iter().copied().collect();
        taken += k;
        stages.push(corpus.iter().filter(|p| chosen.contains(&p.fact.entity_id)).cloned().collect());
    }
    let all: BTreeSet<u32> = entities[..taken].iter().copied().collect();
    let rest = corpus.iter().filter(|p| !all.contains(&p.fact.entity_id)).cloned().collect();
    Ok((stages, rest))
}

/// Swaps every answer for the tokenized `target_text`, keeping the true
/// answer in `original_answer`.
pub fn make_targeted(pairs: &[QAPair], target_text: &str, vocab: &Vocabulary, ctx_len: usize) -> Result<Vec<QAPair>> {
    let mut ids = vocab.tokenize_strict(target_text)?;
    if ids.is_empty() {
        return Err(Error::arg("empty target text"));
    }
    ids.push(EOS);
    let target = TokenSeq::answer(ids);
    pairs
        .iter()
        .map(|p| {
            if p.question.len() + target.len() > ctx_len {
                return Err(Error::arg(format!(
                    "target of {} tokens does not fit ctx_len {ctx_len} after a {}-token question",
                    target.len(),
                    p.question.len()
                )));
            }
            let mut out = p.clone();
            out.original_answer = Some(p.original_answer.clone().unwrap_or_else(|| p.answer.clone()));
            out.answer = target.clone();
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = generate_corpus(7, 50, 4).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, generate_corpus(7, 50, 4).unwrap());
        assert_ne!(a, generate_corpus(8, 50, 4).unwrap());
    }

    #[test]
    fn corpus_arguments_checked() {
        assert!(matches!(generate_corpus(0, 9, 4), Err(Error::Argument(_))));
        assert!(matches!(generate_corpus(0, 10, 1), Err(Error::Argument(_))));
        assert!(matches!(generate_corpus(0, 57, 4), Err(Error::Generation(_))));
        assert!(matches!(generate_corpus(0, 20, 5), Err(Error::Generation(_))));
    }

    #[test]
    fn value_frequencies_near_uniform() {
        let corpus = generate_corpus(3, 50, 4).unwrap();
        let mut counts: HashMap<(Attribute, String), usize> = HashMap::new();
        for p in &corpus {
            *counts.entry((p.fact.attribute, p.fact.value.clone())).or_default() += 1;
        }
        for a in Attribute::ALL {
            let expected = 50.0 / a.pool().len() as f64;
            for v in a.pool() {
                let c = *counts.get(&(a, v.to_string())).unwrap_or(&0) as f64;
                assert!(c <= 3.0 * expected && c >= expected / 3.0, "{v}: {c} vs {expected}");
            }
        }
    }

    #[test]
    fn pair_invariants() {
        let corpus = generate_corpus(1, 20, 4).unwrap();
        let mut keys = BTreeSet::new();
        for p in &corpus {
            assert!(keys.insert((p.fact.entity_id, p.fact.attribute)));
            assert_eq!(p.perturbed.len(), PERTURBED_PER_PAIR);
            assert!(p.sequence().len() <= 48);
            for q in &p.perturbed {
                assert_ne!(q, &p.answer);
                assert_ne!(q, &p.paraphrase);
                // Template-identical to the paraphrase: only the value differs.
                let diff = q.tokens().iter().zip(p.paraphrase.tokens()).filter(|(a, b)| a != b).count();
                assert_eq!(q.len(), p.paraphrase.len());
                assert_eq!(diff, 1);
            }
        }
    }

    #[test]
    fn entity_split_counts_and_partition() {
        let corpus = generate_corpus(5, 50, 4).unwrap();
        let s = split_by_ratio(&corpus, 0.10, 9).unwrap();
        assert_eq!(s.forget_entities().len(), 5);
        assert_eq!(s.forget.len() + s.retain.len(), corpus.len());
        let retain_entities: BTreeSet<u32> = s.retain.iter().map(|p| p.fact.entity_id).collect();
        assert!(s.forget_entities().is_disjoint(&retain_entities));
        let mut union: Vec<_> = s.training_pairs().into_iter().map(|p| p.fact).collect();
        let mut orig: Vec<_> = corpus.iter().map(|p| p.fact.clone()).collect();
        union.sort_by_key(|f| (f.entity_id, f.attribute));
        orig.sort_by_key(|f| (f.entity_id, f.attribute));
        assert_eq!(union, orig);
        // Within one entity's worth of pairs of the requested ratio.
        assert!((s.forget.len() as f64 - 0.10 * 200.0).abs() <= 4.0);

        let s1 = split_by_ratio(&corpus, 0.01, 9).unwrap();
        assert_eq!(s1.forget_entities().len(), 1);
        assert_eq!(s, split_by_ratio(&corpus, 0.10, 9).unwrap());
    }

    #[test]
    fn split_errors() {
        let corpus = generate_corpus(5, 50, 4).unwrap();
        assert!(split_by_ratio(&corpus, 0.0, 1).is_err());
        assert!(split_by_ratio(&corpus, 1.0, 1).is_err());
        assert!(matches!(split_by_ratio(&corpus, 0.005, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn heldout_is_fresh() {
        let corpus = generate_corpus(5, 50, 4).unwrap();
        let s = split_by_ratio(&corpus, 0.10, 9).unwrap();
        assert_eq!(s.heldout_world.len(), 20);
        let trained: BTreeSet<(u32, Attribute, String)> =
            corpus.iter().map(|p| (p.fact.entity_id, p.fact.attribute, p.fact.value.clone())).collect();
        let trained_entities: BTreeSet<u32> = corpus.iter().map(|p| p.fact.entity_id).collect();
        for p in &s.heldout_world {
            assert!(!trained.contains(&(p.fact.entity_id, p.fact.attribute, p.fact.value.clone())));
            assert!(!trained_entities.contains(&p.fact.entity_id));
        }
    }

    #[test]
    fn overlap_split_shares_entities() {
        let corpus = generate_corpus(5, 50, 4).unwrap();
        let s = split_overlap(&corpus, 0.10, 2).unwrap();
        assert_eq!(s.forget.len(), 20);
        assert_eq!(s.forget.len() + s.retain.len(), corpus.len());
        let retain_entities: BTreeSet<u32> = s.retain.iter().map(|p| p.fact.entity_id).collect();
        for p in &s.forget {
            assert!(retain_entities.contains(&p.fact.entity_id));
            assert!(!s.retain.contains(p));
        }
    }

    #[test]
    fn stages_are_disjoint() {
        let corpus = generate_corpus(5, 50, 4).unwrap();
        let (stages, rest) = split_stages(&corpus, &[0.01, 0.05, 0.10], 4).unwrap();
        let sizes: Vec<usize> = stages.iter().map(|s| s.len() / 4).collect();
        assert_eq!(sizes, vec![1, 3, 5]);
        let total: usize = stages.iter().map(Vec::len).sum::<usize>() + rest.len();
        assert_eq!(total, corpus.len());
    }

    #[test]
    fn targeted_pairs() {
        let vocab = Vocabulary::standard();
        let corpus = generate_corpus(5, 10, 2).unwrap();
        let t = make_targeted(&corpus, DEFAULT_TARGET, &vocab, 48).unwrap();
        assert!(t.iter().all(|p| p.answer == t[0].answer));
        assert_eq!(t[0].original_answer.as_ref(), Some(&corpus[0].answer));
        assert!(make_targeted(&[], DEFAULT_TARGET, &vocab, 48).unwrap().is_empty());
        assert!(make_targeted(&corpus, DEFAULT_TARGET, &vocab, 8).is_err());
        assert_eq!(vocab.detokenize(t[0].answer.tokens()), DEFAULT_TARGET);
    }
}
