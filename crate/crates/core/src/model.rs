//! Tiny decoder-only transformer: learned token and position embeddings,
//! pre-norm blocks with causal multi-head attention and a GELU MLP, final
//! layer norm and an untied output head. Linear layers carry no bias; layer
//! norms carry gain and bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Ids below this are reserved for the special tokens above.
pub const RESERVED: u32 = 4;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prompt,
    Answer,
    Pad,
}

/// Token ids with a role per position, laid out as
/// `prompt* answer* pad*`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<u32>,
    roles: Vec<Role>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, roles: Vec<Role>) -> Result<Self> {
        if tokens.len() != roles.len() {
            return Err(Error::arg("token and role counts differ"));
        }
        let rank = |r: Role| match r {
            Role::Prompt => 0,
            Role::Answer => 1,
            Role::Pad => 2,
        };
        if roles.windows(2).any(|w| rank(w[0]) > rank(w[1])) {
            return Err(Error::arg("roles must follow prompt*, answer*, pad*"));
        }
        Ok(Self { tokens, roles })
    }

    pub fn prompt(tokens: Vec<u32>) -> Self {
        let roles = vec![Role::Prompt; tokens.len()];
        Self { tokens, roles }
    }

    pub fn answer(tokens: Vec<u32>) -> Self {
        let roles = vec![Role::Answer; tokens.len()];
        Self { tokens, roles }
    }

    /// `self` followed by `other`; the role layout must stay valid.
    pub fn concat(&self, other: &TokenSeq) -> Result<Self> {
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        let mut roles = self.roles.clone();
        roles.extend_from_slice(&other.roles);
        Self::new(tokens, roles)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions whose role is `Answer`.
    pub fn answer_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == Role::Answer).collect()
    }

    pub fn answer_tokens(&self) -> Vec<u32> {
        self.answer_positions().into_iter().map(|i| self.tokens[i]).collect()
    }

    /// Non-pad prefix, i.e. prompt followed by answer.
    pub fn unpadded(&self) -> &[u32] {
        let n = self.roles.iter().take_while(|&&r| r != Role::Pad).count();
        &self.tokens[..n]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub ctx_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 64, ctx_len: 48, d_model: 64, n_layers: 2, n_heads: 2, d_ff: 128, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < RESERVED as usize {
            return Err(Error::config(format!("vocab_size {} < 4", self.vocab_size)));
        }
        if self.ctx_len < 2 {
            return Err(Error::config("ctx_len must be at least 2"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

struct BlockIdx {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    w1: usize,
    w2: usize,
}

/// The transformer architecture; parameters live in a separate
/// [`ParamStore`] so several models can share one definition.
pub struct Transformer {
    config: ModelConfig,
    layout: Vec<(String, Vec<usize>)>,
    blocks: Vec<BlockIdx>,
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, c, d, f) = (config.vocab_size, config.ctx_len, config.d_model, config.d_ff);
        let mut layout: Vec<(String, Vec<usize>)> =
            vec![("tok_emb".into(), vec![v, d]), ("pos_emb".into(), vec![c, d])];
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let base = layout.len();
            let p = |s: &str| format!("blocks.{l}.{s}");
            layout.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ff.w1"), vec![d, f]),
                (p("ff.w2"), vec![f, d]),
            ]);
            blocks.push(BlockIdx {
                ln1_gain: base,
                ln1_bias: base + 1,
                wq: base + 2,
                wk: base + 3,
                wv: base + 4,
                wo: base + 5,
                ln2_gain: base + 6,
                ln2_bias: base + 7,
                w1: base + 8,
                w2: base + 9,
            });
        }
        layout.extend([
            ("ln_f.gain".into(), vec![d]),
            ("ln_f.bias".into(), vec![d]),
            ("lm_head".into(), vec![d, v]),
        ]);
        Ok(Self { config, layout, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter names and shapes, in store order.
    pub fn layout(&self) -> &[(String, Vec<usize>)] {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Seeded initialization: normal(0, 0.02) weights, residual output
    /// projections scaled by `1/sqrt(2·n_layers)`, unit gains, zero biases.
    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let resid = INIT_STD / (2.0 * self.config.n_layers as f64).sqrt();
        let entries = self
            .layout
            .iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let std = if name.ends_with("attn.wo") || name.ends_with("ff.w2") {
                        resid
                    } else {
                        INIT_STD
                    };
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                };
                (name.clone(), Tensor::from_parts(shape.clone(), data))
            })
            .collect();
        ParamStore::new(entries).expect("layout names are unique")
    }

    pub fn check_params(&self, theta: &ParamStore) -> Result<()> {
        if theta.len() != self.layout.len() {
            return Err(Error::StructuralMismatch(format!(
                "store has {} entries, model expects {}",
                theta.len(),
                self.layout.len()
            )));
        }
        for ((name, shape), (n, t)) in self.layout.iter().zip(theta.iter()) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::StructuralMismatch(format!(
                    "expected `{name}` {shape:?}, found `{n}` {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::arg("empty token sequence"));
        }
        if tokens.len() > self.config.ctx_len {
            return Err(Error::arg(format!(
                "sequence length {} exceeds ctx_len {}",
                tokens.len(),
                self.config.ctx_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::arg(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns logits `[len, vocab]`;
    /// row `i` predicts token `i + 1`.
    pub fn logits(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.param(0);
        let pos = g.param(1);
        let te = g.embedding(tok, &ids)?;
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(te, pe)?;

        let d = self.config.d_model;
        let dh = d / self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let (gain, bias) = (g.param(b.ln1_gain), g.param(b.ln1_bias));
            let h = g.layer_norm(x, gain, bias, LN_EPS)?;
            let wq = g.param(b.wq);
            let wk = g.param(b.wk);
            let wv = g.param(b.wv);
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for head in 0..self.config.n_heads {
                let qh = g.slice_cols(q, head * dh, dh)?;
                let kh = g.slice_cols(k, head * dh, dh)?;
                let vh = g.slice_cols(v, head * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let att = g.causal_softmax(scores)?;
                heads.push(g.matmul(att, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let wo = g.param(b.wo);
            let proj = g.matmul(cat, wo)?;
            x = g.add(x, proj)?;

            let (gain, bias) = (g.param(b.ln2_gain), g.param(b.ln2_bias));
            let h = g.layer_norm(x, gain, bias, LN_EPS)?;
            let w1 = g.param(b.w1);
            let w2 = g.param(b.w2);
            let up = g.matmul(h, w1)?;
            let act = g.gelu(up);
            let down = g.matmul(act, w2)?;
            x = g.add(x, down)?;
        }
        let n = self.layout.len();
        let (gain, bias) = (g.param(n - 3), g.param(n - 2));
        let h = g.layer_norm(x, gain, bias, LN_EPS)?;
        let head = g.param(n - 1);
        g.matmul(h, head)
    }

    /// Log-probability of every answer token given its prefix, as a vector
    /// node in answer order. Pads are excluded.
    pub fn answer_log_probs(&self, g: &mut Graph, seq: &TokenSeq) -> Result<Var> {
        let positions = seq.answer_positions();
        if positions.is_empty() {
            return Err(Error::arg("sequence has no answer tokens"));
        }
        if positions[0] == 0 {
            return Err(Error::arg("an answer token needs at least one preceding token"));
        }
        let tokens = seq.unpadded();
        let logits = self.logits(g, tokens)?;
        let rows: Vec<usize> = positions.iter().map(|&p| p - 1).collect();
        let sel = g.select_rows(logits, &rows)?;
        let lp = g.log_softmax(sel);
        let index: Vec<(usize, usize)> =
            positions.iter().enumerate().map(|(k, &p)| (k, tokens[p] as usize)).collect();
        g.gather(lp, &index)
    }

    pub fn forward_logits(&self, theta: &ParamStore, seq: &TokenSeq) -> Result<Tensor> {
        self.check_params(theta)?;
        let mut g = Graph::inference(theta);
        let l = self.logits(&mut g, seq.tokens())?;
        Ok(g.value(l).clone())
    }

    /// `Σ log h_θ(tᵢ | t<ᵢ)` over answer positions; always `≤ 0`.
    pub fn sequence_log_prob(&self, theta: &ParamStore, seq: &TokenSeq) -> Result<f64> {
        self.check_params(theta)?;
        let mut g = Graph::inference(theta);
        let lp = self.answer_log_probs(&mut g, seq)?;
        Ok(g.value(lp).sum())
    }

    /// Per-answer-token log-probabilities.
    pub fn token_log_probs(&self, theta: &ParamStore, seq: &TokenSeq) -> Result<Vec<f64>> {
        self.check_params(theta)?;
        let mut g = Graph::inference(theta);
        let lp = self.answer_log_probs(&mut g, seq)?;
        Ok(g.value(lp).data().to_vec())
    }

    /// Next-token distribution after every prefix of `tokens`, one row per
    /// position.
    pub fn next_token_probs(&self, theta: &ParamStore, tokens: &[u32]) -> Result<Tensor> {
        self.check_params(theta)?;
        let mut g = Graph::inference(theta);
        let l = self.logits(&mut g, tokens)?;
        let p = g.softmax(l);
        Ok(g.value(p).clone())
    }

    /// Appends argmax tokens (ties to the lowest id) until EOS or `max_new`
    /// tokens. Generated tokens carry the answer role.
    pub fn greedy_decode(&self, theta: &ParamStore, prompt: &TokenSeq, max_new: usize) -> Result<TokenSeq> {
        self.check_params(theta)?;
        if prompt.is_empty() {
            return Err(Error::arg("empty prompt"));
        }
        if prompt.len() + max_new > self.config.ctx_len {
            return Err(Error::arg(format!(
                "prompt {} + max_new {max_new} exceeds ctx_len {}",
                prompt.len(),
                self.config.ctx_len
            )));
        }
        let mut tokens = prompt.tokens().to_vec();
        let mut roles = prompt.roles().to_vec();
        for _ in 0..max_new {
            let mut g = Graph::inference(theta);
            let l = self.logits(&mut g, &tokens)?;
            let logits = g.value(l);
            let last = logits.row(logits.rows() - 1);
            let mut best = 0;
            for (j, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = j;
                }
            }
            tokens.push(best as u32);
            roles.push(Role::Answer);
            if best as u32 == EOS {
                break;
            }
        }
        TokenSeq::new(tokens, roles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 7, ctx_len: 8, d_model: 6, n_layers: 2, n_heads: 2, d_ff: 8, seed: 3 }
    }

    fn jitter(theta: &ParamStore, seed: u64, scale: f64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        theta.map(|x| x + rng.gen_range(-scale..scale))
    }

    fn qa(prompt: &[u32], answer: &[u32]) -> TokenSeq {
        TokenSeq::prompt(prompt.to_vec()).concat(&TokenSeq::answer(answer.to_vec())).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.d_model = 8;
        c.n_heads = 3;
        assert!(matches!(Transformer::new(c), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.vocab_size = 3;
        assert!(Transformer::new(c).is_err());
        let mut c = ModelConfig::default();
        c.ctx_len = 1;
        assert!(Transformer::new(c).is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let m1 = Transformer::new(ModelConfig { seed: 1, ..Default::default() }).unwrap();
        let m2 = Transformer::new(ModelConfig { seed: 2, ..Default::default() }).unwrap();
        let a = m1.init_params();
        assert_eq!(a, m1.init_params());
        let b = m2.init_params();
        let differ = a.values().zip(b.values()).filter(|(x, y)| x != y).count();
        let frac = differ as f64 / a.total_len() as f64;
        assert!(frac >= 0.99, "only {frac} of entries differ");
    }

    #[test]
    fn logits_shape_and_bad_inputs() {
        let m = Transformer::new(tiny()).unwrap();
        let theta = m.init_params();
        let seq = qa(&[BOS, 4, 5], &[6, EOS]);
        let l = m.forward_logits(&theta, &seq).unwrap();
        assert_eq!(l.shape(), &[5, 7]);
        assert!(m.forward_logits(&theta, &TokenSeq::prompt(vec![])).is_err());
        assert!(m.forward_logits(&theta, &TokenSeq::prompt(vec![BOS; 9])).is_err());
        let other = Transformer::new(ModelConfig { d_model: 4, ..tiny() }).unwrap();
        assert!(matches!(
            m.forward_logits(&other.init_params(), &seq),
            Err(Error::StructuralMismatch(_))
        ));
    }

    #[test]
    fn causality_future_tokens_do_not_leak() {
        let m = Transformer::new(tiny()).unwrap();
        let theta = jitter(&m.init_params(), 5, 0.5);
        let a = m.forward_logits(&theta, &TokenSeq::prompt(vec![1, 4, 5, 6, 3])).unwrap();
        let b = m.forward_logits(&theta, &TokenSeq::prompt(vec![1, 4, 6, 3, 5])).unwrap();
        for i in 0..2 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn fresh_model_is_near_max_entropy() {
        let m = Transformer::new(ModelConfig::default()).unwrap();
        let theta = m.init_params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ln_v = (64f64).ln();
        for _ in 0..100 {
            let len = rng.gen_range(2..12);
            let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(0..64)).collect();
            let p = m.next_token_probs(&theta, &toks).unwrap();
            for i in 0..p.rows() {
                let h: f64 = p.row(i).iter().map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 }).sum();
                assert!((h - ln_v).abs() < 0.2 * ln_v, "entropy {h}");
            }
        }
    }

    #[test]
    fn uniform_model_log_prob() {
        let m = Transformer::new(ModelConfig::default()).unwrap();
        let theta = m.init_params();
        let head = theta.index_of("lm_head").unwrap();
        let mut zeroed = theta.clone();
        zeroed.tensor_mut(head).data_mut().fill(0.0);
        let seq = qa(&[BOS, 10, 11], &[12, 13, EOS]);
        let lp = m.sequence_log_prob(&zeroed, &seq).unwrap();
        assert!((lp + 3.0 * (64f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_prob_requires_answer() {
        let m = Transformer::new(tiny()).unwrap();
        let theta = m.init_params();
        assert!(m.sequence_log_prob(&theta, &TokenSeq::prompt(vec![1, 2])).is_err());
    }

    #[test]
    fn log_prob_matches_product_of_softmax() {
        let m = Transformer::new(tiny()).unwrap();
        let theta = jitter(&m.init_params(), 9, 0.8);
        let seq = qa(&[BOS, 4], &[5, 6, 4, EOS]);
        let lp = m.sequence_log_prob(&theta, &seq).unwrap();
        assert!(lp <= 0.0);
        let p = m.next_token_probs(&theta, seq.tokens()).unwrap();
        let mut prod = 1.0;
        for pos in seq.answer_positions() {
            prod *= p.at(pos - 1, seq.tokens()[pos] as usize);
        }
        assert!((lp.exp() - prod).abs() / prod < 1e-10);
    }

    #[test]
    fn pads_are_excluded() {
        let m = Transformer::new(tiny()).unwrap();
        let theta = jitter(&m.init_params(), 2, 0.5);
        let base = qa(&[BOS, 4], &[5, EOS]);
        let padded = TokenSeq::new(
            vec![BOS, 4, 5, EOS, PAD, PAD],
            vec![Role::Prompt, Role::Prompt, Role::Answer, Role::Answer, Role::Pad, Role::Pad],
        )
        .unwrap();
        assert_eq!(
            m.sequence_log_prob(&theta, &base).unwrap(),
            m.sequence_log_prob(&theta, &padded).unwrap()
        );
    }

    #[test]
    fn role_layout_enforced() {
        assert!(TokenSeq::new(vec![1, 2], vec![Role::Answer, Role::Prompt]).is_err());
        assert!(TokenSeq::new(vec![1, 2], vec![Role::Pad, Role::Answer]).is_err());
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let m = Transformer::new(tiny()).unwrap();
        let theta = jitter(&m.init_params(), 4, 0.5);
        let seq = qa(&[BOS, 4, 6], &[5, EOS]);
        let mut g = Graph::new(&theta);
        let lp = m.answer_log_probs(&mut g, &seq).unwrap();
        let s = g.sum(lp);
        let analytic = g.backward(s).unwrap();
        let numeric = finite_diff_grad(|p| m.sequence_log_prob(p, &seq), &theta, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric, 1e-8).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn greedy_decode_contract() {
        let m = Transformer::new(tiny()).unwrap();
        let theta = jitter(&m.init_params(), 8, 0.6);
        let prompt = TokenSeq::prompt(vec![BOS, 4]);
        assert_eq!(m.greedy_decode(&theta, &prompt, 0).unwrap(), prompt);
        let a = m.greedy_decode(&theta, &prompt, 5).unwrap();
        assert_eq!(a, m.greedy_decode(&theta, &prompt, 5).unwrap());
        assert!(a.len() <= 7);
        assert!(m.greedy_decode(&theta, &prompt, 7).is_err());
        // Uniform logits tie everywhere: the lowest id (PAD) wins.
        let mut zeroed = theta.clone();
        let head = zeroed.index_of("lm_head").unwrap();
        zeroed.tensor_mut(head).data_mut().fill(0.0);
        let d = m.greedy_decode(&zeroed, &prompt, 2).unwrap();
        assert_eq!(&d.tokens()[2..], &[PAD, PAD]);
    }
}
