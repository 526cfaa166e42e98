//! Desk-scale frozen causal language model used as the internal LLM.

pub mod checkpoint;
pub mod model;
pub mod tokenizer;
pub mod train;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, Range, SubAssign};

use ndarray::{Array2, Axis, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

pub use model::{LMParams, Slot};
pub use tokenizer::Tokenizer;
pub use train::{train_base_lm, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use model::Grads;

/// Scalar type the model runs in: `f32` for training and serving, `f64` for
/// gradient checks.
pub trait Real:
    Float
    + ndarray::LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    /// First concept-token id.
    #[serde(default = "default_concept_base")]
    pub concept_base: usize,
    /// Number of reserved concept-token ids.
    #[serde(default = "default_concept_slots")]
    pub concept_slots: usize,
}

fn default_concept_base() -> usize {
    tokenizer::CONCEPT_BASE as usize
}

fn default_concept_slots() -> usize {
    10
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 128,
            heads: 4,
            context_len: 512,
            vocab_size: 0,
            concept_base: default_concept_base(),
            concept_slots: default_concept_slots(),
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.context_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("context_len and vocab_size must be positive".into()));
        }
        if self.concept_slots > 0 && self.concept_base + self.concept_slots > self.vocab_size {
            return Err(Error::Config("concept ids fall outside the vocabulary".into()));
        }
        Ok(())
    }
}

/// A trained backbone together with the tokenizer it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalLm {
    pub tokenizer: Tokenizer,
    pub params: LMParams<f32>,
}

impl InternalLm {
    pub fn new(tokenizer: Tokenizer, params: LMParams<f32>) -> Result<Self> {
        if tokenizer.vocab_size() != params.config.vocab_size
            || tokenizer.concept_slots() != params.config.concept_slots
        {
            return Err(Error::Config("tokenizer does not match model config".into()));
        }
        Ok(Self { tokenizer, params })
    }

    pub fn config(&self) -> &LMConfig {
        &self.params.config
    }
}

/// The learnable `c x d` concept embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPromptEmbeddings<F> {
    pub matrix: Array2<F>,
}

impl<F: Real> SoftPromptEmbeddings<F> {
    pub fn new(matrix: Array2<F>) -> Self {
        Self { matrix }
    }

    pub fn count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().all(|x| x.is_finite())
    }

    fn as_option(&self) -> Option<&Array2<F>> {
        Some(&self.matrix).filter(|m| m.nrows() > 0)
    }
}

fn prefixed(c: usize, tokens: &[u32]) -> Vec<Slot> {
    (0..c)
        .map(Slot::Soft)
        .chain(tokens.iter().map(|&t| Slot::Token(t)))
        .collect()
}

/// Predicting-position/target pairs for `span` of `tokens` placed after `c`
/// soft positions.
fn span_targets(c: usize, tokens: &[u32], span: &Range<usize>) -> Result<Vec<(usize, u32)>> {
    if span.end > tokens.len() {
        return Err(Error::Config(format!(
            "span {span:?} outside {} tokens",
            tokens.len()
        )));
    }
    if !span.is_empty() && c + span.start == 0 {
        return Err(Error::Config("the first position has no context to predict it".into()));
    }
    Ok(span.clone().map(|i| (c + i - 1, tokens[i])).collect())
}

/// Exact log-probabilities of each token in `span` given everything before
/// it; the soft prefix, when present, occupies the first `c` positions.
pub fn log_prob<F: Real>(
    params: &LMParams<F>,
    soft_prefix: Option<&SoftPromptEmbeddings<F>>,
    tokens: &[u32],
    span: Range<usize>,
) -> Result<Vec<F>> {
    let soft = soft_prefix.and_then(SoftPromptEmbeddings::as_option);
    let c = soft.map_or(0, |s| s.nrows());
    let slots = prefixed(c, tokens);
    let targets = span_targets(c, tokens, &span)?;
    let trace = model::forward(params, &slots, soft)?;
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let lg = model::logits(params, soft, trace.hidden.select(Axis(0), &rows).view());
    Ok(targets
        .iter()
        .enumerate()
        .map(|(r, &(_, t))| model::log_softmax(lg.row(r))[t as usize])
        .collect())
}

/// Gradient of `-sum log P(span)` with respect to the soft prompt only.
pub fn grad_soft_prompt<F: Real>(
    params: &LMParams<F>,
    soft: &SoftPromptEmbeddings<F>,
    tokens: &[u32],
    target_span: Range<usize>,
) -> Result<Array2<F>> {
    Ok(nll_and_soft_grad(params, soft, tokens, target_span)?.1)
}

/// Summed gradient over a batch of `(tokens, span)` sequences.
pub fn grad_soft_prompt_batch<F: Real>(
    params: &LMParams<F>,
    soft: &SoftPromptEmbeddings<F>,
    batch: &[(Vec<u32>, Range<usize>)],
) -> Result<Array2<F>> {
    let mut total = Array2::zeros(soft.matrix.raw_dim());
    for (tokens, span) in batch {
        total += &grad_soft_prompt(params, soft, tokens, span.clone())?;
    }
    Ok(total)
}

/// NLL over the span and its soft-prompt gradient, in one pass.
pub fn nll_and_soft_grad<F: Real>(
    params: &LMParams<F>,
    soft: &SoftPromptEmbeddings<F>,
    tokens: &[u32],
    target_span: Range<usize>,
) -> Result<(F, Array2<F>)> {
    let c = soft.count();
    let targets = span_targets(c, tokens, &target_span)?;
    let mut grads = Grads {
        params: None,
        soft: Some(Array2::zeros(soft.matrix.raw_dim())),
    };
    let loss = model::nll(params, soft.as_option(), &prefixed(c, tokens), &targets, Some(&mut grads))?;
    let g = grads.soft.unwrap();
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence("soft prompt gradient".into()));
    }
    Ok((loss, g))
}

/// Greedy decoding; ties go to the lowest id. Stops after `max_new` tokens
/// or once `eos` is produced (which is included in the output).
pub fn generate<F: Real>(
    params: &LMParams<F>,
    soft_prefix: Option<&SoftPromptEmbeddings<F>>,
    prompt_tokens: &[u32],
    max_new: usize,
    eos: u32,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    let soft = soft_prefix.and_then(SoftPromptEmbeddings::as_option);
    let c = soft.map_or(0, |s| s.nrows());
    let mut slots = prefixed(c, prompt_tokens);
    let mut out = Vec::new();
    for _ in 0..max_new {
        if slots.is_empty() {
            return Err(Error::Config("cannot generate from an empty context".into()));
        }
        let trace = model::forward(params, &slots, soft)?;
        let last = trace.hidden.slice(ndarray::s![slots.len() - 1.., ..]);
        let lg = model::logits(params, soft, last);
        let mut best = 0usize;
        for (i, &v) in lg.row(0).iter().enumerate() {
            if v > lg[[0, best]] {
                best = i;
            }
        }
        out.push(best as u32);
        if best as u32 == eos {
            break;
        }
        slots.push(Slot::Token(best as u32));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(layers: usize, d: usize, heads: usize, vocab: usize, slots: usize, seed: u64) -> LMParams<f64> {
        let cfg = LMConfig {
            layers,
            model_dim: d,
            heads,
            context_len: 24,
            vocab_size: vocab,
            concept_base: 4,
            concept_slots: slots,
        };
        let mut p = LMParams::<f64>::init(cfg, seed).unwrap();
        // Larger weights than the training init so gradients are not tiny.
        let mut rng = crate::seed::rng(seed ^ 0xabc);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x += rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    #[test]
    fn zero_logits_give_uniform_log_probs() {
        let cfg = LMConfig {
            layers: 1,
            model_dim: 4,
            heads: 2,
            context_len: 8,
            vocab_size: 4,
            concept_base: 4,
            concept_slots: 0,
        };
        let p = LMParams::<f64>::zeros(cfg);
        let lp = log_prob(&p, None, &[1, 2, 3, 0], 1..4).unwrap();
        for v in lp {
            assert!((v - (0.25f64).ln()).abs() < 1e-12);
            assert!((v + 1.3863).abs() < 1e-4);
        }
        assert!(log_prob(&p, None, &[1, 2], 1..1).unwrap().is_empty());
        // Ties resolve to the lowest id.
        assert_eq!(generate(&p, None, &[1, 2], 3, 99).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn hand_computed_two_token_model() {
        // Blocks with zero weights pass the embedding through unchanged, so
        // logits = layernorm(wte[t] + wpe[i]) . wte^T.
        let cfg = LMConfig {
            layers: 1,
            model_dim: 2,
            heads: 1,
            context_len: 4,
            vocab_size: 2,
            concept_base: 4,
            concept_slots: 0,
        };
        let mut p = LMParams::<f64>::zeros(cfg);
        p.wte = ndarray::arr2(&[[1.0, -1.0], [0.5, 2.0]]);
        p.wpe = ndarray::arr2(&[[0.0, 0.0], [0.3, 0.1], [0.0, 0.0], [0.0, 0.0]]);
        p.lnf_g = Array1::from(vec![1.0, 1.0]);
        p.blocks[0].ln1_g.fill(1.0);
        p.blocks[0].ln2_g.fill(1.0);
        let lp = log_prob(&p, None, &[0, 1, 0], 1..3).unwrap();

        // By hand: a 2-vector [a, b] normalizes to [s, -s] with
        // s = ((a-b)/2) / sqrt(((a-b)/2)^2 + eps).
        let norm = |a: f64, b: f64| {
            let h = (a - b) / 2.0;
            let s = h / (h * h + 1e-5).sqrt();
            [s, -s]
        };
        let h0 = norm(1.0, -1.0); // token 0 at position 0
        let h1 = norm(0.5 + 0.3, 2.0 + 0.1); // token 1 at position 1
        let lsm = |h: [f64; 2], target: usize| {
            let z = [h[0] * 1.0 + h[1] * -1.0, h[0] * 0.5 + h[1] * 2.0];
            let lse = (z[0].exp() + z[1].exp()).ln();
            z[target] - lse
        };
        assert!((lp[0] - lsm(h0, 1)).abs() < 1e-12);
        assert!((lp[1] - lsm(h1, 0)).abs() < 1e-12);
    }

    #[test]
    fn distributions_are_normalized() {
        let p = tiny(2, 8, 2, 9, 2, 5);
        let trace = model::forward(&p, &prefixed(0, &[1, 4, 7, 8, 2]), None).unwrap();
        let lg = model::logits(&p, None, trace.hidden.view());
        for row in lg.rows() {
            let lp = model::log_softmax(row);
            assert!(lp.iter().all(|&v| v <= 0.0));
            let total: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn context_overflow_is_an_error() {
        let p = tiny(1, 4, 1, 8, 2, 1);
        let tokens = vec![5u32; 25];
        assert!(matches!(log_prob(&p, None, &tokens, 1..3), Err(Error::ContextOverflow { .. })));
        let soft = SoftPromptEmbeddings::new(Array2::zeros((2, 4)));
        let tokens = vec![5u32; 23];
        assert!(matches!(log_prob(&p, Some(&soft), &tokens, 1..3), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn empty_span_has_zero_gradient() {
        let p = tiny(1, 4, 2, 8, 2, 1);
        let soft = SoftPromptEmbeddings::new(Array2::from_elem((2, 4), 0.3));
        let g = grad_soft_prompt(&p, &soft, &[1, 5, 6], 2..2).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn duplicated_batch_doubles_gradient() {
        let p = tiny(2, 8, 2, 10, 3, 2);
        let soft = SoftPromptEmbeddings::new(Array2::from_shape_fn((3, 8), |(i, j)| (i as f64 - j as f64) * 0.1));
        let seq = (vec![1u32, 7, 8, 9, 2], 2..5);
        let one = grad_soft_prompt_batch(&p, &soft, &[seq.clone()]).unwrap();
        let two = grad_soft_prompt_batch(&p, &soft, &[seq.clone(), seq]).unwrap();
        assert_eq!(two, &one * 2.0);
    }

    #[test]
    fn soft_gradient_matches_finite_differences() {
        let g = fd_check(2, 8, 2, 11, 3, 17);
        assert!(g < 1e-4, "max relative error {g}");
    }

    /// Max elementwise relative error between the analytic soft-prompt
    /// gradient and central differences.
    pub(crate) fn fd_check(layers: usize, d: usize, heads: usize, vocab: usize, c: usize, seed: u64) -> f64 {
        let p = tiny(layers, d, heads, vocab, c, seed);
        let mut rng = crate::seed::rng(seed);
        let soft = SoftPromptEmbeddings::new(Array2::from_shape_fn((c, d), |_| rng.gen_range(-1.0..1.0)));
        let len = rng.gen_range(3..8);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let start = rng.gen_range(0..len - 1);
        let span = start..len;
        let analytic = grad_soft_prompt(&p, &soft, &tokens, span.clone()).unwrap();
        let loss = |s: &SoftPromptEmbeddings<f64>| -> f64 {
            -log_prob(&p, Some(s), &tokens, span.clone()).unwrap().iter().sum::<f64>()
        };
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..c {
            for j in 0..d {
                let mut plus = soft.clone();
                plus.matrix[[i, j]] += h;
                let mut minus = soft.clone();
                minus.matrix[[i, j]] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic[[i, j]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        for seed in 0..4u64 {
            let p = tiny(2, 8, 2, 11, 2, seed);
            let mut rng = crate::seed::rng(seed + 100);
            let soft = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));
            let slots: Vec<Slot> = [Slot::Soft(0), Slot::Soft(1)]
                .into_iter()
                .chain((0..5).map(|_| Slot::Token(rng.gen_range(0..11))))
                .collect();
            let targets: Vec<(usize, u32)> = (1..7).map(|i| (i, rng.gen_range(0..11u32))).collect();
            let mut g = Grads {
                params: Some(LMParams::zeros(p.config)),
                soft: None,
            };
            model::nll(&p, Some(&soft), &slots, &targets, Some(&mut g)).unwrap();
            let analytic = g.params.unwrap();
            let loss = |q: &LMParams<f64>| model::nll(q, Some(&soft), &slots, &targets, None).unwrap();
            let h = 1e-5;
            for (ti, t) in analytic.tensors().iter().enumerate() {
                for _ in 0..6 {
                    let i = rng.gen_range(0..t.len());
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti][i] += h;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti][i] -= h;
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let diff = (t[i] - numeric).abs();
                    let err = diff / t[i].abs().max(numeric.abs()).max(1e-6);
                    assert!(err < 1e-4 || diff < 1e-8, "tensor {ti} entry {i}: {} vs {numeric}", t[i]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn causal(seed in 0u64..1000, tail in prop::collection::vec(0u32..9, 1..4)) {
            let p = tiny(2, 8, 2, 9, 2, seed);
            let soft = SoftPromptEmbeddings::new(Array2::from_elem((2, 8), 0.2));
            let head = [1u32, 5, 6, 7];
            let mut a = head.to_vec();
            a.extend([8, 8, 8]);
            let mut b = head.to_vec();
            b.extend(&tail);
            let la = log_prob(&p, Some(&soft), &a, 0..4).unwrap();
            let lb = log_prob(&p, Some(&soft), &b, 0..4).unwrap();
            for (x, y) in la.iter().zip(&lb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
