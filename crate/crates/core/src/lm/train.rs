//! Pre-training of the frozen backbone on a text corpus.

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{self, Grads, LMParams, Slot};
use super::tokenizer::{Tokenizer, BOS, EOS};
use super::LMConfig;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of documents held out to measure NLL (at least one).
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_holdout() -> f64 {
    0.05
}

fn default_clip() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 4,
            batch: 16,
            seed: 0,
            holdout: default_holdout(),
            clip_norm: default_clip(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token NLL on the held-out documents before training.
    pub initial_holdout_nll: f64,
    pub final_holdout_nll: f64,
    /// Mean per-token training NLL for each epoch.
    pub epoch_nll: Vec<f64>,
}

/// A document as model input: `<bos> text <eos>`, every token after `<bos>`
/// a target.
fn document(tok: &Tokenizer, text: &str) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(tok.encode(text));
    ids.push(EOS);
    ids
}

fn doc_loss(p: &LMParams<f32>, ids: &[u32], grads: Option<&mut Grads<f32>>) -> Result<f32> {
    let slots: Vec<Slot> = ids.iter().map(|&t| Slot::Token(t)).collect();
    let targets: Vec<(usize, u32)> = (1..ids.len()).map(|i| (i - 1, ids[i])).collect();
    model::nll(p, None, &slots, &targets, grads)
}

/// Mean per-token NLL over `docs`.
pub fn mean_nll(p: &LMParams<f32>, docs: &[Vec<u32>]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = docs
        .par_iter()
        .map(|d| doc_loss(p, d, None).map(|l| (l as f64, d.len() - 1)))
        .collect::<Result<_>>()?;
    let (loss, n) = parts
        .iter()
        .fold((0.0, 0usize), |(l, n), (a, b)| (l + a, n + b));
    Ok(if n == 0 { 0.0 } else { loss / n as f64 })
}

struct Adam {
    m: LMParams<f32>,
    v: LMParams<f32>,
    step: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(cfg: LMConfig) -> Self {
        Self {
            m: LMParams::zeros(cfg),
            v: LMParams::zeros(cfg),
            step: 0,
        }
    }

    fn update(&mut self, p: &mut LMParams<f32>, g: &LMParams<f32>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        for (((w, g), m), v) in p
            .tensors_mut()
            .into_iter()
            .zip(g.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..w.len() {
                let gi = g[i] as f64;
                let mi = Self::B1 * m[i] as f64 + (1.0 - Self::B1) * gi;
                let vi = Self::B2 * v[i] as f64 + (1.0 - Self::B2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + Self::EPS);
                w[i] = (w[i] as f64 - upd) as f32;
            }
        }
    }
}

/// Train the backbone from scratch with Adam on next-token NLL.
///
/// Batches are processed in parallel, but per-document gradients are summed
/// in a fixed order so results depend only on the seed.
pub fn train_base_lm(
    corpus: &[String],
    tok: &Tokenizer,
    cfg: LMConfig,
    train: &TrainConfig,
) -> Result<(LMParams<f32>, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if cfg.vocab_size != tok.vocab_size() || cfg.concept_slots != tok.concept_slots() {
        return Err(Error::Config(format!(
            "config vocab {} / {} concept slots disagrees with tokenizer {} / {}",
            cfg.vocab_size,
            cfg.concept_slots,
            tok.vocab_size(),
            tok.concept_slots()
        )));
    }
    let docs: Vec<Vec<u32>> = corpus.iter().map(|t| document(tok, t)).collect();
    if let Some(long) = docs.iter().map(Vec::len).max().filter(|&n| n > cfg.context_len) {
        return Err(Error::ContextOverflow {
            needed: long,
            context_len: cfg.context_len,
        });
    }
    let holdout_n = ((docs.len() as f64 * train.holdout).round() as usize).clamp(1, docs.len());
    let holdout: Vec<Vec<u32>> = docs[docs.len() - holdout_n..].to_vec();
    // A corpus too small to split trains on everything.
    let train_docs: Vec<Vec<u32>> = if docs.len() > holdout_n {
        docs[..docs.len() - holdout_n].to_vec()
    } else {
        docs.clone()
    };

    let mut params = LMParams::<f32>::init(cfg, seed::derive(train.seed, &[seed::tag("init")]))?;
    let initial = mean_nll(&params, &holdout)?;
    info!("base LM: {} train docs, holdout NLL {initial:.4}", train_docs.len());
    let mut adam = Adam::new(cfg);
    let mut epoch_nll = Vec::with_capacity(train.epochs);
    let batch = train.batch.max(1);

    for epoch in 0..train.epochs {
        let mut rng = seed::rng_for(train.seed, &[seed::tag("epoch"), epoch as u64]);
        let order = seed::sample_indices(&mut rng, train_docs.len(), train_docs.len());
        let mut total = 0.0f64;
        let mut count = 0usize;
        for chunk in order.chunks(batch) {
            let parts: Vec<(f32, LMParams<f32>)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut g = Grads {
                        params: Some(LMParams::zeros(cfg)),
                        soft: None,
                    };
                    let loss = doc_loss(&params, &train_docs[i], Some(&mut g))?;
                    Ok((loss, g.params.unwrap()))
                })
                .collect::<Result<_>>()?;
            let tokens: usize = chunk.iter().map(|&i| train_docs[i].len() - 1).sum();
            let mut sum = LMParams::<f32>::zeros(cfg);
            for (loss, g) in &parts {
                total += *loss as f64;
                sum.add_assign(g);
            }
            count += tokens;
            let scale = 1.0 / tokens.max(1) as f32;
            let mut norm2 = 0.0f64;
            for t in sum.tensors_mut() {
                for x in t.iter_mut() {
                    *x *= scale;
                    norm2 += (*x as f64) * (*x as f64);
                }
            }
            if !norm2.is_finite() {
                return Err(Error::Divergence(format!("gradient norm at epoch {epoch}")));
            }
            let norm = norm2.sqrt();
            if norm > train.clip_norm {
                let s = (train.clip_norm / norm) as f32;
                for t in sum.tensors_mut() {
                    t.iter_mut().for_each(|x| *x *= s);
                }
            }
            adam.update(&mut params, &sum, train.lr);
        }
        let mean = total / count.max(1) as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(Error::Divergence(format!("training loss at epoch {epoch}")));
        }
        info!("base LM epoch {}: train NLL {mean:.4}", epoch + 1);
        epoch_nll.push(mean);
    }
    let final_holdout_nll = mean_nll(&params, &holdout)?;
    Ok((
        params,
        TrainReport {
            initial_holdout_nll: initial,
            final_holdout_nll,
            epoch_nll,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(tok: &Tokenizer) -> LMConfig {
        LMConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            context_len: 32,
            vocab_size: tok.vocab_size(),
            concept_base: 4,
            concept_slots: tok.concept_slots(),
        }
    }

    #[test]
    fn memorizes_a_repeated_sentence() {
        let sentence = "the cat sat on the mat .";
        let corpus: Vec<String> = vec![sentence.to_string(); 40];
        let tok = Tokenizer::build(corpus.iter().map(String::as_str), 2);
        let cfg = small(&tok);
        let train = TrainConfig {
            lr: 1e-2,
            epochs: 6,
            batch: 4,
            seed: 3,
            ..Default::default()
        };
        let (params, report) = train_base_lm(&corpus, &tok, cfg, &train).unwrap();
        assert!(report.final_holdout_nll < 0.05, "{report:?}");
        assert!(report.final_holdout_nll < report.initial_holdout_nll);

        // Greedy continuation of the prefix completes the sentence.
        let mut prompt = vec![BOS];
        prompt.extend(tok.encode("the cat"));
        let out = super::super::generate(&params, None, &prompt, 8, EOS).unwrap();
        assert_eq!(tok.decode(&out), " sat on the mat .<eos>");

        let (again, _) = train_base_lm(&corpus, &tok, cfg, &train).unwrap();
        assert_eq!(params, again);
    }

    #[test]
    fn rejects_empty_corpus_and_overflow() {
        let tok = Tokenizer::build(["a b c"], 0);
        let cfg = small(&tok);
        assert!(train_base_lm(&[], &tok, cfg, &TrainConfig::default()).is_err());
        let long = vec!["a b c ".repeat(20)];
        assert!(matches!(
            train_base_lm(&long, &tok, cfg, &TrainConfig::default()),
            Err(Error::ContextOverflow { .. })
        ));
    }
}

