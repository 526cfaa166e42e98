//! Latent-concept learning, likelihood scoring and demonstration candidates.
//!
//! A concept is a `c x d` soft prompt trained against the frozen internal LM
//! to predict the answers of training instances. Each training example is
//! then scored by how probable the concept tokens are when appended to it,
//! and the top of that ranking becomes the candidate pool for demonstrations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use log::info;
use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{QuerySource, TrainingInstance};
use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::lm::checkpoint::{self, Container, FINGERPRINT};
use crate::lm::model::{self, Slot};
use crate::lm::tokenizer::BOS;
use crate::lm::{self, InternalLm, LMConfig, SoftPromptEmbeddings};
use crate::seed;
use crate::serialize::{
    answered_block, build_training_sequence, serialize_record, with_answer, RenderOptions,
    SerializedExample, Template,
};

pub const CONCEPT_SECTION: [u8; 4] = *b"CNPT";
pub const CONFIG_SECTION: [u8; 4] = *b"CCFG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptMode {
    /// Train on original and augmented queries.
    Fair,
    /// Train on original queries only.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTrainConfig {
    pub c: usize,
    pub lr: f64,
    pub epochs: usize,
    pub q: usize,
    pub seed: u64,
    pub mode: ConceptMode,
}

impl Default for ConceptTrainConfig {
    fn default() -> Self {
        Self {
            c: 10,
            lr: 1e-4,
            epochs: 5,
            q: 2,
            seed: 0,
            mode: ConceptMode::Fair,
        }
    }
}

impl ConceptTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(Error::Config("concept token count c must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("concept epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptState {
    pub embeddings: SoftPromptEmbeddings<f32>,
    /// Mean per-instance NLL of each completed epoch.
    pub history: Vec<f64>,
    pub config: ConceptTrainConfig,
    pub fingerprint: String,
}

impl ConceptState {
    pub fn c(&self) -> usize {
        self.embeddings.count()
    }
}

/// Everything needed to turn a training instance into text.
#[derive(Debug, Clone, Copy)]
pub struct ConceptCorpus<'a> {
    pub d: &'a Dataset,
    pub d_tilde: &'a Dataset,
    pub template: &'a Template,
    pub instruction: &'a str,
}

fn answered(d: &Dataset, t: &Template, r: &Record) -> Result<SerializedExample> {
    let ex = serialize_record(r, &d.schema, t, RenderOptions::default())?;
    Ok(with_answer(ex, d.is_positive(r)))
}

fn lookup(d: &Dataset, id: u64) -> Result<&Record> {
    d.by_id(id)
        .ok_or_else(|| Error::Config(format!("record {id} not found in {} data", d.provenance.as_str())))
}

/// Tokenized `<bos> prompt answer` and the token range of the answer.
fn encode_instance(lm: &InternalLm, corpus: &ConceptCorpus, inst: &TrainingInstance) -> Result<(Vec<u32>, Range<usize>)> {
    let demos = inst
        .demo_ids
        .iter()
        .map(|&id| answered(corpus.d, corpus.template, lookup(corpus.d, id)?))
        .collect::<Result<Vec<_>>>()?;
    let source = match inst.query_source {
        QuerySource::Original => corpus.d,
        QuerySource::Augmented => corpus.d_tilde,
    };
    let r = lookup(source, inst.query_id)?;
    let query = serialize_record(r, &source.schema, corpus.template, RenderOptions::default())?;
    let seq = build_training_sequence(corpus.instruction, &demos, &query, source.is_positive(r))?;
    let (body, span) = lm.tokenizer.encode_span(&seq.text, seq.target);
    let mut tokens = Vec::with_capacity(body.len() + 1);
    tokens.push(BOS);
    tokens.extend(body);
    Ok((tokens, span.start + 1..span.end + 1))
}

/// Soft-prompt rows initialized from the embeddings of uniformly drawn
/// vocabulary words.
pub fn init_embeddings(lm: &InternalLm, c: usize, seed: u64) -> Result<SoftPromptEmbeddings<f32>> {
    let words = lm.tokenizer.word_ids();
    if words.is_empty() {
        return Err(Error::Config("vocabulary has no ordinary tokens".into()));
    }
    let mut rng = seed::rng_for(seed, &[seed::tag("concept-init")]);
    let mut m = Array2::zeros((c, lm.config().model_dim));
    for mut row in m.rows_mut() {
        let id = rng.gen_range(words.clone());
        row.assign(&lm.params.wte.row(id as usize));
    }
    Ok(SoftPromptEmbeddings::new(m))
}

/// Train the concept by plain gradient descent, one instance per step, in an
/// order reshuffled every epoch. `on_epoch` sees the state after each epoch.
///
/// Plain mode drops instances whose query is synthetic. The backbone is only
/// read.
pub fn learn_concept(
    lm: &InternalLm,
    corpus: &ConceptCorpus,
    mixture: &[TrainingInstance],
    cfg: &ConceptTrainConfig,
    mut on_epoch: impl FnMut(usize, &ConceptState) -> Result<()>,
) -> Result<ConceptState> {
    if cfg.c == 0 || cfg.epochs == 0 {
        return Err(Error::Config("concept training needs c >= 1 and epochs >= 1".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("invalid learning rate {}", cfg.lr)));
    }
    if cfg.c > lm.config().concept_slots {
        return Err(Error::Config(format!(
            "c = {} exceeds the {} reserved concept slots",
            cfg.c,
            lm.config().concept_slots
        )));
    }
    let instances: Vec<&TrainingInstance> = mixture
        .iter()
        .filter(|i| cfg.mode == ConceptMode::Fair || i.query_source == QuerySource::Original)
        .collect();
    if instances.is_empty() {
        return Err(Error::Config("no training instances for concept learning".into()));
    }
    let encoded = instances
        .par_iter()
        .map(|i| encode_instance(lm, corpus, i))
        .collect::<Result<Vec<_>>>()?;
    let longest = encoded.iter().map(|(t, _)| t.len() + cfg.c).max().unwrap_or(0);
    if longest > lm.config().context_len {
        return Err(Error::ContextOverflow {
            needed: longest,
            context_len: lm.config().context_len,
        });
    }

    let mut state = ConceptState {
        embeddings: init_embeddings(lm, cfg.c, cfg.seed)?,
        history: Vec::with_capacity(cfg.epochs),
        config: cfg.clone(),
        fingerprint: String::new(),
    };
    let lr = cfg.lr as f32;
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng_for(cfg.seed, &[seed::tag("concept-epoch"), epoch as u64]);
        let order = seed::sample_indices(&mut rng, encoded.len(), encoded.len());
        let mut total = 0.0f64;
        for i in order {
            let (tokens, span) = &encoded[i];
            let (loss, grad) = lm::nll_and_soft_grad(&lm.params, &state.embeddings, tokens, span.clone())?;
            total += loss as f64;
            state.embeddings.matrix.scaled_add(-lr, &grad);
        }
        let mean = total / encoded.len() as f64;
        if !mean.is_finite() || !state.embeddings.is_finite() {
            return Err(Error::Divergence(format!("concept training at epoch {}", epoch + 1)));
        }
        info!("concept epoch {}: mean NLL {mean:.5}", epoch + 1);
        state.history.push(mean);
        on_epoch(epoch, &state)?;
    }
    Ok(state)
}

/// What precedes the concept tokens when scoring an example.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "instruction")]
pub enum ScoringContext {
    /// The answered example alone.
    #[default]
    Answered,
    /// The answered example after an instruction line.
    Instructed(String),
}

fn scoring_text(ex: &SerializedExample, ctx: &ScoringContext) -> Result<String> {
    let block = answered_block(ex)?;
    Ok(match ctx {
        ScoringContext::Answered => block,
        ScoringContext::Instructed(inst) => format!("### Instruction: {inst}\n\n{block}"),
    })
}

/// Log-probability of the concept tokens appended after `tokens`: the sum over
/// concept position `j` of the log-softmax mass on reserved id `j`, whose
/// output row is the concept's own embedding.
pub fn score_tokens(lm: &InternalLm, state: &ConceptState, tokens: &[u32]) -> Result<f64> {
    let c = state.c();
    if c == 0 {
        return Ok(0.0);
    }
    let soft = &state.embeddings.matrix;
    let slots: Vec<Slot> = tokens
        .iter()
        .map(|&t| Slot::Token(t))
        .chain((0..c).map(Slot::Soft))
        .collect();
    let trace = model::forward(&lm.params, &slots, Some(soft))?;
    let base = tokens.len();
    let hidden = trace.hidden.slice(ndarray::s![base - 1..base - 1 + c, ..]);
    let lg = model::logits(&lm.params, Some(soft), hidden);
    let concept_base = lm.config().concept_base;
    Ok((0..c)
        .map(|j| model::log_softmax(lg.row(j))[concept_base + j] as f64)
        .sum())
}

pub fn score_example(
    lm: &InternalLm,
    state: &ConceptState,
    example: &SerializedExample,
    ctx: &ScoringContext,
) -> Result<f64> {
    let mut tokens = vec![BOS];
    tokens.extend(lm.tokenizer.encode(&scoring_text(example, ctx)?));
    score_tokens(lm, state, &tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodScore {
    pub id: u64,
    pub score: f64,
}

/// Score every record of `d` in parallel.
pub fn score_dataset(
    lm: &InternalLm,
    state: &ConceptState,
    d: &Dataset,
    template: &Template,
    ctx: &ScoringContext,
) -> Result<Vec<LikelihoodScore>> {
    d.records
        .par_iter()
        .map(|r| {
            let ex = answered(d, template, r)?;
            Ok(LikelihoodScore {
                id: r.id,
                score: score_example(lm, state, &ex, ctx)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub m: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { m: 100, k: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Top-`m` ids, best first.
    pub candidates: Vec<u64>,
    /// Per query id, `k` candidate ids in draw order.
    pub demos: BTreeMap<u64, Vec<u64>>,
}

/// Ids sorted by descending score, ties by ascending id.
pub fn ranking(scores: &[LikelihoodScore]) -> Result<Vec<u64>> {
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Divergence(format!("score of record {} is {}", s.id, s.score)));
    }
    let unique: BTreeSet<u64> = scores.iter().map(|s| s.id).collect();
    if unique.len() != scores.len() {
        return Err(Error::Config("duplicate record ids among scores".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    Ok(sorted.into_iter().map(|s| s.id).collect())
}

/// Keep the top `m` and give each query `k` of them, drawn uniformly without
/// replacement with a generator seeded by `(cfg.seed, query id)`.
pub fn rank_and_select(scores: &[LikelihoodScore], cfg: &SelectionConfig, query_ids: &[u64]) -> Result<Selection> {
    if cfg.k > cfg.m {
        return Err(Error::Config(format!("k = {} exceeds m = {}", cfg.k, cfg.m)));
    }
    if cfg.m > scores.len() {
        return Err(Error::Config(format!(
            "m = {} exceeds the {} scored examples",
            cfg.m,
            scores.len()
        )));
    }
    let mut candidates = ranking(scores)?;
    candidates.truncate(cfg.m);
    let demos = query_ids
        .iter()
        .map(|&q| {
            let mut rng = seed::rng_for(cfg.seed, &[q]);
            let picked = seed::sample_indices(&mut rng, candidates.len(), cfg.k)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            (q, picked)
        })
        .collect();
    Ok(Selection { candidates, demos })
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[LikelihoodScore], comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    if let Some(c) = comment {
        out.push('#');
        out.push_str(c);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "score"])?;
    for s in scores {
        // `{:?}` on f64 prints the shortest string that round-trips.
        w.write_record([s.id.to_string(), format!("{:?}", s.score)])?;
    }
    let body = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<LikelihoodScore>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let parse_err = || Error::Checkpoint(format!("malformed score row in {}", path.display()));
        let id = row.get(0).and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        let score = row.get(1).and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
        out.push(LikelihoodScore { id, score });
    }
    Ok(out)
}

/// Concept checkpoint: the model config header, a `CNPT` section
/// (`c` u32, `d` u32, matrix f32, history count u32, history f64), the
/// training config as JSON and the fingerprint.
pub fn save_concept(path: impl AsRef<Path>, state: &ConceptState, lm_config: LMConfig) -> Result<()> {
    let m = &state.embeddings.matrix;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    payload.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    payload.extend(checkpoint::f32s_to_bytes(m.iter().copied()));
    payload.extend_from_slice(&(state.history.len() as u32).to_le_bytes());
    for h in &state.history {
        payload.extend_from_slice(&h.to_le_bytes());
    }
    let mut c = Container::new(lm_config);
    c.push(CONCEPT_SECTION, payload);
    c.push(CONFIG_SECTION, serde_json::to_vec(&state.config)?);
    c.push(FINGERPRINT, state.fingerprint.as_bytes().to_vec());
    c.write(path)
}

pub fn load_concept(path: impl AsRef<Path>) -> Result<(ConceptState, LMConfig)> {
    let c = Container::read(path)?;
    let p = c.require(CONCEPT_SECTION)?;
    let bad = || Error::Checkpoint("malformed concept section".into());
    let u32_at = |at: usize| -> Result<usize> {
        Ok(u32::from_le_bytes(p.get(at..at + 4).ok_or_else(bad)?.try_into().unwrap()) as usize)
    };
    let (rows, cols) = (u32_at(0)?, u32_at(4)?);
    let mat_end = 8 + rows * cols * 4;
    let values = checkpoint::bytes_to_f32s(p.get(8..mat_end).ok_or_else(bad)?)?;
    let n = u32_at(mat_end)?;
    let hist_bytes = p.get(mat_end + 4..).ok_or_else(bad)?;
    if hist_bytes.len() != n * 8 {
        return Err(bad());
    }
    let history = hist_bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let matrix = Array2::from_shape_vec((rows, cols), values).map_err(|_| bad())?;
    let config = serde_json::from_slice(c.require(CONFIG_SECTION)?)?;
    Ok((
        ConceptState {
            embeddings: SoftPromptEmbeddings::new(matrix),
            history,
            config,
            fingerprint: c.fingerprint().unwrap_or_default(),
        },
        c.config,
    ))
}
