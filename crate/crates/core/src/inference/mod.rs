//! Demonstration strategies, prompt assembly and prediction.

pub mod client;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use client::{ExternalClient, ExternalClientConfig};

use crate::concept::{rank_and_select, ConceptState, LikelihoodScore, Selection, SelectionConfig};
use crate::data::{Dataset, Group, Record, Value};
use crate::error::{Error, Result};
use crate::lm::tokenizer::{BOS, EOS};
use crate::lm::{self, InternalLm};
use crate::seed;
use crate::serialize::{build_icl_prompt, parse_answer, serialize_record, with_answer, ParsedAnswer, PromptSpec, RenderOptions, Template};

/// Added in front of the task instruction by the instruction strategy.
pub const FAIRNESS_INSTRUCTION: &str =
    "Treat all individuals equally regardless of gender. Your answer must not depend on the person's sex.";

/// Tokens generated by the internal model per query.
pub const MAX_NEW_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    Balanced,
    Counterfactual,
    Removal,
    Instruction,
    LatentConcept,
    Fairicl,
    FairiclR,
    FairiclLc,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 9] = [
        StrategyKind::Random,
        StrategyKind::Balanced,
        StrategyKind::Counterfactual,
        StrategyKind::Removal,
        StrategyKind::Instruction,
        StrategyKind::LatentConcept,
        StrategyKind::Fairicl,
        StrategyKind::FairiclR,
        StrategyKind::FairiclLc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Balanced => "balanced",
            StrategyKind::Counterfactual => "counterfactual",
            StrategyKind::Removal => "removal",
            StrategyKind::Instruction => "instruction",
            StrategyKind::LatentConcept => "latent_concept",
            StrategyKind::Fairicl => "fairicl",
            StrategyKind::FairiclR => "fairicl_r",
            StrategyKind::FairiclLc => "fairicl_lc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }

    /// Demonstrations come from a concept ranking.
    pub fn uses_ranking(self) -> bool {
        matches!(
            self,
            StrategyKind::LatentConcept | StrategyKind::Fairicl | StrategyKind::FairiclR
        )
    }

    /// Some concept is involved, as ranking or as prompt prefix.
    pub fn uses_concept(self) -> bool {
        self.uses_ranking() || self == StrategyKind::FairiclLc
    }
}

fn default_base() -> Group {
    Group::Majority
}

fn default_fairness() -> String {
    FAIRNESS_INSTRUCTION.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub k: usize,
    pub seed: u64,
    /// Group the counterfactual strategy draws its originals from.
    #[serde(default = "default_base")]
    pub counterfactual_base: Group,
    #[serde(default = "default_fairness")]
    pub fairness_instruction: String,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, k: usize, seed: u64) -> Self {
        Self {
            kind,
            k,
            seed,
            counterfactual_base: default_base(),
            fairness_instruction: default_fairness(),
        }
    }
}

/// A demonstration record; `flipped` marks a sensitive-flipped copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demo {
    pub record: Record,
    pub flipped: bool,
}

fn flip(d: &Dataset, r: &Record) -> Result<Record> {
    let s = d.schema.require_sensitive()?;
    let (majority, minority) = d.group_values()?;
    let mut out = r.clone();
    out.values[s] = if r.values[s] == majority { minority } else { majority };
    Ok(out)
}

/// Record positions of `d` per (sensitive value, label value), in domain order.
fn cells(d: &Dataset) -> Result<Vec<((Value, Value), Vec<usize>)>> {
    let s = d.schema.require_sensitive()?;
    let y = d.schema.label_index();
    let mut out = Vec::new();
    for a in &d.schema.attributes[s].domain {
        for l in &d.schema.attributes[y].domain {
            let idx = (0..d.size())
                .filter(|&i| d.records[i].values[s] == *a && d.records[i].values[y] == *l)
                .collect();
            out.push(((a.clone(), l.clone()), idx));
        }
    }
    Ok(out)
}

fn shuffled<T: Clone>(rng: &mut seed::Rng, items: Vec<T>) -> Vec<T> {
    seed::sample_indices(rng, items.len(), items.len())
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}

/// Demonstrations for each query. Each query gets its own generator seeded by
/// `(spec.seed, query id)`; the query's label is never consulted.
pub fn select_demos(
    spec: &StrategySpec,
    d: &Dataset,
    query_ids: &[u64],
    selection: Option<&Selection>,
) -> Result<BTreeMap<u64, Vec<Demo>>> {
    let k = spec.k;
    let plain = |r: &Record| Demo {
        record: r.clone(),
        flipped: false,
    };
    if k == 0 {
        return Ok(query_ids.iter().map(|&q| (q, Vec::new())).collect());
    }
    if k > d.size() {
        return Err(Error::Config(format!("k = {k} exceeds the {} training records", d.size())));
    }
    let mut out = BTreeMap::new();
    match spec.kind {
        StrategyKind::Random | StrategyKind::FairiclLc => {
            for &q in query_ids {
                let mut rng = seed::rng_for(spec.seed, &[q]);
                let demos = seed::sample_indices(&mut rng, d.size(), k)
                    .into_iter()
                    .map(|i| plain(&d.records[i]))
                    .collect();
                out.insert(q, demos);
            }
        }
        StrategyKind::Balanced | StrategyKind::Removal | StrategyKind::Instruction => {
            let cells = cells(d)?;
            if k % cells.len() != 0 {
                return Err(Error::Config(format!(
                    "k = {k} is not a multiple of the {} group/label cells",
                    cells.len()
                )));
            }
            let per = k / cells.len();
            for ((g, l), idx) in &cells {
                if idx.len() < per {
                    return Err(Error::InsufficientCell {
                        group: g.to_string(),
                        label: l.to_string(),
                        available: idx.len(),
                        required: per,
                    });
                }
            }
            for &q in query_ids {
                let mut rng = seed::rng_for(spec.seed, &[q]);
                let mut demos = Vec::with_capacity(k);
                for (_, idx) in &cells {
                    for i in seed::sample_indices(&mut rng, idx.len(), per) {
                        demos.push(plain(&d.records[idx[i]]));
                    }
                }
                out.insert(q, shuffled(&mut rng, demos));
            }
        }
        StrategyKind::Counterfactual => {
            if k % 2 != 0 {
                return Err(Error::Config(format!("counterfactual needs an even k, got {k}")));
            }
            let pool: Vec<usize> = (0..d.size())
                .filter(|&i| d.group_of(&d.records[i]).is_ok_and(|g| g == spec.counterfactual_base))
                .collect();
            if pool.len() < k / 2 {
                return Err(Error::InsufficientCell {
                    group: format!("{:?}", spec.counterfactual_base).to_lowercase(),
                    label: "any".into(),
                    available: pool.len(),
                    required: k / 2,
                });
            }
            for &q in query_ids {
                let mut rng = seed::rng_for(spec.seed, &[q]);
                let mut demos = Vec::with_capacity(k);
                for i in seed::sample_indices(&mut rng, pool.len(), k / 2) {
                    let r = &d.records[pool[i]];
                    demos.push(plain(r));
                    demos.push(Demo {
                        record: flip(d, r)?,
                        flipped: true,
                    });
                }
                out.insert(q, shuffled(&mut rng, demos));
            }
        }
        StrategyKind::LatentConcept | StrategyKind::Fairicl | StrategyKind::FairiclR => {
            let sel = selection.ok_or_else(|| {
                Error::Config(format!("strategy {} needs concept scores", spec.kind.as_str()))
            })?;
            for &q in query_ids {
                let ids = sel
                    .demos
                    .get(&q)
                    .ok_or_else(|| Error::Config(format!("no selection for query {q}")))?;
                if ids.len() != k {
                    return Err(Error::Config(format!(
                        "selection for query {q} has {} demos, expected {k}",
                        ids.len()
                    )));
                }
                let demos = ids
                    .iter()
                    .map(|&id| {
                        d.by_id(id)
                            .map(plain)
                            .ok_or_else(|| Error::Config(format!("selected record {id} not in training data")))
                    })
                    .collect::<Result<_>>()?;
                out.insert(q, demos);
            }
        }
    }
    Ok(out)
}

/// What prompts are built from.
#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub train: &'a Dataset,
    pub template: &'a Template,
    /// Task instruction; the template's own when empty.
    pub instruction: &'a str,
}

impl PromptContext<'_> {
    fn base_instruction(&self) -> &str {
        if self.instruction.is_empty() {
            &self.template.instruction
        } else {
            self.instruction
        }
    }
}

pub fn render_options(kind: StrategyKind) -> RenderOptions {
    if kind == StrategyKind::Removal {
        RenderOptions::removal()
    } else {
        RenderOptions::default()
    }
}

pub fn build_prompt(
    spec: &StrategySpec,
    ctx: &PromptContext,
    test: &Dataset,
    query: &Record,
    demos: &[Demo],
) -> Result<PromptSpec> {
    let opts = render_options(spec.kind);
    let base = ctx.base_instruction();
    let instruction = if spec.kind == StrategyKind::Instruction {
        format!("{} {base}", spec.fairness_instruction)
    } else {
        base.to_string()
    };
    let demonstrations = demos
        .iter()
        .map(|dm| {
            let ex = serialize_record(&dm.record, &ctx.train.schema, ctx.template, opts)?;
            Ok(with_answer(ex, ctx.train.is_positive(&dm.record)))
        })
        .collect::<Result<_>>()?;
    Ok(PromptSpec {
        instruction,
        demonstrations,
        query: serialize_record(query, &test.schema, ctx.template, opts)?,
        render_options: opts,
    })
}

/// Greedy completion of `prompt` by the internal model. The prompt's trailing
/// space is folded into the first generated token, matching how answers are
/// tokenized during training.
pub fn predict_internal(lm: &InternalLm, concept: Option<&ConceptState>, prompt: &str) -> Result<String> {
    let mut tokens = vec![BOS];
    tokens.extend(lm.tokenizer.encode(prompt.strip_suffix(' ').unwrap_or(prompt)));
    let out = lm::generate(&lm.params, concept.map(|c| &c.embeddings), &tokens, MAX_NEW_TOKENS, EOS)?;
    let body: Vec<u32> = out.into_iter().filter(|&t| t != EOS).collect();
    Ok(lm.tokenizer.decode(&body))
}

pub enum ModelTarget<'a> {
    Internal {
        lm: &'a InternalLm,
        /// Soft prefix for every prompt; only with `fairicl_lc`.
        concept: Option<&'a ConceptState>,
    },
    External(&'a ExternalClient),
}

impl ModelTarget<'_> {
    /// Raw completions in prompt order. Internal-model errors abort; external
    /// failures are returned per prompt.
    pub fn complete(&self, prompts: &[String]) -> Result<Vec<Result<String>>> {
        match self {
            ModelTarget::Internal { lm, concept } => {
                let out = prompts
                    .par_iter()
                    .map(|p| predict_internal(lm, *concept, p))
                    .collect::<Result<Vec<_>>>()?;
                Ok(out.into_iter().map(Ok).collect())
            }
            ModelTarget::External(client) => client.complete_all_blocking(prompts),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: u64,
    pub group: Group,
    pub group_value: String,
    pub true_label: bool,
    /// `None` when the query failed outright.
    pub predicted: Option<bool>,
    /// The answer could not be parsed and was taken as negative.
    pub unparseable: bool,
    pub raw: String,
    pub strategy: String,
    pub seed: u64,
    pub demo_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The prompt sent for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedQuery {
    pub query_id: u64,
    pub demo_ids: Vec<u64>,
    pub prompt: String,
}

/// Prompts for every query of `test`, in test order.
pub fn build_prompts(
    ctx: &PromptContext,
    test: &Dataset,
    spec: &StrategySpec,
    selection: Option<&Selection>,
) -> Result<Vec<PreparedQuery>> {
    let query_ids: Vec<u64> = test.records.iter().map(|r| r.id).collect();
    let demos = select_demos(spec, ctx.train, &query_ids, selection)?;
    test.records
        .iter()
        .map(|q| {
            let ds = &demos[&q.id];
            Ok(PreparedQuery {
                query_id: q.id,
                demo_ids: ds.iter().map(|d| d.record.id).collect(),
                prompt: build_icl_prompt(&build_prompt(spec, ctx, test, q, ds)?)?,
            })
        })
        .collect()
}

/// Selection for one run of a ranking strategy; `None` for the others.
pub fn selection_for(
    test: &Dataset,
    spec: &StrategySpec,
    ranking: Option<RankingInput>,
) -> Result<Option<Selection>> {
    if !spec.kind.uses_ranking() {
        return Ok(None);
    }
    let rk = ranking.ok_or_else(|| Error::Config(format!("{} needs concept scores", spec.kind.as_str())))?;
    let ids: Vec<u64> = test.records.iter().map(|q| q.id).collect();
    let cfg = SelectionConfig {
        m: rk.m,
        k: spec.k,
        seed: spec.seed,
    };
    Ok(Some(rank_and_select(rk.scores, &cfg, &ids)?))
}

/// Predict every query of `test` once.
pub fn run_predictions(
    ctx: &PromptContext,
    test: &Dataset,
    spec: &StrategySpec,
    selection: Option<&Selection>,
    target: &ModelTarget,
) -> Result<Vec<PredictionRecord>> {
    if let ModelTarget::Internal { concept, .. } = target {
        if concept.is_some() != (spec.kind == StrategyKind::FairiclLc) {
            return Err(Error::Config("a concept prefix is used with fairicl_lc and nothing else".into()));
        }
    } else if spec.kind == StrategyKind::FairiclLc {
        return Err(Error::Config("fairicl_lc runs on the internal model only".into()));
    }
    let prepared = build_prompts(ctx, test, spec, selection)?;
    let prompts: Vec<String> = prepared.iter().map(|p| p.prompt.clone()).collect();
    let completions = target.complete(&prompts)?;
    let s = test.schema.require_sensitive()?;
    test.records
        .iter()
        .zip(prepared)
        .zip(completions)
        .map(|((q, prep), c)| {
            let (predicted, unparseable, raw, error) = match c {
                Ok(raw) => {
                    let parsed = parse_answer(&raw);
                    (Some(parsed.as_prediction()), parsed == ParsedAnswer::Unparseable, raw, None)
                }
                Err(e @ (Error::RetriesExhausted { .. } | Error::Protocol(_))) => (None, false, String::new(), Some(e.to_string())),
                Err(e) => return Err(e),
            };
            Ok(PredictionRecord {
                query_id: q.id,
                group: test.group_of(q)?,
                group_value: q.values[s].to_string(),
                true_label: test.is_positive(q),
                predicted,
                unparseable,
                raw,
                strategy: spec.kind.as_str().to_string(),
                seed: spec.seed,
                demo_ids: prep.demo_ids,
                error,
            })
        })
        .collect()
}

pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    seed::derive(base_seed, &[seed::tag("run"), run as u64])
}

/// Concept ranking input for the ranking strategies.
#[derive(Debug, Clone, Copy)]
pub struct RankingInput<'a> {
    pub scores: &'a [LikelihoodScore],
    pub m: usize,
}

/// One prediction set per test split, run `r` seeded by `run_seed(base, r)`.
pub fn run_experiment(
    ctx: &PromptContext,
    tests: &[Dataset],
    kind: StrategyKind,
    k: usize,
    ranking: Option<RankingInput>,
    target: &ModelTarget,
    base_seed: u64,
) -> Result<Vec<Vec<PredictionRecord>>> {
    tests
        .iter()
        .enumerate()
        .map(|(r, test)| {
            let spec = StrategySpec::new(kind, k, run_seed(base_seed, r));
            let selection = selection_for(test, &spec, ranking)?;
            run_predictions(ctx, test, &spec, selection.as_ref(), target)
        })
        .collect()
}

/// One JSON record per line. `comment`, when given, becomes a leading `#`
/// line that [`read_jsonl`] skips.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T], comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    if let Some(c) = comment {
        out.push('#');
        out.push_str(c);
        out.push('\n');
    }
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() && !line.starts_with('#') {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
