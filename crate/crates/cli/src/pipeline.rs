//! The experiment stages and their persisted artifacts.
//!
//! ```text
//! prepare -> augment ----------.
//!    |                          v
//!    '-----> train-lm -> learn-concept -> rank -> infer -> evaluate
//! ```
//!
//! Each stage reads its inputs from upstream stage directories and refuses
//! them when their fingerprint is not the one the configuration implies.

use std::collections::BTreeMap;
use std::fs;

use fairicl::augment::{self, GenerationConfig, GenerationMode};
use fairicl::concept::{
    self, ConceptCorpus, ConceptMode, ConceptState, LikelihoodScore, ScoringContext,
};
use fairicl::data::{self, Dataset, Provenance, Schema};
use fairicl::inference::{
    self, ExternalClient, ModelTarget, PredictionRecord, PromptContext, RankingInput, StrategyKind, StrategySpec,
};
use fairicl::lm::checkpoint;
use fairicl::lm::tokenizer::{Tokenizer, CONCEPT_BASE};
use fairicl::lm::{self, InternalLm, LMConfig};
use fairicl::metrics::{self, AggregateReport, EvalReport};
use fairicl::seed::{derive, tag};
use fairicl::serialize::Template;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Scoring, Target};
use crate::corpus;
use crate::error::{PipelineError, Result};
use crate::store::{comment, file_digest, fingerprint, StageDir};
use crate::synthetic;

/// What a stage does when its output is not on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Compute it (reusing a complete earlier output unless forced).
    Build,
    /// Fail with a missing-artifact error.
    Load,
}

/// Concept flavours, by the synthetic data they train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Original queries only.
    Plain,
    /// Original plus hierarchical synthetic queries.
    Fair,
    /// Original plus fully random synthetic queries.
    FairRandom,
}

pub struct Prepared {
    pub stage: StageDir,
    pub train: Dataset,
    pub tests: Vec<Dataset>,
}

pub struct Augmented {
    pub stage: StageDir,
    pub hierarchical: Dataset,
    pub random: Dataset,
}

pub struct Model {
    pub stage: StageDir,
    pub lm: InternalLm,
}

pub struct Concept {
    pub stage: StageDir,
    pub state: ConceptState,
}

pub struct Ranked {
    pub stage: StageDir,
    pub scores: Vec<LikelihoodScore>,
}

pub struct Inferred {
    pub stage: StageDir,
    pub runs: Vec<Vec<PredictionRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Aggregate per strategy name.
    pub strategies: BTreeMap<String, AggregateReport>,
    /// Per-run reports per strategy name.
    pub runs: BTreeMap<String, Vec<EvalReport>>,
}

pub const AGGREGATE: &str = "aggregate.json";
pub const SUMMARY: &str = "summary.csv";
const MODEL: &str = "model.ficl";
const CONCEPT: &str = "concept.ficl";

fn test_file(r: usize) -> String {
    format!("test-run{r}.csv")
}

fn run_file(r: usize) -> String {
    format!("run{r}.jsonl")
}

pub fn prompts_file(r: usize) -> String {
    format!("run{r}.prompts.jsonl")
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    schema: Schema,
    template: Template,
    upstream: Policy,
    force: bool,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let schema = Schema::load(&cfg.data.schema)?;
        let template = Template::load(&cfg.data.template)?;
        template.check(&schema)?;
        Ok(Self {
            cfg,
            schema,
            template,
            upstream: Policy::Build,
            force: false,
        })
    }

    /// How missing upstream outputs are handled.
    pub fn with_upstream(mut self, p: Policy) -> Self {
        self.upstream = p;
        self
    }

    /// Recompute outputs that are already complete.
    pub fn forced(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    fn stage(&self, name: &str, parts: Value) -> StageDir {
        StageDir::new(&self.cfg.output, name, fingerprint(name, &parts))
    }

    /// Whether `policy` asks to (re)compute `s`; errors when it must exist.
    fn should_compute(&self, s: &StageDir, policy: Policy) -> Result<bool> {
        match policy {
            Policy::Load => s.require().map(|_| false),
            Policy::Build => Ok(self.force || !s.is_complete()),
        }
    }

    fn seed(&self, what: &str) -> u64 {
        derive(self.cfg.seed, &[tag(what)])
    }

    fn text_parts(&self) -> Value {
        json!({ "template": &self.template, "instruction": &self.cfg.data.instruction })
    }

    // ---- prepare ----

    pub fn prepare_stage(&self) -> Result<StageDir> {
        let source = match (&self.cfg.data.csv, &self.cfg.data.synthetic) {
            (Some(p), _) => json!({ "csv": file_digest(p)? }),
            (None, Some(s)) => json!({ "synthetic": s }),
            (None, None) => unreachable!("validated"),
        };
        Ok(self.stage(
            "prepare",
            json!({
                "schema": &self.schema,
                "source": source,
                "train_size": self.cfg.data.train_size,
                "test_per_cell": self.cfg.data.test_per_cell,
                "runs": self.cfg.runs,
                "seed": self.cfg.seed,
            }),
        ))
    }

    pub fn prepare(&self, policy: Policy) -> Result<Prepared> {
        let s = self.prepare_stage()?;
        if self.should_compute(&s, policy)? {
            info!("prepare -> {}", s.dir.display());
            let full = match (&self.cfg.data.csv, &self.cfg.data.synthetic) {
                (Some(p), _) => data::load_csv(p, &self.schema)?,
                (_, Some(syn)) => synthetic::planted_bias(&self.schema, syn)?,
                _ => unreachable!("validated"),
            };
            let train = data::subsample(&full, self.cfg.data.train_size, self.seed("train"));
            if train.size() < self.cfg.data.train_size {
                warn!(
                    "only {} records available for a training split of {}",
                    train.size(),
                    self.cfg.data.train_size
                );
            }
            let pool = full.without(&train);
            if self.cfg.data.test_per_cell == 0 {
                warn!("test_per_cell is 0; test splits are empty");
            }
            s.begin()?;
            let c = comment(&s.fingerprint);
            let echo = format!("#{c}\n{}", full.schema.to_toml());
            fs::write(s.path("schema.toml"), echo).map_err(|e| PipelineError::io(s.path("schema.toml"), e))?;
            data::write_csv(&train, s.path("train.csv"), Some(&c))?;
            let mut files = vec!["schema.toml".to_string(), "train.csv".into()];
            for r in 0..self.cfg.runs {
                let run_seed = derive(inference::run_seed(self.cfg.seed, r), &[tag("test")]);
                let test = data::stratified_test_sample(&pool, self.cfg.data.test_per_cell, run_seed)?;
                data::write_csv(&test, s.path(&test_file(r)), Some(&c))?;
                files.push(test_file(r));
            }
            let counts = data::group_label_counts(&train)?;
            let table: BTreeMap<String, usize> = counts
                .cells
                .iter()
                .map(|((g, y), n)| (format!("{g}/{y}"), *n))
                .collect();
            s.write_json("counts.json", &json!({ "train": table }))?;
            files.push("counts.json".into());
            s.finish(&files)?;
        }
        self.load_prepared(s)
    }

    fn load_prepared(&self, s: StageDir) -> Result<Prepared> {
        let schema_path = s.verify_comment("schema.toml")?;
        let schema = Schema::load(&schema_path)?;
        let train = data::load_csv(s.verify_comment("train.csv")?, &schema)?;
        let tests = (0..self.cfg.runs)
            .map(|r| {
                let mut t = data::load_csv(s.verify_comment(&test_file(r))?, &schema)?;
                t.provenance = Provenance::Test;
                Ok(t)
            })
            .collect::<Result<_>>()?;
        Ok(Prepared { stage: s, train, tests })
    }

    // ---- augment ----

    fn n_tilde(&self, train: &Dataset) -> usize {
        self.cfg.generation.n_tilde.unwrap_or(train.size())
    }

    pub fn augment(&self, policy: Policy) -> Result<Augmented> {
        let prep = self.prepare(self.upstream)?;
        let n_tilde = self.n_tilde(&prep.train);
        let s = self.stage(
            "augment",
            json!({
                "prepare": &prep.stage.fingerprint,
                "n_tilde": n_tilde,
                "unique": self.cfg.generation.unique,
                "seed": self.cfg.seed,
            }),
        );
        if self.should_compute(&s, policy)? {
            info!("augment -> {}", s.dir.display());
            let h = prep.train.schema.hierarchy.as_ref();
            let gen = |mode, what| {
                let cfg = GenerationConfig {
                    n_tilde,
                    seed: self.seed(what),
                    unique: self.cfg.generation.unique,
                    mode,
                };
                augment::generate(&prep.train, h, &cfg)
            };
            let hier = gen(GenerationMode::Hierarchical, "hierarchical")?;
            let random = gen(GenerationMode::Random, "random")?;
            s.begin()?;
            let c = comment(&s.fingerprint);
            data::write_csv(&hier, s.path("hierarchical.csv"), Some(&c))?;
            data::write_csv(&random, s.path("random.csv"), Some(&c))?;
            let report = json!({
                "train": augment::decorrelation_report(&prep.train).ok(),
                "hierarchical": augment::decorrelation_report(&hier).ok(),
                "random": augment::decorrelation_report(&random).ok(),
            });
            s.write_json("decorrelation.json", &report)?;
            s.finish(&["hierarchical.csv".into(), "random.csv".into(), "decorrelation.json".into()])?;
        }
        let load = |f: &str| -> Result<Dataset> {
            let mut d = data::load_csv(s.verify_comment(f)?, &prep.train.schema)?;
            d.provenance = Provenance::Augmented;
            Ok(d)
        };
        Ok(Augmented {
            hierarchical: load("hierarchical.csv")?,
            random: load("random.csv")?,
            stage: s,
        })
    }

    // ---- train-lm ----

    fn lm_stage(&self, prep: &Prepared) -> Result<StageDir> {
        Ok(match &self.cfg.lm.checkpoint {
            Some(p) => self.stage("train-lm", json!({ "checkpoint": file_digest(p)? })),
            None => {
                let mut lm = serde_json::to_value(&self.cfg.lm)?;
                lm.as_object_mut().map(|m| m.remove("checkpoint"));
                self.stage(
                    "train-lm",
                    json!({
                        "prepare": &prep.stage.fingerprint,
                        "text": self.text_parts(),
                        "lm": lm,
                        "seed": self.cfg.seed,
                    }),
                )
            }
        })
    }

    pub fn train_lm(&self, policy: Policy) -> Result<Model> {
        let prep = self.prepare(self.upstream)?;
        let s = self.lm_stage(&prep)?;
        if self.should_compute(&s, policy)? {
            info!("train-lm -> {}", s.dir.display());
            s.begin()?;
            if let Some(p) = &self.cfg.lm.checkpoint {
                let (tok, params, _) = checkpoint::load_model(p)?;
                checkpoint::save_model(s.path(MODEL), &tok, &params, Some(&s.fingerprint))?;
                s.finish(&[MODEL.into()])?;
            } else {
                let (tok, params, report) = self.fit_lm(&prep)?;
                checkpoint::save_model(s.path(MODEL), &tok, &params, Some(&s.fingerprint))?;
                s.write_json("report.json", &report)?;
                s.finish(&[MODEL.into(), "report.json".into()])?;
            }
        }
        let (tok, params, fp) = checkpoint::load_model(s.path(MODEL)).map_err(|e| match e {
            fairicl::Error::Io { .. } => PipelineError::MissingArtifact {
                stage: s.stage.clone(),
                path: s.path(MODEL),
            },
            e => e.into(),
        })?;
        crate::store::check(&s.path(MODEL), &s.fingerprint, fp.as_deref().unwrap_or(""))?;
        Ok(Model {
            lm: InternalLm::new(tok, params)?,
            stage: s,
        })
    }

    fn fit_lm(&self, prep: &Prepared) -> Result<(Tokenizer, lm::LMParams<f32>, lm::TrainReport)> {
        let l = &self.cfg.lm;
        let docs = corpus::base_corpus(
            &prep.train,
            &self.template,
            &self.cfg.data.instruction,
            &l.corpus,
            self.seed("corpus"),
        )?;
        let mut sets = vec![&prep.train];
        sets.extend(prep.tests.iter());
        let extra = corpus::vocabulary_texts(&sets, &self.template, &self.cfg.data.instruction)?;
        let tok = Tokenizer::build(docs.iter().chain(&extra).map(String::as_str), l.concept_slots);
        let cfg = LMConfig {
            layers: l.layers,
            model_dim: l.model_dim,
            heads: l.heads,
            context_len: l.context_len,
            vocab_size: tok.vocab_size(),
            concept_base: CONCEPT_BASE as usize,
            concept_slots: l.concept_slots,
        };
        cfg.validate()?;
        let mut train = l.train.clone();
        train.seed = derive(self.cfg.seed, &[tag("lm"), l.train.seed]);
        info!("base LM: vocabulary {}, {} documents", tok.vocab_size(), docs.len());
        let (params, report) = lm::train_base_lm(&docs, &tok, cfg, &train)?;
        Ok((tok, params, report))
    }

    // ---- learn-concept ----

    /// The concept a strategy needs, if any.
    pub fn variant_for(&self, kind: StrategyKind) -> Option<Variant> {
        if !kind.uses_concept() {
            return None;
        }
        if kind == StrategyKind::LatentConcept || self.cfg.generation.n_tilde_fraction == 0.0 {
            return Some(Variant::Plain);
        }
        Some(if kind == StrategyKind::FairiclR {
            Variant::FairRandom
        } else {
            Variant::Fair
        })
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v: Vec<Variant> = self.cfg.strategies.iter().filter_map(|&k| self.variant_for(k)).collect();
        v.sort();
        v.dedup();
        v
    }

    fn concept_stage(&self, variant: Variant, epochs: usize, prep: &StageDir, aug: Option<&StageDir>, model: &StageDir) -> StageDir {
        let c = &self.cfg.concept;
        let synthetic = aug.map(|a| json!({ "augment": &a.fingerprint, "fraction": self.cfg.generation.n_tilde_fraction }));
        self.stage(
            "learn-concept",
            json!({
                "variant": variant,
                "prepare": &prep.fingerprint,
                "synthetic": synthetic,
                "model": &model.fingerprint,
                "text": self.text_parts(),
                "concept": { "c": c.c, "lr": c.lr, "epochs": epochs, "q": c.q },
                "seed": self.cfg.seed,
            }),
        )
    }

    pub fn learn_concept(&self, variant: Variant, policy: Policy) -> Result<(Concept, Model)> {
        let prep = self.prepare(self.upstream)?;
        let aug = match variant {
            Variant::Plain => None,
            _ => Some(self.augment(self.upstream)?),
        };
        let model = self.train_lm(self.upstream)?;
        let stage_at = |t| self.concept_stage(variant, t, &prep.stage, aug.as_ref().map(|a| &a.stage), &model.stage);
        let s = stage_at(self.cfg.concept.epochs);
        if self.should_compute(&s, policy)? {
            info!("learn-concept ({variant:?}) -> {}", s.dir.display());
            let empty = Dataset::new(prep.train.schema.clone(), Vec::new(), Provenance::Augmented);
            let d_tilde = match (&aug, variant) {
                (Some(a), Variant::Fair) => prefix(&a.hierarchical, self.cfg.generation.n_tilde_fraction),
                (Some(a), Variant::FairRandom) => prefix(&a.random, self.cfg.generation.n_tilde_fraction),
                _ => empty,
            };
            let mixture = augment::build_training_mixture(&prep.train, &d_tilde, self.cfg.concept.q, self.seed("mixture"))?;
            let mode = if variant == Variant::Plain { ConceptMode::Plain } else { ConceptMode::Fair };
            let ccfg = self.cfg.concept_config(mode, self.seed("concept"));
            let corpus = ConceptCorpus {
                d: &prep.train,
                d_tilde: &d_tilde,
                template: &self.template,
                instruction: self.instruction(),
            };
            // Training for `t` epochs is a prefix of training for more, so each
            // epoch's state is also the output of the `epochs = t` stage.
            let save = |epoch: usize, state: &ConceptState| -> Result<()> {
                let at = stage_at(epoch + 1);
                let mut st = state.clone();
                st.config.epochs = epoch + 1;
                st.fingerprint = at.fingerprint.clone();
                at.begin()?;
                concept::save_concept(at.path(CONCEPT), &st, *model.lm.config())?;
                at.finish(&[CONCEPT.into()])
            };
            let mut failure = None;
            let trained = concept::learn_concept(&model.lm, &corpus, &mixture, &ccfg, |epoch, state| {
                save(epoch, state).map_err(|e| {
                    let msg = e.to_string();
                    failure = Some(e);
                    fairicl::Error::Config(msg)
                })
            });
            if let Some(e) = failure {
                return Err(e);
            }
            trained?;
        }
        let state = self.load_concept(&s, &model)?;
        Ok((Concept { stage: s, state }, model))
    }

    fn instruction(&self) -> &str {
        if self.cfg.data.instruction.is_empty() {
            &self.template.instruction
        } else {
            &self.cfg.data.instruction
        }
    }

    fn load_concept(&self, s: &StageDir, model: &Model) -> Result<ConceptState> {
        s.require()?;
        let (state, cfg) = concept::load_concept(s.path(CONCEPT))?;
        crate::store::check(&s.path(CONCEPT), &s.fingerprint, &state.fingerprint)?;
        if cfg != *model.lm.config() {
            return Err(PipelineError::Config(format!(
                "concept {} was trained against a different model",
                s.path(CONCEPT).display()
            )));
        }
        Ok(state)
    }

    // ---- rank ----

    pub fn rank(&self, variant: Variant, policy: Policy) -> Result<Ranked> {
        let prep = self.prepare(self.upstream)?;
        let (concept, model) = self.learn_concept(variant, self.upstream)?;
        let s = self.stage(
            "rank",
            json!({ "concept": &concept.stage.fingerprint, "scoring": self.cfg.concept.scoring }),
        );
        if self.should_compute(&s, policy)? {
            info!("rank ({variant:?}) -> {}", s.dir.display());
            let ctx = match self.cfg.concept.scoring {
                Scoring::Answered => ScoringContext::Answered,
                Scoring::Instructed => ScoringContext::Instructed(self.instruction().to_string()),
            };
            let scores = concept::score_dataset(&model.lm, &concept.state, &prep.train, &self.template, &ctx)?;
            s.begin()?;
            concept::write_scores(s.path("scores.csv"), &scores, Some(&comment(&s.fingerprint)))?;
            s.finish(&["scores.csv".into()])?;
        }
        let scores = concept::read_scores(s.verify_comment("scores.csv")?)?;
        Ok(Ranked { stage: s, scores })
    }

    // ---- infer ----

    pub fn infer(&self, kind: StrategyKind, policy: Policy) -> Result<Inferred> {
        let prep = self.prepare(self.upstream)?;
        let variant = self.variant_for(kind);
        let ranked = match variant {
            Some(v) if kind.uses_ranking() => Some(self.rank(v, self.upstream)?),
            _ => None,
        };
        let concept = match variant {
            Some(v) if kind == StrategyKind::FairiclLc => Some(self.learn_concept(v, self.upstream)?),
            _ => None,
        };
        let model = match (&concept, self.cfg.model.target) {
            (None, Target::Internal) => Some(self.train_lm(self.upstream)?),
            _ => None,
        };
        let lm = concept.as_ref().map(|c| &c.1).or(model.as_ref());
        let target_parts = match self.cfg.model.target {
            Target::Internal => json!({ "internal": lm.map(|m| &m.stage.fingerprint) }),
            Target::External => json!({ "external": &self.cfg.model.external }),
        };
        let s = self.stage(
            "infer",
            json!({
                "strategy": kind,
                "k": self.cfg.selection.k,
                "m": kind.uses_ranking().then_some(self.cfg.selection.m),
                "prepare": &prep.stage.fingerprint,
                "rank": ranked.as_ref().map(|r| &r.stage.fingerprint),
                "concept": concept.as_ref().map(|c| &c.0.stage.fingerprint),
                "text": self.text_parts(),
                "target": target_parts,
                "seed": self.cfg.seed,
            }),
        );
        if self.should_compute(&s, policy)? {
            info!("infer ({}) -> {}", kind.as_str(), s.dir.display());
            let client = match self.cfg.model.target {
                Target::External => Some(ExternalClient::new(
                    self.cfg.model.external.clone().expect("validated"),
                )?),
                Target::Internal => None,
            };
            let target = match (&client, lm) {
                (Some(c), _) => ModelTarget::External(c),
                (None, Some(m)) => ModelTarget::Internal {
                    lm: &m.lm,
                    concept: concept.as_ref().map(|c| &c.0.state),
                },
                (None, None) => unreachable!("internal target always has a model"),
            };
            let ctx = PromptContext {
                train: &prep.train,
                template: &self.template,
                instruction: &self.cfg.data.instruction,
            };
            let ranking = ranked.as_ref().map(|r| RankingInput {
                scores: &r.scores,
                m: self.cfg.selection.m,
            });
            s.begin()?;
            let c = comment(&s.fingerprint);
            let mut files = Vec::new();
            for (r, test) in prep.tests.iter().enumerate() {
                let spec = StrategySpec::new(kind, self.cfg.selection.k, inference::run_seed(self.cfg.seed, r));
                let selection = inference::selection_for(test, &spec, ranking)?;
                if self.cfg.keep_prompts {
                    let prompts = inference::build_prompts(&ctx, test, &spec, selection.as_ref())?;
                    inference::write_jsonl(s.path(&prompts_file(r)), &prompts, Some(&c))?;
                    files.push(prompts_file(r));
                }
                let records = inference::run_predictions(&ctx, test, &spec, selection.as_ref(), &target)?;
                let failed = records.iter().filter(|x| x.predicted.is_none()).count();
                if failed > 0 {
                    warn!("{} run {r}: {failed} queries failed", kind.as_str());
                }
                inference::write_jsonl(s.path(&run_file(r)), &records, Some(&c))?;
                files.push(run_file(r));
            }
            s.finish(&files)?;
        }
        let runs = (0..self.cfg.runs)
            .map(|r| Ok(inference::read_jsonl(s.verify_comment(&run_file(r))?)?))
            .collect::<Result<_>>()?;
        Ok(Inferred { stage: s, runs })
    }

    // ---- evaluate ----

    pub fn evaluate(&self, policy: Policy) -> Result<(StageDir, Evaluation)> {
        let inferred = self
            .cfg
            .strategies
            .iter()
            .map(|&k| Ok((k, self.infer(k, self.upstream)?)))
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<Value> = inferred
            .iter()
            .map(|(k, i)| json!([k, &i.stage.fingerprint]))
            .collect();
        let s = self.stage("evaluate", json!({ "infer": parts }));
        if self.should_compute(&s, policy)? {
            info!("evaluate -> {}", s.dir.display());
            let mut eval = Evaluation {
                strategies: BTreeMap::new(),
                runs: BTreeMap::new(),
            };
            let mut rows = Vec::new();
            for (k, inf) in &inferred {
                let reports = inf
                    .runs
                    .iter()
                    .enumerate()
                    .map(|(r, recs)| metrics::evaluate(recs, inference::run_seed(self.cfg.seed, r)))
                    .collect::<fairicl::Result<Vec<_>>>()?;
                let agg = metrics::aggregate(&reports)?;
                if !agg.all_valid {
                    warn!("{}: more than 1% of queries failed in some run", k.as_str());
                }
                rows.push((k.as_str().to_string(), agg.clone()));
                eval.strategies.insert(k.as_str().to_string(), agg);
                eval.runs.insert(k.as_str().to_string(), reports);
            }
            s.begin()?;
            s.write_json(AGGREGATE, &eval)?;
            let csv = metrics::summary_csv(&rows)?;
            fs::write(s.path(SUMMARY), csv).map_err(|e| PipelineError::io(s.path(SUMMARY), e))?;
            s.finish(&[AGGREGATE.into(), SUMMARY.into()])?;
        }
        let eval = s.read_json(AGGREGATE)?;
        Ok((s, eval))
    }
}

/// The leading `fraction` of `d`, rounded to the nearest record.
pub fn prefix(d: &Dataset, fraction: f64) -> Dataset {
    let n = (d.size() as f64 * fraction).round() as usize;
    Dataset::new(d.schema.clone(), d.records[..n.min(d.size())].to_vec(), d.provenance)
}
