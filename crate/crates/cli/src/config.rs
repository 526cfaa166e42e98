//! Experiment configuration read from TOML, with dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use fairicl::concept::ConceptTrainConfig;
use fairicl::inference::{ExternalClientConfig, StrategyKind};
use fairicl::lm::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{PipelineError, Result};
use crate::synthetic::SyntheticConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub strategies: Vec<StrategyKind>,
    pub data: DataConfig,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub concept: ConceptSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub model: ModelSection,
    /// Also write every prompt sent, next to the predictions.
    #[serde(default)]
    pub keep_prompts: bool,
}

fn default_runs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub schema: PathBuf,
    pub template: PathBuf,
    /// Source table. Exactly one of `csv` and `synthetic` is set.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    pub train_size: usize,
    pub test_per_cell: usize,
    /// Replaces the template's instruction when non-empty.
    #[serde(default)]
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    /// Size of the full synthetic set; the training size when unset.
    #[serde(default)]
    pub n_tilde: Option<usize>,
    #[serde(default = "yes")]
    pub unique: bool,
    /// Leading share of the synthetic set used for concept learning.
    #[serde(default = "one")]
    pub n_tilde_fraction: f64,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            n_tilde: None,
            unique: true,
            n_tilde_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_dim")]
    pub model_dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_context")]
    pub context_len: usize,
    #[serde(default = "default_slots")]
    pub concept_slots: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    /// A pre-trained model to use instead of training one.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_layers() -> usize {
    2
}

fn default_dim() -> usize {
    128
}

fn default_heads() -> usize {
    4
}

fn default_context() -> usize {
    512
}

fn default_slots() -> usize {
    10
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            layers: default_layers(),
            model_dim: default_dim(),
            heads: default_heads(),
            context_len: default_context(),
            concept_slots: default_slots(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    /// The answered example alone precedes the concept tokens.
    #[default]
    Answered,
    /// The task instruction comes first.
    Instructed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSection {
    #[serde(default = "default_c")]
    pub c: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default)]
    pub scoring: Scoring,
}

fn default_c() -> usize {
    10
}

fn default_lr() -> f64 {
    1e-4
}

fn default_epochs() -> usize {
    5
}

fn default_q() -> usize {
    2
}

impl Default for ConceptSection {
    fn default() -> Self {
        Self {
            c: default_c(),
            lr: default_lr(),
            epochs: default_epochs(),
            q: default_q(),
            scoring: Scoring::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_m() -> usize {
    100
}

fn default_k() -> usize {
    4
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            m: default_m(),
            k: default_k(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    #[default]
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub target: Target,
    #[serde(default)]
    pub external: Option<ExternalClientConfig>,
}

/// Set `key` (dotted path) in a TOML document. The value is parsed as a TOML
/// value when possible and taken as a string otherwise.
pub fn set_value(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| PipelineError::Config(format!("empty override key `{key}`")))?;
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse `text`, apply `key=value` overrides and resolve relative paths
    /// against `base`.
    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override `{o}` is not key=value")))?;
            set_value(&mut doc, k.trim(), v.trim())?;
        }
        let mut cfg: ExperimentConfig = doc.try_into()?;
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, overrides)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        fix(&mut self.data.schema);
        fix(&mut self.data.template);
        if let Some(p) = &mut self.data.csv {
            fix(p);
        }
        if let Some(p) = &mut self.lm.checkpoint {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.strategies.is_empty() {
            return bad("no strategies listed".into());
        }
        match (&self.data.csv, &self.data.synthetic) {
            (Some(p), None) if !p.is_file() => return bad(format!("data file {} does not exist", p.display())),
            (Some(_), None) | (None, Some(_)) => {}
            _ => return bad("set exactly one of data.csv and data.synthetic".into()),
        }
        for p in [&self.data.schema, &self.data.template] {
            if !p.is_file() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.lm.checkpoint {
            if !p.is_file() {
                return bad(format!("checkpoint {} does not exist", p.display()));
            }
        }
        if self.data.train_size == 0 {
            return bad("train_size must be positive".into());
        }
        let f = self.generation.n_tilde_fraction;
        if !(0.0..=1.0).contains(&f) {
            return bad(format!("n_tilde_fraction must lie in [0, 1], got {f}"));
        }
        if self.strategies.iter().any(|s| s.uses_concept()) {
            self.concept_config(fairicl::concept::ConceptMode::Fair, 0).validate()?;
            if self.concept.c > self.lm.concept_slots {
                return bad(format!(
                    "c = {} exceeds the {} concept slots of the model",
                    self.concept.c, self.lm.concept_slots
                ));
            }
        }
        if self.strategies.iter().any(|s| s.uses_ranking()) && self.selection.k > self.selection.m {
            return bad(format!("k = {} exceeds m = {}", self.selection.k, self.selection.m));
        }
        if self.model.target == Target::External {
            match &self.model.external {
                Some(e) => e.validate()?,
                None => return bad("external target needs a [model.external] section".into()),
            }
            if self.strategies.contains(&StrategyKind::FairiclLc) {
                return bad("fairicl_lc runs on the internal model only".into());
            }
        }
        Ok(())
    }

    pub fn concept_config(&self, mode: fairicl::concept::ConceptMode, seed: u64) -> ConceptTrainConfig {
        ConceptTrainConfig {
            c: self.concept.c,
            lr: self.concept.lr,
            epochs: self.concept.epochs,
            q: self.concept.q,
            seed,
            mode,
        }
    }
}
