//! Pre-training text for the internal model.
//!
//! Documents are answered ICL prompts built from the training split. In a
//! share of them ("shifted" documents) every label is redrawn from a rate
//! picked per sensitive group for that document, so the only way to predict
//! the query's answer is to read the demonstrations of the query's group. The
//! remaining documents keep the true labels. A model trained on the mix
//! answers from the profile but lets the demonstrations move its answer.

use fairicl::data::{Dataset, Group, Record};
use fairicl::inference::FAIRNESS_INSTRUCTION;
use fairicl::seed;
use fairicl::serialize::{build_training_sequence, serialize_record, with_answer, RenderOptions, Template};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub docs: usize,
    /// Demonstrations per document are uniform in `0..=max_demos`.
    pub max_demos: usize,
    /// Share of documents with group-dependent relabeling.
    pub shift: f64,
    /// Share rendered without the sensitive attribute.
    pub removal: f64,
    /// Share prefixed with the fairness instruction.
    pub instructed: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            docs: 4000,
            max_demos: 4,
            shift: 0.5,
            removal: 0.1,
            instructed: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self, d: &Dataset) -> Result<()> {
        if self.docs == 0 {
            return Err(PipelineError::Config("corpus needs at least one document".into()));
        }
        if self.max_demos + 1 > d.size() {
            return Err(PipelineError::Config(format!(
                "{} demonstrations per document need more than {} records",
                self.max_demos,
                d.size()
            )));
        }
        for p in [self.shift, self.removal, self.instructed] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PipelineError::Config("corpus shares must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

fn instruction<'a>(t: &'a Template, override_: &'a str) -> &'a str {
    if override_.is_empty() {
        &t.instruction
    } else {
        override_
    }
}

/// Answered prompts, deterministic in `seed`.
pub fn base_corpus(d: &Dataset, t: &Template, task_instruction: &str, cfg: &CorpusConfig, seed: u64) -> Result<Vec<String>> {
    cfg.validate(d)?;
    let base = instruction(t, task_instruction);
    let instructed = format!("{FAIRNESS_INSTRUCTION} {base}");
    (0..cfg.docs as u64)
        .map(|i| {
            let mut rng = seed::rng_for(seed, &[seed::tag("corpus"), i]);
            let n_demos = rng.gen_range(0..=cfg.max_demos);
            let picks = seed::sample_indices(&mut rng, d.size(), n_demos + 1);
            let shifted = rng.gen_bool(cfg.shift);
            let rates = [rng.gen::<f64>(), rng.gen::<f64>()];
            let opts = if rng.gen_bool(cfg.removal) {
                RenderOptions::removal()
            } else {
                RenderOptions::default()
            };
            let inst = if rng.gen_bool(cfg.instructed) { instructed.as_str() } else { base };
            let mut label = |r: &Record| -> Result<bool> {
                Ok(if shifted {
                    let g = d.group_of(r)?;
                    rng.gen_bool(rates[usize::from(g == Group::Minority)])
                } else {
                    d.is_positive(r)
                })
            };
            let mut demos = Vec::with_capacity(n_demos);
            for &p in &picks[..n_demos] {
                let r = &d.records[p];
                let positive = label(r)?;
                demos.push(with_answer(serialize_record(r, &d.schema, t, opts)?, positive));
            }
            let q = &d.records[picks[n_demos]];
            let positive = label(q)?;
            let query = serialize_record(q, &d.schema, t, opts)?;
            Ok(build_training_sequence(inst, &demos, &query, positive)?.text)
        })
        .collect()
}

/// Text whose words must be in the vocabulary: every record of `sets` under
/// both render options, the instructions and both answers.
pub fn vocabulary_texts(sets: &[&Dataset], t: &Template, task_instruction: &str) -> Result<Vec<String>> {
    let base = instruction(t, task_instruction);
    let mut out = vec![
        base.to_string(),
        FAIRNESS_INSTRUCTION.to_string(),
        t.question.clone(),
        t.answer_prefix.clone(),
        "Yes No".to_string(),
    ];
    for d in sets {
        for r in &d.records {
            for opts in [RenderOptions::default(), RenderOptions::removal()] {
                out.push(serialize_record(r, &d.schema, t, opts)?.profile);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{planted_bias, SyntheticConfig};
    use fairicl::data::Schema;

    fn setup() -> (Dataset, Template) {
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/synthetic");
        let s = Schema::load(format!("{root}/schema.toml")).unwrap();
        let t = Template::load(format!("{root}/template.toml")).unwrap();
        (planted_bias(&s, &SyntheticConfig::new(50, 0)).unwrap(), t)
    }

    #[test]
    fn documents_are_answered_prompts() {
        let (d, t) = setup();
        let cfg = CorpusConfig {
            docs: 40,
            ..Default::default()
        };
        let docs = base_corpus(&d, &t, "", &cfg, 5).unwrap();
        assert_eq!(docs.len(), 40);
        for doc in &docs {
            assert!(doc.starts_with("### Instruction: "));
            assert!(doc.ends_with("### Answer: Yes") || doc.ends_with("### Answer: No"), "{doc}");
        }
        assert_eq!(docs, base_corpus(&d, &t, "", &cfg, 5).unwrap());
        assert_ne!(docs, base_corpus(&d, &t, "", &cfg, 6).unwrap());
    }

    #[test]
    fn unshifted_documents_keep_true_labels() {
        let (d, t) = setup();
        let cfg = CorpusConfig {
            docs: 30,
            max_demos: 0,
            shift: 0.0,
            removal: 0.0,
            instructed: 0.0,
        };
        for doc in base_corpus(&d, &t, "", &cfg, 1).unwrap() {
            // Profiles can repeat, so any record with this profile may be the query.
            let found = d
                .records
                .iter()
                .filter(|r| doc.contains(&serialize_record(r, &d.schema, &t, RenderOptions::default()).unwrap().profile))
                .any(|r| d.is_positive(r) == doc.ends_with("Yes"));
            assert!(found, "{doc}");
        }
    }
}
