//! A census-like table with a planted dependence between sex and income.
//!
//! Income is drawn from a per-sex rate; education, occupation and hours then
//! follow the income with adjustable strength, and the relationship column is
//! a proxy for sex. The column names and values match
//! `configs/synthetic/schema.toml`.

use fairicl::data::{Dataset, Provenance, Record, Schema, Value};
use fairicl::seed;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

pub const HIGH_EDUCATION: [&str; 3] = ["Bachelors", "Masters", "Doctorate"];
pub const LOW_EDUCATION: [&str; 3] = ["HS-grad", "Some-college", "Dropout"];
pub const HIGH_OCCUPATION: [&str; 3] = ["Managerial", "Technical", "Sales"];
pub const LOW_OCCUPATION: [&str; 3] = ["Service", "Crafts", "Clerical"];
pub const POSITIVE: &str = ">50K";
pub const NEGATIVE: &str = "<=50K";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Share of records with sex = Male.
    #[serde(default = "half")]
    pub male_share: f64,
    /// P(income > 50K | Male).
    #[serde(default = "high_rate")]
    pub male_positive_rate: f64,
    /// P(income > 50K | Female).
    #[serde(default = "low_rate")]
    pub female_positive_rate: f64,
    /// Probability that education comes from the income's own tier; at 1 the
    /// tier determines the label.
    #[serde(default = "strong")]
    pub education_signal: f64,
    #[serde(default = "weak")]
    pub occupation_signal: f64,
}

fn half() -> f64 {
    0.5
}

fn high_rate() -> f64 {
    0.8
}

fn low_rate() -> f64 {
    0.2
}

fn strong() -> f64 {
    0.8
}

fn weak() -> f64 {
    0.7
}

impl SyntheticConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            male_share: half(),
            male_positive_rate: high_rate(),
            female_positive_rate: low_rate(),
            education_signal: strong(),
            occupation_signal: weak(),
        }
    }

    fn validate(&self) -> Result<()> {
        let probs = [
            self.male_share,
            self.male_positive_rate,
            self.female_positive_rate,
            self.education_signal,
            self.occupation_signal,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(PipelineError::Config("synthetic probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn tiered<'a>(rng: &mut seed::Rng, positive: bool, signal: f64, high: &[&'a str], low: &[&'a str]) -> &'a str {
    let own = rng.gen_bool(signal);
    let tier = if positive == own { high } else { low };
    tier[rng.gen_range(0..tier.len())]
}

/// `cfg.n` records in the column order of `schema`.
pub fn planted_bias(schema: &Schema, cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let col = |name: &str| {
        schema
            .index_of(name)
            .ok_or_else(|| PipelineError::Config(format!("synthetic data needs a `{name}` column")))
    };
    let cols = [
        col("sex")?,
        col("education")?,
        col("occupation")?,
        col("hours")?,
        col("relationship")?,
        col("income")?,
    ];
    if schema.attributes.len() != cols.len() {
        return Err(PipelineError::Config("synthetic schema has extra columns".into()));
    }
    let mut rng = seed::rng(cfg.seed);
    let records = (0..cfg.n as u64)
        .map(|id| {
            let male = rng.gen_bool(cfg.male_share);
            let rate = if male { cfg.male_positive_rate } else { cfg.female_positive_rate };
            let positive = rng.gen_bool(rate);
            let education = tiered(&mut rng, positive, cfg.education_signal, &HIGH_EDUCATION, &LOW_EDUCATION);
            let occupation = tiered(&mut rng, positive, cfg.occupation_signal, &HIGH_OCCUPATION, &LOW_OCCUPATION);
            let hours = if positive { [40, 50, 60] } else { [20, 30, 40] }[rng.gen_range(0..3)];
            let relationship = match rng.gen_range(0..10) {
                0..=4 if male => "Husband",
                0..=4 => "Wife",
                5..=7 => "Not-in-family",
                _ => "Own-child",
            };
            let mut values = vec![Value::Num(0); cols.len()];
            values[cols[0]] = Value::cat(if male { "Male" } else { "Female" });
            values[cols[1]] = Value::cat(education);
            values[cols[2]] = Value::cat(occupation);
            values[cols[3]] = Value::Num(hours);
            values[cols[4]] = Value::cat(relationship);
            values[cols[5]] = Value::cat(if positive { POSITIVE } else { NEGATIVE });
            Record { id, values }
        })
        .collect();
    let mut d = Dataset::new(schema.clone(), records, Provenance::Original);
    d.refresh_domains();
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/synthetic/schema.toml");
        Schema::load(path).unwrap()
    }

    #[test]
    fn rates_follow_the_plant() {
        let d = planted_bias(&schema(), &SyntheticConfig::new(20_000, 3)).unwrap();
        d.check_conforms().unwrap();
        let r = fairicl::augment::decorrelation_report(&d).unwrap();
        assert!((r.positive_rate["Male"] - 0.8).abs() < 0.02, "{r:?}");
        assert!((r.positive_rate["Female"] - 0.2).abs() < 0.02, "{r:?}");
        assert_eq!(d, planted_bias(&schema(), &SyntheticConfig::new(20_000, 3)).unwrap());
    }

    #[test]
    fn full_signal_makes_education_decide_the_label() {
        let mut cfg = SyntheticConfig::new(2_000, 1);
        cfg.education_signal = 1.0;
        let s = schema();
        let d = planted_bias(&s, &cfg).unwrap();
        let e = s.index_of("education").unwrap();
        for r in &d.records {
            let high = HIGH_EDUCATION.contains(&r.values[e].to_string().as_str());
            assert_eq!(high, d.is_positive(r));
        }
    }
}
