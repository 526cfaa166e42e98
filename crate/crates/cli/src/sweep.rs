//! One pipeline run per value of a single parameter, sharing every stage the
//! parameter does not touch.

use std::fs;
use std::str::FromStr;

use fairicl::metrics::AggregateReport;
use log::info;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{PipelineError, Result};
use crate::pipeline::{Pipeline, Policy};
use crate::store::{comment, fingerprint, StageDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Q,
    K,
    NTildeFraction,
    Epochs,
}

impl FromStr for SweepParam {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "q" => SweepParam::Q,
            "k" => SweepParam::K,
            "n_tilde_fraction" => SweepParam::NTildeFraction,
            "epochs" => SweepParam::Epochs,
            _ => {
                return Err(PipelineError::Config(format!(
                    "cannot sweep `{s}`; choose q, k, n_tilde_fraction or epochs"
                )))
            }
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Q => "q",
            SweepParam::K => "k",
            SweepParam::NTildeFraction => "n_tilde_fraction",
            SweepParam::Epochs => "epochs",
        }
    }

    /// A copy of `cfg` with this parameter set to `raw`. Fractions may be
    /// written as percentages.
    pub fn apply(self, cfg: &ExperimentConfig, raw: &str) -> Result<ExperimentConfig> {
        let bad = || PipelineError::Config(format!("bad value `{raw}` for {}", self.name()));
        let int = || raw.trim().parse::<usize>().map_err(|_| bad());
        let mut out = cfg.clone();
        match self {
            SweepParam::Q => out.concept.q = int()?,
            SweepParam::K => out.selection.k = int()?,
            SweepParam::Epochs => out.concept.epochs = int()?,
            SweepParam::NTildeFraction => {
                let t = raw.trim();
                out.generation.n_tilde_fraction = match t.strip_suffix('%') {
                    Some(p) => p.trim().parse::<f64>().map_err(|_| bad())? / 100.0,
                    None => t.parse().map_err(|_| bad())?,
                };
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub strategy: String,
    pub report: AggregateReport,
}

/// Run the pipeline for every value and write a combined table under
/// `<output>/sweep/`. Rows keep the order of `values`.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[String]) -> Result<(StageDir, Vec<SweepRow>)> {
    if values.is_empty() {
        return Err(PipelineError::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| param.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    // Longest concept training first so shorter runs find its per-epoch checkpoints.
    let mut order: Vec<usize> = (0..values.len()).collect();
    if param == SweepParam::Epochs {
        order.sort_by_key(|&i| std::cmp::Reverse(configs[i].concept.epochs));
    }
    let mut results = vec![None; values.len()];
    for i in order {
        info!("sweep {} = {}", param.name(), values[i]);
        let p = Pipeline::new(configs[i].clone())?;
        results[i] = Some(p.evaluate(Policy::Build)?);
    }
    let mut rows = Vec::new();
    let mut fps = Vec::new();
    for (v, r) in values.iter().zip(results) {
        let (stage, eval) = r.expect("every value evaluated");
        fps.push(stage.fingerprint);
        for k in &cfg.strategies {
            let name = k.as_str().to_string();
            rows.push(SweepRow {
                value: v.clone(),
                report: eval.strategies[&name].clone(),
                strategy: name,
            });
        }
    }
    let s = StageDir::new(
        &cfg.output,
        "sweep",
        fingerprint("sweep", &json!({ "param": param.name(), "values": values, "evaluate": fps })),
    );
    s.begin()?;
    let table = table_csv(param, &rows, &s.fingerprint)?;
    fs::write(s.path("table.csv"), table).map_err(|e| PipelineError::io(s.path("table.csv"), e))?;
    s.finish(&["table.csv".into()])?;
    Ok((s, rows))
}

fn table_csv(param: SweepParam, rows: &[SweepRow], fp: &str) -> Result<String> {
    let mut out = format!("#{}\n", comment(fp));
    out.push_str(&format!(
        "{},method,acc_mean,acc_std,f1_mean,f1_std,dsp_mean,dsp_std,deo_mean,deo_std,runs\n",
        param.name()
    ));
    for r in rows {
        let a = &r.report;
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.4},{:.4},{:.4},{:.4},{}\n",
            r.value,
            r.strategy,
            a.accuracy.mean * 100.0,
            a.accuracy.std * 100.0,
            a.f1.mean * 100.0,
            a.f1.std * 100.0,
            a.delta_sp.mean,
            a.delta_sp.std,
            a.delta_eo.mean,
            a.delta_eo.std,
            a.runs
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn values_parse_per_parameter() {
        let text = r#"
output = "o"
strategies = ["random"]
[data]
schema = "s"
template = "t"
csv = "c"
train_size = 10
test_per_cell = 1
"#;
        let cfg = ExperimentConfig::parse(text, Path::new("."), &[]).unwrap();
        let p: SweepParam = "n_tilde_fraction".parse().unwrap();
        assert_eq!(p.apply(&cfg, "25%").unwrap().generation.n_tilde_fraction, 0.25);
        assert_eq!(p.apply(&cfg, "0.5").unwrap().generation.n_tilde_fraction, 0.5);
        assert_eq!(SweepParam::K.apply(&cfg, "8").unwrap().selection.k, 8);
        assert_eq!(SweepParam::Q.apply(&cfg, "0").unwrap().concept.q, 0);
        assert!(SweepParam::Epochs.apply(&cfg, "x").is_err());
        assert!("lr".parse::<SweepParam>().is_err());
    }
}
