//! Utility and group-fairness metrics over prediction records.
//!
//! Failed queries (no prediction) are excluded everywhere and counted.
//! Unparseable answers count as negative predictions in the headline numbers
//! and are dropped in the secondary sensitivity report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Group;
use crate::error::{Error, Result};
use crate::inference::PredictionRecord;

/// Share of failed queries above which a run is marked invalid.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merged(&self, o: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    pub fn positive_rate(&self) -> f64 {
        (self.tp + self.fp) as f64 / self.total() as f64
    }

    pub fn true_positive_rate(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }
}

/// (truth, prediction, group) of every record that produced a prediction.
fn outcomes(records: &[PredictionRecord], skip_unparseable: bool) -> impl Iterator<Item = (bool, bool, Group)> + '_ {
    records
        .iter()
        .filter(move |r| !(skip_unparseable && r.unparseable))
        .filter_map(|r| r.predicted.map(|p| (r.true_label, p, r.group)))
}

fn by_group(records: &[PredictionRecord], skip_unparseable: bool) -> BTreeMap<Group, Confusion> {
    let mut out = BTreeMap::new();
    for (t, p, g) in outcomes(records, skip_unparseable) {
        out.entry(g).or_insert_with(Confusion::default).add(t, p);
    }
    out
}

fn both_groups(cells: &BTreeMap<Group, Confusion>) -> Result<(Confusion, Confusion)> {
    let get = |g: Group| {
        cells
            .get(&g)
            .copied()
            .ok_or_else(|| Error::GroupAbsent(format!("{g:?}").to_lowercase()))
    };
    Ok((get(Group::Majority)?, get(Group::Minority)?))
}

/// Positive-prediction rate of the majority minus that of the minority.
pub fn signed_parity_gap(records: &[PredictionRecord]) -> Result<f64> {
    let (a, b) = both_groups(&by_group(records, false))?;
    Ok(a.positive_rate() - b.positive_rate())
}

pub fn statistical_parity(records: &[PredictionRecord]) -> Result<f64> {
    signed_parity_gap(records).map(f64::abs)
}

/// True-positive rate of the majority minus that of the minority.
pub fn signed_opportunity_gap(records: &[PredictionRecord]) -> Result<f64> {
    let (a, b) = both_groups(&by_group(records, false))?;
    for (g, c) in [("majority", a), ("minority", b)] {
        if c.tp + c.fn_ == 0 {
            return Err(Error::GroupAbsent(format!("{g} group has no positive-labeled queries")));
        }
    }
    Ok(a.true_positive_rate() - b.true_positive_rate())
}

pub fn equal_opportunity(records: &[PredictionRecord]) -> Result<f64> {
    signed_opportunity_gap(records).map(f64::abs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub accuracy: f64,
    /// Binary F1 on the positive class.
    pub f1: f64,
    /// Mean of the positive- and negative-class F1.
    pub macro_f1: f64,
    /// Set when there were no predicted and no true positives, so F1 is 0 by
    /// convention.
    pub f1_undefined: bool,
}

/// F1 as `2 tp / (2 tp + fp + fn)`, equal to the harmonic mean of precision and
/// recall; 0 when that is undefined.
fn f1_of(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

fn utility_of(c: &Confusion) -> Utility {
    let f1 = f1_of(c.tp, c.fp, c.fn_);
    let f1_neg = f1_of(c.tn, c.fn_, c.fp);
    Utility {
        accuracy: if c.total() == 0 {
            0.0
        } else {
            (c.tp + c.tn) as f64 / c.total() as f64
        },
        f1,
        macro_f1: (f1 + f1_neg) / 2.0,
        f1_undefined: c.tp + c.fp + c.fn_ == 0,
    }
}

pub fn utility(records: &[PredictionRecord]) -> Utility {
    let mut c = Confusion::default();
    for (t, p, _) in outcomes(records, false) {
        c.add(t, p);
    }
    utility_of(&c)
}

pub fn accuracy_f1(records: &[PredictionRecord]) -> (f64, f64) {
    let u = utility(records);
    (u.accuracy, u.f1)
}

/// Headline metrics with unparseable answers removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub evaluated: u64,
    pub accuracy: f64,
    pub f1: f64,
    pub delta_sp: Option<f64>,
    pub delta_eo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    /// Queries with a prediction, unparseable ones included.
    pub evaluated: u64,
    pub failed: u64,
    pub unparseable: u64,
    /// False when more than 1% of queries failed.
    pub valid: bool,
    pub accuracy: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub f1_undefined: bool,
    pub delta_sp: f64,
    pub delta_eo: f64,
    pub signed_sp: f64,
    pub signed_eo: f64,
    pub confusion: BTreeMap<Group, Confusion>,
    pub without_unparseable: Sensitivity,
}

fn sensitivity(records: &[PredictionRecord]) -> Sensitivity {
    let kept: Vec<PredictionRecord> = records.iter().filter(|r| !r.unparseable).cloned().collect();
    let u = utility(&kept);
    Sensitivity {
        evaluated: outcomes(&kept, false).count() as u64,
        accuracy: u.accuracy,
        f1: u.f1,
        delta_sp: statistical_parity(&kept).ok(),
        delta_eo: equal_opportunity(&kept).ok(),
    }
}

pub fn evaluate(records: &[PredictionRecord], seed: u64) -> Result<EvalReport> {
    let confusion = by_group(records, false);
    let evaluated: u64 = confusion.values().map(Confusion::total).sum();
    if evaluated == 0 {
        return Err(Error::Config("no predictions to evaluate".into()));
    }
    let failed = records.iter().filter(|r| r.predicted.is_none()).count() as u64;
    let unparseable = records
        .iter()
        .filter(|r| r.predicted.is_some() && r.unparseable)
        .count() as u64;
    let u = utility(records);
    let signed_sp = signed_parity_gap(records)?;
    let signed_eo = signed_opportunity_gap(records)?;
    Ok(EvalReport {
        seed,
        evaluated,
        failed,
        unparseable,
        valid: failed as f64 <= MAX_FAILURE_RATE * records.len() as f64,
        accuracy: u.accuracy,
        f1: u.f1,
        macro_f1: u.macro_f1,
        f1_undefined: u.f1_undefined,
        delta_sp: signed_sp.abs(),
        delta_eo: signed_eo.abs(),
        signed_sp,
        signed_eo,
        confusion,
        without_unparseable: sensitivity(records),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub accuracy: MeanStd,
    pub f1: MeanStd,
    pub macro_f1: MeanStd,
    pub delta_sp: MeanStd,
    pub delta_eo: MeanStd,
    pub failed: u64,
    pub unparseable: u64,
    pub all_valid: bool,
}

/// Mean and population standard deviation of each metric. Reports are sorted
/// by seed first so the result does not depend on their order.
pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        a.seed
            .cmp(&b.seed)
            .then(a.accuracy.total_cmp(&b.accuracy))
            .then(a.delta_sp.total_cmp(&b.delta_sp))
            .then(a.delta_eo.total_cmp(&b.delta_eo))
            .then(a.f1.total_cmp(&b.f1))
    });
    let col = |f: fn(&EvalReport) -> f64| mean_std(&sorted.iter().map(|r| f(r)).collect::<Vec<_>>());
    Ok(AggregateReport {
        runs: reports.len(),
        accuracy: col(|r| r.accuracy),
        f1: col(|r| r.f1),
        macro_f1: col(|r| r.macro_f1),
        delta_sp: col(|r| r.delta_sp),
        delta_eo: col(|r| r.delta_eo),
        failed: reports.iter().map(|r| r.failed).sum(),
        unparseable: reports.iter().map(|r| r.unparseable).sum(),
        all_valid: reports.iter().all(|r| r.valid),
    })
}

/// Summary table with one row per method: accuracy and F1 in percent, the
/// fairness gaps as fractions, each as mean and std.
pub fn summary_csv(rows: &[(String, AggregateReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method", "acc_mean", "acc_std", "f1_mean", "f1_std", "dsp_mean", "dsp_std", "deo_mean", "deo_std", "runs",
    ])?;
    for (name, a) in rows {
        w.write_record([
            name.clone(),
            format!("{:.2}", 100.0 * a.accuracy.mean),
            format!("{:.2}", 100.0 * a.accuracy.std),
            format!("{:.2}", 100.0 * a.f1.mean),
            format!("{:.2}", 100.0 * a.f1.std),
            format!("{:.4}", a.delta_sp.mean),
            format!("{:.4}", a.delta_sp.std),
            format!("{:.4}", a.delta_eo.mean),
            format!("{:.4}", a.delta_eo.std),
            a.runs.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
