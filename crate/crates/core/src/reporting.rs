//! Test-split evaluation, multi-seed aggregation and learning-curve export.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::completion::Completer;
use crate::error::{check_dim, Error, Result};
use crate::exec;
use crate::network::Mlp;
use crate::problems::ProblemInstance;
use crate::training::{Phase, RunLog};

/// Max and mean violations plus mean objective over a set of predictions.
/// Means run over every (sample, constraint row) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub obj_mean: f64,
    pub eq_max: f64,
    pub eq_mean: f64,
    pub ineq_max: f64,
    pub ineq_mean: f64,
}

/// Violation summary of one prediction, the unit of the per-sample dump.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub objective: f64,
    pub eq_max: f64,
    pub eq_sum: f64,
    pub ineq_max: f64,
    pub ineq_sum: f64,
}

pub const SAMPLE_DUMP_HEADER: &str = "sample,objective,eq_max,eq_sum,ineq_max,ineq_sum";

pub fn sample_record(instance: &ProblemInstance, index: usize, d: &[f64], y: &[f64]) -> Result<SampleRecord> {
    let eq = instance.eq_residual(d, y)?;
    let ineq = instance.ineq_violation(y)?;
    Ok(SampleRecord {
        index,
        objective: instance.objective(y)?,
        eq_max: eq.iter().fold(0.0, |a: f64, v| a.max(v.abs())),
        eq_sum: eq.iter().map(|v| v.abs()).sum(),
        ineq_max: ineq.iter().fold(0.0, |a: f64, &v| a.max(v)),
        ineq_sum: ineq.iter().sum(),
    })
}

/// Combines per-sample records in order.
pub fn aggregate_records(instance: &ProblemInstance, records: &[SampleRecord]) -> Aggregate {
    let n = records.len().max(1) as f64;
    let mut agg = Aggregate::default();
    let (mut eq_sum, mut ineq_sum) = (0.0, 0.0);
    for r in records {
        agg.obj_mean += r.objective;
        agg.eq_max = agg.eq_max.max(r.eq_max);
        agg.ineq_max = agg.ineq_max.max(r.ineq_max);
        eq_sum += r.eq_sum;
        ineq_sum += r.ineq_sum;
    }
    agg.obj_mean /= n;
    if instance.n_eq > 0 {
        agg.eq_mean = eq_sum / (n * instance.n_eq as f64);
    }
    if instance.n_ineq > 0 {
        agg.ineq_mean = ineq_sum / (n * instance.n_ineq as f64);
    }
    agg
}

pub fn aggregate_predictions(instance: &ProblemInstance, samples: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Aggregate> {
    check_dim("predictions", samples.len(), ys.len())?;
    let records = samples
        .iter()
        .zip(ys)
        .enumerate()
        .map(|(i, (d, y))| sample_record(instance, i, d, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_records(instance, &records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub max_eq: f64,
    pub mean_eq: f64,
    pub max_ineq: f64,
    pub mean_ineq: f64,
    pub obj_mean: f64,
    pub gap_vs_oracle_pct: Option<f64>,
    pub inference_seconds_mean: f64,
    pub method_tag: String,
    pub seed: u64,
}

impl ViolationReport {
    fn from_aggregate(agg: Aggregate, oracle_mean: Option<f64>, seconds: f64, method_tag: &str, seed: u64) -> Self {
        Self {
            max_eq: agg.eq_max,
            mean_eq: agg.eq_mean,
            max_ineq: agg.ineq_max,
            mean_ineq: agg.ineq_mean,
            obj_mean: agg.obj_mean,
            gap_vs_oracle_pct: oracle_mean.map(|o| 100.0 * (agg.obj_mean - o) / o.abs()),
            inference_seconds_mean: seconds,
            method_tag: method_tag.to_string(),
            seed,
        }
    }

    /// Same report with the timing field zeroed, for reproducibility checks.
    pub fn untimed(&self) -> Self {
        Self { inference_seconds_mean: 0.0, ..self.clone() }
    }
}

/// A report plus the per-sample rows it was computed from.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: ViolationReport,
    pub samples: Vec<SampleRecord>,
}

impl Evaluation {
    pub fn samples_csv(&self) -> String {
        let mut out = String::from(SAMPLE_DUMP_HEADER);
        out.push('\n');
        for r in &self.samples {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.index, r.objective, r.eq_max, r.eq_sum, r.ineq_max, r.ineq_sum);
        }
        out
    }
}

/// Evaluates `model` on `samples` in eval mode. A model whose output has
/// `n - n_eq` entries is completed; one with `n` entries is used as is.
/// Timing covers a single-threaded sweep of forward passes and completions.
pub fn evaluate(
    instance: &ProblemInstance,
    samples: &[Vec<f64>],
    model: &Mlp,
    method_tag: &str,
    oracle_mean: Option<f64>,
    seed: u64,
) -> Result<Evaluation> {
    check_dim("model input", instance.n_eq, model.input_dim())?;
    let completer = if model.output_dim() == instance.n || instance.n_eq == 0 {
        None
    } else if model.output_dim() == instance.n_free() {
        Some(Completer::new(instance)?)
    } else {
        return Err(Error::DimensionMismatch {
            context: "model output",
            expected: instance.n,
            actual: model.output_dim(),
        });
    };
    let start = Instant::now();
    let ys = exec::map_indexed_sequential(samples.len(), |i| -> Result<Vec<f64>> {
        let out = model.predict(&samples[i])?;
        match &completer {
            Some(c) => Ok(c.complete(&samples[i], &out, None)?.y),
            None => Ok(out),
        }
    });
    let seconds = start.elapsed().as_secs_f64() / samples.len().max(1) as f64;
    let ys = ys.into_iter().collect::<Result<Vec<_>>>()?;
    evaluate_predictions_timed(instance, samples, &ys, method_tag, oracle_mean, seed, seconds)
}

/// Evaluates fixed predictions, such as replayed reference solutions.
pub fn evaluate_predictions(
    instance: &ProblemInstance,
    samples: &[Vec<f64>],
    ys: &[Vec<f64>],
    method_tag: &str,
    oracle_mean: Option<f64>,
    seed: u64,
) -> Result<Evaluation> {
    evaluate_predictions_timed(instance, samples, ys, method_tag, oracle_mean, seed, 0.0)
}

fn evaluate_predictions_timed(
    instance: &ProblemInstance,
    samples: &[Vec<f64>],
    ys: &[Vec<f64>],
    method_tag: &str,
    oracle_mean: Option<f64>,
    seed: u64,
    seconds: f64,
) -> Result<Evaluation> {
    check_dim("predictions", samples.len(), ys.len())?;
    let records = exec::map_indexed(samples.len(), |i| sample_record(instance, i, &samples[i], &ys[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_records(instance, &records);
    Ok(Evaluation {
        report: ViolationReport::from_aggregate(agg, oracle_mean, seconds, method_tag, seed),
        samples: records,
    })
}

/// Per-column values of a [`ViolationReport`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportColumns {
    pub max_eq: f64,
    pub mean_eq: f64,
    pub max_ineq: f64,
    pub mean_ineq: f64,
    pub obj_mean: f64,
    pub gap_vs_oracle_pct: Option<f64>,
    pub inference_seconds_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method_tag: String,
    pub runs: usize,
    pub mean: ReportColumns,
    /// Population standard deviation.
    pub std: ReportColumns,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_runs(reports: &[ViolationReport]) -> Result<RunSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidConfig("no reports to aggregate".into()))?;
    if let Some(other) = reports.iter().find(|r| r.method_tag != first.method_tag) {
        return Err(Error::MixedMethods(first.method_tag.clone(), other.method_tag.clone()));
    }
    let col = |f: fn(&ViolationReport) -> f64| {
        let mut v: Vec<f64> = reports.iter().map(f).collect();
        // Sorting makes the sums independent of report order.
        v.sort_by(f64::total_cmp);
        mean_std(&v)
    };
    let (max_eq, s_max_eq) = col(|r| r.max_eq);
    let (mean_eq, s_mean_eq) = col(|r| r.mean_eq);
    let (max_ineq, s_max_ineq) = col(|r| r.max_ineq);
    let (mean_ineq, s_mean_ineq) = col(|r| r.mean_ineq);
    let (obj_mean, s_obj_mean) = col(|r| r.obj_mean);
    let (secs, s_secs) = col(|r| r.inference_seconds_mean);
    let gap = if reports.iter().all(|r| r.gap_vs_oracle_pct.is_some()) {
        let (m, s) = col(|r| r.gap_vs_oracle_pct.unwrap_or(0.0));
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(RunSummary {
        method_tag: first.method_tag.clone(),
        runs: reports.len(),
        mean: ReportColumns {
            max_eq,
            mean_eq,
            max_ineq,
            mean_ineq,
            obj_mean,
            gap_vs_oracle_pct: gap.0,
            inference_seconds_mean: secs,
        },
        std: ReportColumns {
            max_eq: s_max_eq,
            mean_eq: s_mean_eq,
            max_ineq: s_max_ineq,
            mean_ineq: s_mean_ineq,
            obj_mean: s_obj_mean,
            gap_vs_oracle_pct: gap.1,
            inference_seconds_mean: s_secs,
        },
    })
}

pub fn save_reports(reports: &[ViolationReport], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

pub fn load_reports(path: impl AsRef<Path>) -> Result<Vec<ViolationReport>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// `epoch, obj_mean, eq_max, ineq_max` per inner epoch, tab separated.
pub fn learning_curve_tsv(log: &RunLog) -> String {
    let mut out = String::from("epoch\tobj_mean\teq_max\tineq_max\n");
    for r in log.records.iter().filter(|r| r.phase != Phase::Outer) {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.epoch, r.obj_mean, r.eq_max, r.ineq_max);
    }
    out
}
