//! Evaluation suites, per-age aggregates, and the paired seed comparison.

use std::io::Write;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::LogView;
use crate::losses::{self, PointLoss};
use crate::propensity::PropensityTable;
use crate::{Error, Result};

/// Significance level of the paired test.
pub const SIGNIFICANCE_LEVEL: f64 = 0.01;

/// MSE / MAE / ACC over a view, either plain (averaged over observed cells)
/// or self-normalized inverse-propensity weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingMetrics {
    pub mse: f64,
    pub mae: f64,
    pub acc: f64,
    pub snips_weighted: bool,
}

impl RatingMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "mse" => Some(self.mse),
            "mae" => Some(self.mae),
            "acc" => Some(self.acc),
            _ => None,
        }
    }
}

/// Plain metrics when `propensities` is `None`, SNIPS-weighted otherwise.
pub fn evaluate_suite(
    view: &LogView,
    predict: impl Fn(u32, u32, u8) -> f64,
    propensities: Option<&PropensityTable>,
) -> Result<RatingMetrics> {
    match propensities {
        None => Ok(RatingMetrics {
            mse: losses::naive_loss(view, &predict, PointLoss::Mse)?,
            mae: losses::naive_loss(view, &predict, PointLoss::Mae)?,
            acc: losses::naive_loss(view, &predict, PointLoss::Acc)?,
            snips_weighted: false,
        }),
        Some(table) => {
            let log = view.log();
            let prop = |u, i, t| table.clipped(log, u, i, t);
            Ok(RatingMetrics {
                mse: losses::snips_metric(view, &predict, prop, PointLoss::Mse, table.p_min)?,
                mae: losses::snips_metric(view, &predict, prop, PointLoss::Mae, table.p_min)?,
                acc: losses::snips_metric(view, &predict, prop, PointLoss::Acc, table.p_min)?,
                snips_weighted: true,
            })
        }
    }
}

/// Count and mean value of one item-age bin; `mean` is absent for empty
/// bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeAggregate {
    pub count: u64,
    pub mean: Option<f64>,
}

fn aggregate(view: &LogView, value: impl Fn(u32, u32, u8, f64) -> f64) -> Vec<AgeAggregate> {
    let periods = view.log().num_periods();
    let mut counts = vec![0u64; periods];
    let mut sums = vec![0.0f64; periods];
    for c in view.observed() {
        let k = c.period as usize - 1;
        counts[k] += 1;
        sums[k] += value(c.user, c.item, c.period, c.rating);
    }
    counts
        .into_iter()
        .zip(sums)
        .map(|(count, sum)| AgeAggregate {
            count,
            mean: if count == 0 { None } else { Some(sum / count as f64) },
        })
        .collect()
}

/// Observed rating count and mean per item-age bin.
pub fn per_age_aggregates(view: &LogView) -> Vec<AgeAggregate> {
    aggregate(view, |_, _, _, rating| rating)
}

/// Mean model prediction per item-age bin, over the view's observed cells.
pub fn per_age_predicted(
    view: &LogView,
    predict: impl Fn(u32, u32, u8) -> f64,
) -> Vec<AgeAggregate> {
    aggregate(view, |u, i, t, _| predict(u, i, t))
}

/// Paired-samples comparison of two per-seed metric vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedComparison {
    pub mean_diff: f64,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: bool,
}

/// Two-sided paired t-test of `a` against `b` at the 0.01 level. The
/// vectors must come from the same seeds in the same order. Zero-variance
/// differences have no t statistic; they count as significant whenever the
/// mean difference is nonzero.
pub fn paired_seed_comparison(a: &[f64], b: &[f64]) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "mismatched seed sets: {} vs {} runs",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("paired comparison needs at least 2 seeds".into()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(PairedComparison {
            mean_diff: mean,
            t_stat: None,
            p_value: None,
            significant: mean != 0.0,
        });
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::InvalidInput(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedComparison {
        mean_diff: mean,
        t_stat: Some(t),
        p_value: Some(p),
        significant: p < SIGNIFICANCE_LEVEL,
    })
}

/// Sample mean and standard deviation (n - 1 normalization; 0 for a single
/// run).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row of a metric report.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub method: String,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    pub stddev: f64,
    pub n_runs: usize,
}

/// Emit `method,split,metric,mean,stddev,n_runs` rows.
pub fn write_metric_report<W: Write>(writer: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "split", "metric", "mean", "stddev", "n_runs"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.split.clone(),
            r.metric.clone(),
            r.mean.to_string(),
            r.stddev.to_string(),
            r.n_runs.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
