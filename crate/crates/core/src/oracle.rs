//! Exact expectations of the loss estimators on small instances.
//!
//! Cells observe independently, so the expectation of an estimator is the
//! probability-weighted sum of its value over all 2^n observation patterns.
//! This is the ground truth that the unbiasedness tests compare against:
//! inverse weighting by the per-period propensity recovers the
//! full-information loss exactly, while the naive average and the static
//! per-(user, item) IPS correction do not once losses and propensities both
//! vary over periods.

use std::collections::HashMap;

use crate::losses::PointLoss;
use crate::numeric::pairwise_sum;
use crate::{Error, Result};

/// Enumeration bound: instances may have at most this many cells.
pub const MAX_CELLS: usize = 20;

/// One toy cell: a true rating, a prediction, and the probability that the
/// cell is observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyCell {
    pub user: u32,
    pub item: u32,
    pub period: u8,
    pub true_rating: f64,
    pub predicted: f64,
    pub propensity: f64,
}

/// A small instance with independent observation indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInstance {
    cells: Vec<ToyCell>,
}

impl ToyInstance {
    pub fn new(cells: Vec<ToyCell>) -> Result<Self> {
        if cells.len() > MAX_CELLS {
            return Err(Error::EnumerationBound { cells: cells.len(), limit: MAX_CELLS });
        }
        if cells.is_empty() {
            return Err(Error::InvalidInput("toy instance needs at least one cell".into()));
        }
        for c in &cells {
            if !(c.propensity > 0.0 && c.propensity < 1.0) {
                return Err(Error::PropensityDomain(format!(
                    "toy propensity {} outside (0, 1)",
                    c.propensity
                )));
            }
        }
        Ok(Self { cells })
    }

    /// The two-period single-(user, item) counterexample shape: losses
    /// `L(t_k)` against predictions fixed at zero.
    pub fn single_pair(ratings: &[f64], propensities: &[f64]) -> Result<Self> {
        assert_eq!(ratings.len(), propensities.len());
        let cells = ratings
            .iter()
            .zip(propensities)
            .enumerate()
            .map(|(k, (&y, &p))| ToyCell {
                user: 0,
                item: 0,
                period: k as u8 + 1,
                true_rating: y,
                predicted: 0.0,
                propensity: p,
            })
            .collect();
        Self::new(cells)
    }

    pub fn cells(&self) -> &[ToyCell] {
        &self.cells
    }

    fn point_losses(&self, point: PointLoss) -> Vec<f64> {
        self.cells.iter().map(|c| point.value(c.predicted, c.true_rating)).collect()
    }

    /// Static per-(user, item) propensity: the probability of observing the
    /// pair at least once, `1 - prod_t (1 - p_t)`.
    fn static_pair_propensities(&self) -> Vec<f64> {
        let mut pair_miss: HashMap<(u32, u32), f64> = HashMap::new();
        for c in &self.cells {
            *pair_miss.entry((c.user, c.item)).or_insert(1.0) *= 1.0 - c.propensity;
        }
        self.cells
            .iter()
            .map(|c| 1.0 - pair_miss[&(c.user, c.item)])
            .collect()
    }
}

/// Which estimator the oracle evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleEstimator {
    Full,
    Naive,
    StaticIps,
    Dancer,
    Snips,
}

impl OracleEstimator {
    pub fn as_str(self) -> &'static str {
        match self {
            OracleEstimator::Full => "full",
            OracleEstimator::Naive => "naive",
            OracleEstimator::StaticIps => "static-ips",
            OracleEstimator::Dancer => "dancer",
            OracleEstimator::Snips => "snips",
        }
    }
}

/// Estimator value on one observation pattern. An estimator over zero
/// observed cells contributes 0, the convention implied by the closed-form
/// expectation of the naive loss.
fn estimator_on_pattern(
    estimator: OracleEstimator,
    pattern: u32,
    losses: &[f64],
    dynamic_p: &[f64],
    static_p: &[f64],
) -> f64 {
    let n = losses.len();
    match estimator {
        OracleEstimator::Full => losses.iter().sum::<f64>() / n as f64,
        OracleEstimator::Naive => {
            let observed = pattern.count_ones();
            if observed == 0 {
                return 0.0;
            }
            let mut sum = 0.0;
            for (j, &l) in losses.iter().enumerate() {
                if pattern & (1 << j) != 0 {
                    sum += l;
                }
            }
            sum / f64::from(observed)
        }
        OracleEstimator::StaticIps | OracleEstimator::Dancer => {
            let p = if estimator == OracleEstimator::Dancer { dynamic_p } else { static_p };
            let mut sum = 0.0;
            for (j, &l) in losses.iter().enumerate() {
                if pattern & (1 << j) != 0 {
                    sum += l / p[j];
                }
            }
            sum / n as f64
        }
        OracleEstimator::Snips => {
            if pattern == 0 {
                return 0.0;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for (j, &l) in losses.iter().enumerate() {
                if pattern & (1 << j) != 0 {
                    num += l / dynamic_p[j];
                    den += 1.0 / dynamic_p[j];
                }
            }
            num / den
        }
    }
}

/// Exact expectation of an estimator over all observation patterns.
pub fn expected_loss(
    instance: &ToyInstance,
    estimator: OracleEstimator,
    point: PointLoss,
) -> Result<f64> {
    let n = instance.cells.len();
    if n > MAX_CELLS {
        return Err(Error::EnumerationBound { cells: n, limit: MAX_CELLS });
    }
    let losses = instance.point_losses(point);
    let dynamic_p: Vec<f64> = instance.cells.iter().map(|c| c.propensity).collect();
    let static_p = instance.static_pair_propensities();

    let mut terms = Vec::with_capacity(1 << n);
    for pattern in 0..(1u32 << n) {
        let mut prob = 1.0;
        for (j, &p) in dynamic_p.iter().enumerate() {
            prob *= if pattern & (1 << j) != 0 { p } else { 1.0 - p };
        }
        terms.push(
            prob * estimator_on_pattern(estimator, pattern, &losses, &dynamic_p, &static_p),
        );
    }
    Ok(pairwise_sum(&terms))
}

/// Closed form of the expected naive loss on a two-cell instance:
/// `p1 L1 + p2 L2 - (p1 p2 / 2)(L1 + L2)`.
pub fn closed_form_naive(instance: &ToyInstance, point: PointLoss) -> Result<f64> {
    if instance.cells.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "closed form needs exactly 2 cells, got {}",
            instance.cells.len()
        )));
    }
    let l = instance.point_losses(point);
    let p1 = instance.cells[0].propensity;
    let p2 = instance.cells[1].propensity;
    Ok(p1 * l[0] + p2 * l[1] - p1 * p2 / 2.0 * (l[0] + l[1]))
}

/// Expected estimator value minus the full-information loss; zero iff the
/// estimator is unbiased on the instance.
pub fn bias_gap(
    instance: &ToyInstance,
    estimator: OracleEstimator,
    point: PointLoss,
) -> Result<f64> {
    let expected = expected_loss(instance, estimator, point)?;
    let full = expected_loss(instance, OracleEstimator::Full, point)?;
    Ok(expected - full)
}

/// The two-period instance used throughout: propensities (0.8, 0.2) and
/// squared-error point losses (1, 4) against zero predictions.
pub fn counterexample_instance() -> ToyInstance {
    ToyInstance::single_pair(&[1.0, 2.0], &[0.8, 0.2]).expect("static instance is valid")
}
