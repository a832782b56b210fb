//! Loss estimators over a partition.
//!
//! The full-information loss averages over every presence-restricted cell
//! and needs complete ground truth; the naive estimator averages over
//! observed cells only; static-IPS and DANCER divide each observed loss by a
//! propensity and normalize by the presence-restricted cell count; SNIPS is
//! the self-normalized variant. The observation task uses the Bernoulli NLL
//! and its perplexity.

use crate::dataset::LogView;
use crate::numeric::PairwiseAccumulator;
use crate::{Error, Result};

/// Default clipping floor applied to propensities before inversion.
pub const DEFAULT_P_MIN: f64 = 1e-3;

/// Per-cell comparison function between a prediction and an actual value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLoss {
    Mse,
    Mae,
    Acc,
    Nll,
}

impl PointLoss {
    /// For `Nll`, `actual` is the observation indicator in {0, 1} and
    /// `predicted` must lie strictly inside (0, 1).
    #[inline]
    pub fn value(self, predicted: f64, actual: f64) -> f64 {
        match self {
            PointLoss::Mse => (predicted - actual) * (predicted - actual),
            PointLoss::Mae => (predicted - actual).abs(),
            PointLoss::Acc => {
                if round_to_half_grid(predicted) == round_to_half_grid(actual) {
                    1.0
                } else {
                    0.0
                }
            }
            PointLoss::Nll => bernoulli_nll(predicted, actual),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PointLoss::Mse => "mse",
            PointLoss::Mae => "mae",
            PointLoss::Acc => "acc",
            PointLoss::Nll => "nll",
        }
    }
}

/// Round to the nearest rating grid point: multiples of 0.5 clipped to
/// [0.5, 5.0], ties away from zero.
#[inline]
pub fn round_to_half_grid(x: f64) -> f64 {
    ((x * 2.0).round() / 2.0).clamp(0.5, 5.0)
}

/// Positive Bernoulli negative log-likelihood of one indicator.
#[inline]
pub fn bernoulli_nll(p: f64, o: f64) -> f64 {
    -(o * p.ln() + (1.0 - o) * (1.0 - p).ln())
}

/// Clamp a probability strictly inside the unit interval, the same guard the
/// NLL optimizer applies to sigmoid outputs.
#[inline]
pub fn clamp_open_unit(p: f64) -> f64 {
    p.clamp(1e-6, 1.0 - 1e-6)
}

fn check_propensity(p: f64, user: u32, item: u32, period: u8) -> Result<f64> {
    if !p.is_finite() || p <= 0.0 {
        return Err(Error::PropensityDomain(format!(
            "propensity {p} at cell ({user}, {item}, {period})"
        )));
    }
    Ok(p)
}

/// Mean point loss over every presence-restricted cell of the view's log.
/// Requires complete ground truth, so it is only computable on simulated
/// data or toy instances.
pub fn full_loss(
    view: &LogView,
    predict: impl Fn(u32, u32, u8) -> f64,
    truth: impl Fn(u32, u32, u8) -> Option<f64>,
    point: PointLoss,
) -> Result<f64> {
    let mut acc = PairwiseAccumulator::new();
    let mut n = 0u64;
    for cell in view.cells() {
        let y = truth(cell.user, cell.item, cell.period).ok_or_else(|| {
            Error::IncompleteGroundTruth(format!(
                "({}, {}, {})",
                cell.user, cell.item, cell.period
            ))
        })?;
        acc.push(point.value(predict(cell.user, cell.item, cell.period), y));
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyPartition("no presence-restricted cells".into()));
    }
    Ok(acc.total() / n as f64)
}

/// Mean point loss over the view's observed cells only.
pub fn naive_loss(
    view: &LogView,
    predict: impl Fn(u32, u32, u8) -> f64,
    point: PointLoss,
) -> Result<f64> {
    if view.is_empty() {
        return Err(Error::EmptyPartition(view.name().into()));
    }
    let mut acc = PairwiseAccumulator::new();
    for c in view.observed() {
        acc.push(point.value(predict(c.user, c.item, c.period), c.rating));
    }
    Ok(acc.total() / view.len() as f64)
}

fn ips_loss(
    view: &LogView,
    predict: impl Fn(u32, u32, u8) -> f64,
    propensity: impl Fn(u32, u32, u8) -> f64,
    point: PointLoss,
    p_min: f64,
) -> Result<f64> {
    let mut acc = PairwiseAccumulator::new();
    for c in view.observed() {
        let p = check_propensity(propensity(c.user, c.item, c.period), c.user, c.item, c.period)?
            .max(p_min);
        acc.push(point.value(predict(c.user, c.item, c.period), c.rating) / p);
    }
    let n = view.log().presence_cell_count();
    Ok(acc.total() / n as f64)
}

/// Inverse-propensity estimator with time-invariant propensities: the
/// supplied lookup must not depend on the period. Observed losses are
/// weighted by `1/p[u,i]` and normalized by the presence-restricted cell
/// count.
pub fn static_ips_loss(
    view: &LogView,
    predict: impl Fn(u32, u32, u8) -> f64,
    propensity: impl Fn(u32, u32, u8) -> f64,
    point: PointLoss,
    p_min: f64,
) -> Result<f64> {
    ips_loss(view, predict, propensity, point, p_min)
}

/// Inverse-propensity estimator with fully dynamic propensities `p[u,i,t]`.
/// Unbiased for the full-information loss when the propensities are exact.
pub fn dancer_loss(
    view: &LogView,
    predict: impl Fn(u32, u32, u8) -> f64,
    propensity: impl Fn(u32, u32, u8) -> f64,
    point: PointLoss,
    p_min: f64,
) -> Result<f64> {
    ips_loss(view, predict, propensity, point, p_min)
}

/// Self-normalized inverse-propensity estimator:
/// `(sum L/p) / (sum 1/p)` over observed cells. Invariant under uniform
/// scaling of all propensities.
pub fn snips_metric(
    view: &LogView,
    predict: impl Fn(u32, u32, u8) -> f64,
    propensity: impl Fn(u32, u32, u8) -> f64,
    point: PointLoss,
    p_min: f64,
) -> Result<f64> {
    if view.is_empty() {
        return Err(Error::EmptyPartition(view.name().into()));
    }
    let mut num = PairwiseAccumulator::new();
    let mut den = PairwiseAccumulator::new();
    for c in view.observed() {
        let p = check_propensity(propensity(c.user, c.item, c.period), c.user, c.item, c.period)?
            .max(p_min);
        num.push(point.value(predict(c.user, c.item, c.period), c.rating) / p);
        den.push(1.0 / p);
    }
    Ok(num.total() / den.total())
}

/// Mean Bernoulli NLL of the observation estimates over every
/// presence-restricted cell; the view's observed set supplies the positive
/// indicators.
pub fn propensity_nll(view: &LogView, estimate: impl Fn(u32, u32, u8) -> f64) -> Result<f64> {
    let mut acc = PairwiseAccumulator::new();
    let mut n = 0u64;
    for cell in view.cells() {
        let p = estimate(cell.user, cell.item, cell.period);
        if !p.is_finite() || p <= 0.0 || p >= 1.0 {
            return Err(Error::PropensityDomain(format!(
                "estimate {p} at cell ({}, {}, {}) outside (0, 1)",
                cell.user, cell.item, cell.period
            )));
        }
        acc.push(bernoulli_nll(p, if cell.observed { 1.0 } else { 0.0 }));
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyPartition("no presence-restricted cells".into()));
    }
    Ok(acc.total() / n as f64)
}

/// Perplexity of the observation estimates: `2^(NLL / ln 2)`, i.e. two to
/// the mean base-2 NLL. Always at least 1.
pub fn perplexity(view: &LogView, estimate: impl Fn(u32, u32, u8) -> f64) -> Result<f64> {
    Ok(nll_to_perplexity(propensity_nll(view, estimate)?))
}

/// Convert an NLL in nats to perplexity.
#[inline]
pub fn nll_to_perplexity(nll_nats: f64) -> f64 {
    (nll_nats / std::f64::consts::LN_2).exp2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AgeBinning, InteractionLog, LogView, RatingEvent};
    use std::sync::Arc;

    /// Log with `n` observed cells (one user, n items, single period); the
    /// view observes the first `k`.
    fn toy(n: u32, k: usize) -> (Arc<InteractionLog>, LogView) {
        let binning = AgeBinning::new(vec![0.0]).unwrap();
        let events: Vec<RatingEvent> =
            (0..n).map(|i| RatingEvent::new(1, i + 1, 3.0, 0).unwrap()).collect();
        let log = InteractionLog::from_events(&events, binning).unwrap();
        let cells = log.observed_cells()[..k].to_vec();
        let view = LogView::new(Arc::clone(&log), "test", cells);
        (log, view)
    }

    /// Predictor giving per-item squared errors from a list.
    fn pred_with_errors(errors: &'static [f64]) -> impl Fn(u32, u32, u8) -> f64 {
        move |_, i, _| 3.0 + errors[i as usize]
    }

    #[test]
    fn full_loss_mean_and_perfect() {
        let (_, view) = toy(2, 2);
        // L values {1, 4}: errors 1 and 2.
        let got = full_loss(
            &view,
            pred_with_errors(&[1.0, 2.0]),
            |_, _, _| Some(3.0),
            PointLoss::Mse,
        )
        .unwrap();
        assert!((got - 2.5).abs() < 1e-12);
        let zero =
            full_loss(&view, |_, _, _| 3.0, |_, _, _| Some(3.0), PointLoss::Mse).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn full_loss_requires_complete_truth() {
        let (_, view) = toy(2, 2);
        let res = full_loss(
            &view,
            |_, _, _| 0.0,
            |_, i, _| if i == 0 { Some(3.0) } else { None },
            PointLoss::Mse,
        );
        assert!(matches!(res, Err(Error::IncompleteGroundTruth(_))));
    }

    #[test]
    fn naive_loss_examples() {
        let (_, view) = toy(2, 2);
        let got = naive_loss(&view, pred_with_errors(&[1.0, 2.0]), PointLoss::Mse).unwrap();
        assert!((got - 2.5).abs() < 1e-12);

        let (_, single) = toy(1, 1);
        let got = naive_loss(&single, pred_with_errors(&[3.0]), PointLoss::Mse).unwrap();
        assert!((got - 9.0).abs() < 1e-12);

        let (_, empty) = toy(2, 0);
        assert!(matches!(
            naive_loss(&empty, |_, _, _| 0.0, PointLoss::Mse),
            Err(Error::EmptyPartition(_))
        ));
    }

    #[test]
    fn naive_equals_full_when_everything_observed() {
        let (_, view) = toy(5, 5);
        let pred = pred_with_errors(&[0.5, 1.0, 1.5, 2.0, 0.0]);
        let naive = naive_loss(&view, &pred, PointLoss::Mse).unwrap();
        let full = full_loss(&view, &pred, |_, _, _| Some(3.0), PointLoss::Mse).unwrap();
        assert!((naive - full).abs() < 1e-12);
    }

    #[test]
    fn static_ips_single_term() {
        // 2 presence cells, one observed with L = 1 and p = 0.5.
        let (_, view) = toy(2, 1);
        let got = static_ips_loss(
            &view,
            pred_with_errors(&[1.0, 0.0]),
            |_, _, _| 0.5,
            PointLoss::Mse,
            DEFAULT_P_MIN,
        )
        .unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ips_with_unit_propensity_and_full_observation_is_full_loss() {
        let (_, view) = toy(4, 4);
        let pred = pred_with_errors(&[1.0, 0.5, 2.0, 0.25]);
        let full = full_loss(&view, &pred, |_, _, _| Some(3.0), PointLoss::Mse).unwrap();
        for f in [
            static_ips_loss(&view, &pred, |_, _, _| 1.0, PointLoss::Mse, DEFAULT_P_MIN).unwrap(),
            dancer_loss(&view, &pred, |_, _, _| 1.0, PointLoss::Mse, DEFAULT_P_MIN).unwrap(),
            snips_metric(&view, &pred, |_, _, _| 1.0, PointLoss::Mse, DEFAULT_P_MIN).unwrap(),
            naive_loss(&view, &pred, PointLoss::Mse).unwrap(),
        ] {
            assert!((f - full).abs() < 1e-12);
        }
    }

    #[test]
    fn dancer_two_cells() {
        let (_, view) = toy(2, 2);
        let got = dancer_loss(
            &view,
            pred_with_errors(&[1.0, 2.0]),
            |_, _, _| 0.5,
            PointLoss::Mse,
            DEFAULT_P_MIN,
        )
        .unwrap();
        assert!((got - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_propensity_is_a_domain_error() {
        let (_, view) = toy(2, 2);
        let res =
            dancer_loss(&view, |_, _, _| 0.0, |_, _, _| 0.0, PointLoss::Mse, DEFAULT_P_MIN);
        assert!(matches!(res, Err(Error::PropensityDomain(_))));
    }

    #[test]
    fn snips_examples() {
        let (_, view) = toy(2, 2);
        let pred = pred_with_errors(&[1.0, 2.0]);
        // Uniform p cancels: equals naive.
        let naive = naive_loss(&view, &pred, PointLoss::Mse).unwrap();
        let snips =
            snips_metric(&view, &pred, |_, _, _| 0.37, PointLoss::Mse, DEFAULT_P_MIN).unwrap();
        assert!((snips - naive).abs() < 1e-12);

        // L = (1, 4), p = (0.5, 0.25): (2 + 16) / (2 + 4) = 3.
        let p = |_: u32, i: u32, _: u8| if i == 0 { 0.5 } else { 0.25 };
        let got = snips_metric(&view, &pred, p, PointLoss::Mse, DEFAULT_P_MIN).unwrap();
        assert!((got - 3.0).abs() < 1e-12);

        // Single observed cell: equals its point loss regardless of p.
        let (_, single) = toy(3, 1);
        let got = snips_metric(
            &single,
            pred_with_errors(&[2.0, 0.0, 0.0]),
            |_, _, _| 0.01,
            PointLoss::Mse,
            DEFAULT_P_MIN,
        )
        .unwrap();
        assert!((got - 4.0).abs() < 1e-12);
    }

    #[test]
    fn snips_invariant_to_uniform_scaling() {
        let (_, view) = toy(6, 4);
        let pred = pred_with_errors(&[1.0, 0.3, 0.9, 1.7, 0.0, 0.0]);
        let base = |_: u32, i: u32, _: u8| 0.1 + 0.12 * f64::from(i);
        let a = snips_metric(&view, &pred, base, PointLoss::Mse, 0.0).unwrap();
        let b = snips_metric(
            &view,
            &pred,
            |u, i, t| 0.5 * base(u, i, t),
            PointLoss::Mse,
            0.0,
        )
        .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn propensity_nll_examples() {
        let (_, view) = toy(4, 4);
        let got = propensity_nll(&view, |_, _, _| 0.5).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12);

        // Near-perfect predictor: NLL tends to zero.
        let eps = 1e-9;
        let perfect = propensity_nll(&view, |_, _, _| 1.0 - eps).unwrap();
        assert!(perfect < 1e-8);

        // Cells o = (1, 0), estimates (0.8, 0.4): -(ln 0.8 + ln 0.6) / 2.
        let (_, half) = toy(2, 1);
        let got =
            propensity_nll(&half, |_, i, _| if i == 0 { 0.8 } else { 0.4 }).unwrap();
        let expect = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.3669846).abs() < 1e-7);
    }

    #[test]
    fn propensity_nll_rejects_out_of_domain() {
        let (_, view) = toy(2, 1);
        assert!(matches!(
            propensity_nll(&view, |_, _, _| 1.0),
            Err(Error::PropensityDomain(_))
        ));
        assert!(matches!(
            propensity_nll(&view, |_, _, _| 0.0),
            Err(Error::PropensityDomain(_))
        ));
    }

    #[test]
    fn perplexity_examples() {
        let (_, view) = toy(4, 4);
        let ppl = perplexity(&view, |_, _, _| 1.0 - 1e-12).unwrap();
        assert!((ppl - 1.0).abs() < 1e-9);
        let (_, half) = toy(2, 1);
        let ppl = perplexity(&half, |_, _, _| 0.5).unwrap();
        assert!((ppl - 2.0).abs() < 1e-12);
        // Table-style conversion: 0.0697 nats -> about 1.0722.
        assert!((nll_to_perplexity(0.0697) - 1.0722).abs() < 5e-4);
        assert!(nll_to_perplexity(0.0) >= 1.0);
    }

    #[test]
    fn acc_rounding_rules() {
        assert_eq!(round_to_half_grid(4.3), 4.5);
        assert_eq!(round_to_half_grid(4.2), 4.0);
        assert_eq!(round_to_half_grid(0.1), 0.5);
        assert_eq!(round_to_half_grid(9.9), 5.0);
        // Ties round half away from zero: 4.25 * 2 = 8.5 -> 9 -> 4.5.
        assert_eq!(round_to_half_grid(4.25), 4.5);
        assert_eq!(PointLoss::Acc.value(4.3, 4.0), 0.0);
        assert_eq!(PointLoss::Acc.value(4.2, 4.0), 1.0);
        assert!((PointLoss::Mse.value(4.3, 4.0) - 0.09).abs() < 1e-12);
        assert!((PointLoss::Mae.value(4.3, 4.0) - 0.3).abs() < 1e-12);
    }
}
