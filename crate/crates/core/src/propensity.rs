//! Observation-probability tables.
//!
//! Counting estimators read closed-form ratios off the training partition
//! (Constant, Pop, T-Pop, TG-Pop); model-based estimation fits any
//! sigmoid-linked factorization by minimizing the Bernoulli NLL over the
//! presence cube. Tables carry a multiplicative scale (for the time-based
//! 0.25 correction and mean normalization) and a clip floor applied before
//! inversion.

use std::io::Write;
use std::sync::Arc;

use crate::dataset::{InteractionLog, LogView};
use crate::losses::DEFAULT_P_MIN;
use crate::model::{counting_predict, predict, CountingStats, Family, Link, ModelParams, ModelSpec};
use crate::numeric::PairwiseAccumulator;
use crate::train::{train, Estimator, TrainConfig, TrainingReport};
use crate::{Error, Result};

/// Where a table's values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensitySource {
    Constant,
    Pop,
    TPop,
    TgPop,
    Model(Family),
    GroundTruth,
    Uniform,
}

impl PropensitySource {
    pub fn as_str(self) -> &'static str {
        match self {
            PropensitySource::Constant => "constant",
            PropensitySource::Pop => "pop",
            PropensitySource::TPop => "t-pop",
            PropensitySource::TgPop => "tg-pop",
            PropensitySource::Model(Family::Mf) => "mf",
            PropensitySource::Model(Family::Tmf) => "tmf",
            PropensitySource::Model(Family::Ttf) => "ttf",
            PropensitySource::Model(Family::TtfPlusPlus) => "ttf++",
            PropensitySource::Model(Family::Tmtf) => "tmtf",
            PropensitySource::Model(Family::ItemAge) => "item-age",
            PropensitySource::Model(_) => "model",
            PropensitySource::GroundTruth => "ground-truth",
            PropensitySource::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone)]
enum TableValues {
    Scalar(f64),
    PerItem(Vec<f64>),
    PerItemAge { values: Vec<f64>, n_periods: usize },
    PerAge(Vec<f64>),
    Model { spec: ModelSpec, params: Arc<ModelParams> },
}

/// Estimated observation probabilities with provenance, scale and clipping
/// metadata. Lookups take the log so presence zeroing can be answered.
#[derive(Debug, Clone)]
pub struct PropensityTable {
    source: PropensitySource,
    values: TableValues,
    scale: f64,
    pub p_min: f64,
    zero_outside_presence: bool,
}

impl PropensityTable {
    fn with_values(source: PropensitySource, values: TableValues) -> Self {
        Self { source, values, scale: 1.0, p_min: DEFAULT_P_MIN, zero_outside_presence: false }
    }

    /// A constant table; `uniform(1.0)` makes IPS estimators degenerate to
    /// naive averaging.
    pub fn uniform(p: f64) -> Self {
        Self::with_values(PropensitySource::Uniform, TableValues::Scalar(p))
    }

    /// Table backed by a fitted sigmoid-linked model.
    pub fn from_model(spec: ModelSpec, params: ModelParams) -> Self {
        Self::with_values(
            PropensitySource::Model(spec.family),
            TableValues::Model { spec, params: Arc::new(params) },
        )
    }

    /// Dense per-(item, period) table, e.g. simulated ground truth.
    pub fn from_item_age(source: PropensitySource, values: Vec<f64>, n_periods: usize) -> Self {
        Self::with_values(source, TableValues::PerItemAge { values, n_periods })
    }

    pub fn source(&self) -> PropensitySource {
        self.source
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Force cells outside a user's presence to exactly zero.
    pub fn zero_outside_presence(mut self, on: bool) -> Self {
        self.zero_outside_presence = on;
        self
    }

    pub fn with_p_min(mut self, p_min: f64) -> Self {
        self.p_min = p_min;
        self
    }

    /// Scaled table value, capped into [0, 1]. No flooring: sampling paths
    /// need genuine zeros.
    pub fn value(&self, log: &InteractionLog, u: u32, i: u32, t: u8) -> f64 {
        if self.zero_outside_presence && !log.in_presence(u, i, t) {
            return 0.0;
        }
        let raw = match &self.values {
            TableValues::Scalar(v) => *v,
            TableValues::PerItem(v) => v[i as usize],
            TableValues::PerItemAge { values, n_periods } => {
                values[i as usize * n_periods + t as usize - 1]
            }
            TableValues::PerAge(v) => v[t as usize - 1],
            TableValues::Model { spec, params } => predict(spec, params, u, i, t),
        };
        (raw * self.scale).clamp(0.0, 1.0)
    }

    /// Table value floored at `p_min`; what IPS weighting divides by.
    #[inline]
    pub fn clipped(&self, log: &InteractionLog, u: u32, i: u32, t: u8) -> f64 {
        self.value(log, u, i, t).max(self.p_min)
    }

    /// Mean of [`value`](Self::value) over the presence-restricted cells.
    pub fn mean_in_presence(&self, log: &Arc<InteractionLog>) -> f64 {
        let view = log.full_view();
        let mut acc = PairwiseAccumulator::new();
        let mut n = 0u64;
        for cell in view.cells() {
            acc.push(self.value(log, cell.user, cell.item, cell.period));
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            acc.total() / n as f64
        }
    }

    /// Multiply all values by a positive factor (clipping into [0, 1]
    /// happens at lookup).
    pub fn rescale(&mut self, factor: f64) -> Result<()> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Config(format!("rescale factor {factor} must be positive")));
        }
        self.scale *= factor;
        Ok(())
    }

    /// Rescale so the mean over in-presence cells becomes `target`.
    pub fn rescale_to_mean(&mut self, log: &Arc<InteractionLog>, target: f64) -> Result<()> {
        if !(0.0 < target && target < 1.0) {
            return Err(Error::Config(format!("target mean {target} outside (0, 1)")));
        }
        let mean = self.mean_in_presence(log);
        if mean <= 0.0 {
            return Err(Error::PropensityDomain(
                "cannot rescale a table with zero mean".into(),
            ));
        }
        self.rescale(target / mean)?;
        self.warn_if_degenerate(log);
        Ok(())
    }

    fn warn_if_degenerate(&self, log: &Arc<InteractionLog>) {
        let view = log.full_view();
        let mut max = 0.0f64;
        for cell in view.cells() {
            max = max.max(self.value(log, cell.user, cell.item, cell.period));
        }
        if max <= self.p_min {
            log::warn!(
                "degenerate propensity table ({}): every value is at or below the clip floor {}",
                self.source.as_str(),
                self.p_min
            );
        }
    }

    /// Export as `userId,movieId,period,propensity` rows over the presence
    /// cube (model-backed tables materialize on demand).
    pub fn write_csv<W: Write>(&self, writer: W, log: &Arc<InteractionLog>) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["userId", "movieId", "period", "propensity"])?;
        let view = log.full_view();
        for cell in view.cells() {
            let p = self.value(log, cell.user, cell.item, cell.period);
            w.write_record([
                log.user_raw_id(cell.user).to_string(),
                log.item_raw_id(cell.item).to_string(),
                cell.period.to_string(),
                p.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counting estimators computed from the training partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountingKind {
    Constant,
    Pop,
    TPop,
    TgPop,
}

impl CountingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CountingKind::Constant => "constant",
            CountingKind::Pop => "pop",
            CountingKind::TPop => "t-pop",
            CountingKind::TgPop => "tg-pop",
        }
    }
}

impl std::str::FromStr for CountingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "constant" => CountingKind::Constant,
            "pop" => CountingKind::Pop,
            "t-pop" | "tpop" => CountingKind::TPop,
            "tg-pop" | "tgpop" => CountingKind::TgPop,
            other => return Err(Error::Config(format!("unknown counting estimator '{other}'"))),
        })
    }
}

/// Fill a table from the closed-form ratio of the given kind. Empty T-Pop
/// buckets fall back to the item's static popularity; empty TG-Pop periods
/// fall back to the constant rate.
pub fn estimate_counting(kind: CountingKind, train_view: &LogView) -> Result<PropensityTable> {
    if train_view.is_empty() {
        return Err(Error::EmptyPartition(train_view.name().into()));
    }
    let stats = CountingStats::from_view(train_view);
    let n_periods = stats.n_periods;
    let table = match kind {
        CountingKind::Constant => PropensityTable::with_values(
            PropensitySource::Constant,
            TableValues::Scalar(counting_predict(Family::Constant, &stats, 0, 0, 1)),
        ),
        CountingKind::Pop => {
            let values = (0..stats.n_items)
                .map(|i| counting_predict(Family::Pop, &stats, 0, i as u32, 1))
                .collect();
            PropensityTable::with_values(PropensitySource::Pop, TableValues::PerItem(values))
        }
        CountingKind::TPop => {
            let mut values = vec![0.0; stats.n_items * n_periods];
            for i in 0..stats.n_items {
                for t in 1..=n_periods as u8 {
                    values[i * n_periods + t as usize - 1] =
                        counting_predict(Family::TPop, &stats, 0, i as u32, t);
                }
            }
            PropensityTable::with_values(
                PropensitySource::TPop,
                TableValues::PerItemAge { values, n_periods },
            )
        }
        CountingKind::TgPop => {
            let constant = counting_predict(Family::Constant, &stats, 0, 0, 1);
            let denom = stats.n_users as f64 * stats.n_items as f64;
            let values = (0..n_periods)
                .map(|t| {
                    if stats.age_count[t] == 0 {
                        constant
                    } else {
                        stats.age_count[t] as f64 / denom
                    }
                })
                .collect();
            PropensityTable::with_values(PropensitySource::TgPop, TableValues::PerAge(values))
        }
    };
    Ok(table)
}

/// Fit a sigmoid-linked observation model by NLL over the presence cube and
/// wrap it as a table.
pub fn estimate_model(
    spec: &ModelSpec,
    train_view: &LogView,
    valid_view: &LogView,
    cfg: &TrainConfig,
) -> Result<(PropensityTable, TrainingReport)> {
    if spec.link != Link::Sigmoid {
        return Err(Error::Config(
            "model-based propensity estimation needs a sigmoid-linked spec".into(),
        ));
    }
    let (params, report) = train(spec, train_view, valid_view, &Estimator::Naive, cfg)?;
    Ok((PropensityTable::from_model(*spec, params).with_p_min(cfg.p_min), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AgeBinning, InteractionLog, RatingEvent, SECONDS_PER_YEAR};

    fn years(y: f64) -> i64 {
        (y * SECONDS_PER_YEAR as f64).round() as i64
    }

    #[test]
    fn tpop_ratio_and_fallback() {
        let mut events = Vec::new();
        for u in 1..=10u32 {
            events.push(RatingEvent::new(u, 100, 3.0, 0).unwrap());
        }
        for u in 1..=3u32 {
            events.push(RatingEvent::new(u, 100, 4.0, years(1.5)).unwrap());
        }
        let log = InteractionLog::from_events(&events, AgeBinning::standard()).unwrap();
        let view = log.full_view();
        let table = estimate_counting(CountingKind::TPop, &view).unwrap();
        let item = log.item_dense_id(100).unwrap();
        assert!((table.value(&log, 0, item, 2) - 0.3).abs() < 1e-12);
        // Empty bucket falls back to Pop(i) = 13 / 70.
        assert!((table.value(&log, 0, item, 5) - 13.0 / 70.0).abs() < 1e-12);
    }

    #[test]
    fn tgpop_hand_ratio() {
        // 2 users, 3 items, single period, 2 observed ratings.
        let binning = AgeBinning::new(vec![0.0]).unwrap();
        let events = [
            RatingEvent::new(1, 1, 3.0, 0).unwrap(),
            RatingEvent::new(2, 2, 4.0, 0).unwrap(),
            RatingEvent::new(1, 3, 2.0, 0).unwrap(),
        ];
        let log = InteractionLog::from_events(&events, binning).unwrap();
        let view = crate::dataset::LogView::new(
            Arc::clone(&log),
            "train",
            log.observed_cells()[..2].to_vec(),
        );
        let table = estimate_counting(CountingKind::TgPop, &view).unwrap();
        assert!((table.value(&log, 0, 0, 1) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn pop_hand_ratio() {
        // Item rated by 4 of 10 users; Pop = 4 / 70.
        let mut events = Vec::new();
        for u in 1..=10u32 {
            events.push(RatingEvent::new(u, 200, 3.0, i64::from(u)).unwrap());
        }
        for u in 1..=4u32 {
            events.push(RatingEvent::new(u, 300, 4.5, years(f64::from(u))).unwrap());
        }
        let log = InteractionLog::from_events(&events, AgeBinning::standard()).unwrap();
        let table = estimate_counting(CountingKind::Pop, &log.full_view()).unwrap();
        let item = log.item_dense_id(300).unwrap();
        assert!((table.value(&log, 0, item, 1) - 4.0 / 70.0).abs() < 1e-12);
    }

    #[test]
    fn counting_is_order_invariant() {
        let mut events = Vec::new();
        for u in 1..=6u32 {
            for i in 1..=4u32 {
                if (u + i) % 3 != 0 {
                    events.push(
                        RatingEvent::new(u, i, 3.0, years(f64::from(i) * 0.4)).unwrap(),
                    );
                }
            }
        }
        let log_a = InteractionLog::from_events(&events, AgeBinning::standard()).unwrap();
        events.reverse();
        let log_b = InteractionLog::from_events(&events, AgeBinning::standard()).unwrap();
        for kind in [CountingKind::Constant, CountingKind::Pop, CountingKind::TPop, CountingKind::TgPop] {
            let a = estimate_counting(kind, &log_a.full_view()).unwrap();
            let b = estimate_counting(kind, &log_b.full_view()).unwrap();
            for cell in log_a.full_view().cells() {
                assert_eq!(
                    a.value(&log_a, cell.user, cell.item, cell.period),
                    b.value(&log_b, cell.user, cell.item, cell.period),
                );
            }
        }
    }

    #[test]
    fn rescale_examples() {
        let mut table = PropensityTable::uniform(0.8);
        table.rescale(0.25).unwrap();
        let binning = AgeBinning::new(vec![0.0]).unwrap();
        let log = InteractionLog::from_events(
            &[RatingEvent::new(1, 1, 3.0, 0).unwrap()],
            binning,
        )
        .unwrap();
        assert!((table.value(&log, 0, 0, 1) - 0.2).abs() < 1e-12);
        assert!(table.rescale(0.0).is_err());
        assert!(table.rescale(-1.0).is_err());
    }

    #[test]
    fn rescale_to_mean_hits_target() {
        // Per-item values with mean 0.08 rescaled to mean 0.04: halved.
        let binning = AgeBinning::new(vec![0.0]).unwrap();
        let events = [
            RatingEvent::new(1, 1, 3.0, 0).unwrap(),
            RatingEvent::new(1, 2, 3.0, 0).unwrap(),
        ];
        let log = InteractionLog::from_events(&events, binning).unwrap();
        let mut table = PropensityTable::with_values(
            PropensitySource::GroundTruth,
            TableValues::PerItem(vec![0.06, 0.10]),
        );
        table.rescale_to_mean(&log, 0.04).unwrap();
        assert!((table.mean_in_presence(&log) - 0.04).abs() < 1e-9);
        assert!((table.value(&log, 0, 0, 1) - 0.03).abs() < 1e-12);
        assert!((table.value(&log, 0, 1, 1) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn clipped_floors_at_p_min() {
        let table = PropensityTable::uniform(1e-9);
        let binning = AgeBinning::new(vec![0.0]).unwrap();
        let log = InteractionLog::from_events(
            &[RatingEvent::new(1, 1, 3.0, 0).unwrap()],
            binning,
        )
        .unwrap();
        assert_eq!(table.clipped(&log, 0, 0, 1), DEFAULT_P_MIN);
        assert!(table.value(&log, 0, 0, 1) < DEFAULT_P_MIN);
    }

    #[test]
    fn model_estimation_recovers_constant_rate() {
        // About a quarter of presence cells observed: single period, 4
        // items per user, one rating each.
        let binning = AgeBinning::new(vec![0.0]).unwrap();
        let mut events = Vec::new();
        for u in 1..=12u32 {
            for i in 1..=4u32 {
                // Everyone "exists" on all items via presence (same period),
                // but only (u + i) % 4 == 0 cells are observed. To pin the
                // item set, user 99 rates every item once.
                if (u + i) % 4 == 0 {
                    events.push(RatingEvent::new(u, i, 3.0, 5).unwrap());
                }
            }
        }
        for i in 1..=4u32 {
            events.push(RatingEvent::new(99, i, 3.0, 0).unwrap());
        }
        let log = InteractionLog::from_events(&events, binning).unwrap();
        let view = log.full_view();
        let rate = view.len() as f64 / log.presence_cell_count() as f64;
        let spec = ModelSpec::observation(Family::Constant, 1);
        let cfg = TrainConfig {
            lr: 0.5,
            max_epochs: 300,
            patience: 300,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let (table, _) = estimate_model(&spec, &view, &view, &cfg).unwrap();
        let fitted = table.value(&log, 0, 0, 1);
        assert!(
            (fitted - rate).abs() < 1e-3,
            "fitted {fitted} vs observation rate {rate}"
        );
    }

    #[test]
    fn model_estimation_requires_sigmoid() {
        let binning = AgeBinning::new(vec![0.0]).unwrap();
        let log = InteractionLog::from_events(
            &[RatingEvent::new(1, 1, 3.0, 0).unwrap()],
            binning,
        )
        .unwrap();
        let view = log.full_view();
        let spec = ModelSpec::rating(Family::Mf, 2);
        assert!(matches!(
            estimate_model(&spec, &view, &view, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
