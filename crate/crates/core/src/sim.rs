//! Three-step semi-synthetic world generation.
//!
//! Step 1 fits a debiased TMF rating model on the real log and treats its
//! predictions (clipped to the rating range) as complete ground truth over
//! the presence cube. Step 2 fits `p = sigma(q_i . a_t)` on the real
//! observation indicators, zeroes it outside user presence, and rescales the
//! in-presence mean to the target rate. Step 3 reserves a random half of
//! each user's items for an unbiased test set at the user's last presence
//! period and Bernoulli-samples the other half, restricted to periods that
//! begin before 80% of the user's presence, into a biased training set.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{InteractionLog, LogView, ObservedCell};
use crate::model::{predict, Family, ModelParams, ModelSpec};
use crate::numeric::mix_seed;
use crate::propensity::{estimate_model, PropensitySource, PropensityTable};
use crate::train::{train, Estimator, TrainConfig};
use crate::{Error, Result};

/// Rating bounds the simulated ground truth is clipped to.
const RATING_RANGE: (f64, f64) = (0.5, 5.0);

/// Step-3 defaults: half the items per user go to test, and training
/// candidates must start before 80% of the user's presence.
pub const TEST_ITEM_FRACTION: f64 = 0.5;
pub const PRESENCE_CUT: f64 = 0.8;

/// Default in-presence mean observation rate of the simulated bias.
pub const TARGET_MEAN_PROPENSITY: f64 = 0.04;

/// Complete rating map over the presence cube: either a fitted model or a
/// dense table loaded from `gt.csv`.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    Model { spec: ModelSpec, params: Arc<ModelParams> },
    Dense { map: Arc<HashMap<(u32, u32, u8), f64>> },
}

impl GroundTruth {
    pub fn rating(&self, u: u32, i: u32, t: u8) -> Option<f64> {
        match self {
            GroundTruth::Model { spec, params } => {
                Some(predict(spec, params, u, i, t).clamp(RATING_RANGE.0, RATING_RANGE.1))
            }
            GroundTruth::Dense { map } => map.get(&(u, i, t)).copied(),
        }
    }
}

/// Fit the ground-truth rating model: TMF trained with DANCER weighting.
/// Predictions are clipped to the rating range but not rounded to the grid.
pub fn build_ground_truth(
    train_view: &LogView,
    valid_view: &LogView,
    propensities: Arc<PropensityTable>,
    dim: usize,
    cfg: &TrainConfig,
) -> Result<GroundTruth> {
    let spec = ModelSpec::rating(Family::Tmf, dim);
    let (params, _) = train(&spec, train_view, valid_view, &Estimator::Dancer(propensities), cfg)?;
    Ok(GroundTruth::Model { spec, params: Arc::new(params) })
}

/// Fit the simulated dynamic selection bias `p = sigma(q_i . a_t)` on the
/// log's observation indicators, zero it outside user presence, and rescale
/// the in-presence mean to `target_mean`.
pub fn build_propensities(
    log: &Arc<InteractionLog>,
    dim: usize,
    target_mean: f64,
    cfg: &TrainConfig,
) -> Result<PropensityTable> {
    let spec = ModelSpec::observation(Family::ItemAge, dim);
    let full = log.full_view();
    let (fitted, _) = estimate_model(&spec, &full, &full, cfg)?;

    // Materialize the per-(item, period) matrix so the world is a plain
    // table independent of the fitted parameters.
    let n_periods = log.num_periods();
    let mut values = vec![0.0; log.num_items() * n_periods];
    for i in 0..log.num_items() as u32 {
        for t in 1..=n_periods as u8 {
            values[i as usize * n_periods + t as usize - 1] = fitted.value(log, 0, i, t);
        }
    }
    let mut table =
        PropensityTable::from_item_age(PropensitySource::GroundTruth, values, n_periods)
            .zero_outside_presence(true);
    table.rescale_to_mean(log, target_mean)?;
    Ok(table)
}

/// A generated world: complete ground truth, the true dynamic propensities,
/// a biased training set and an unbiased test set over the base log's
/// entity space.
#[derive(Debug, Clone)]
pub struct SimulatedWorld {
    pub log: Arc<InteractionLog>,
    pub ground_truth: GroundTruth,
    pub propensities: Arc<PropensityTable>,
    pub train: LogView,
    pub test: LogView,
    pub seed: u64,
    pub skipped_users: usize,
}

/// Step 3: split items per user, take ground-truth ratings on test-side
/// items at the user's last presence period, and Bernoulli-sample train-side
/// cells whose period starts before the 80%-presence timestamp.
pub fn sample_world(
    log: &Arc<InteractionLog>,
    ground_truth: GroundTruth,
    propensities: Arc<PropensityTable>,
    seed: u64,
) -> Result<SimulatedWorld> {
    let n_items = log.num_items() as u32;
    let mut train_cells: Vec<ObservedCell> = Vec::new();
    let mut test_cells: Vec<ObservedCell> = Vec::new();
    let mut skipped_users = 0usize;

    for u in 0..log.num_users() as u32 {
        let presence = log.presence(u);
        let mut items: Vec<u32> =
            (0..n_items).filter(|&i| log.presence_mask(u, i) != 0).collect();
        if items.len() < 2 {
            skipped_users += 1;
            log::warn!(
                "user {} has {} in-presence items; skipped",
                log.user_raw_id(u),
                items.len()
            );
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::from(log.user_raw_id(u))));
        items.shuffle(&mut rng);
        let n_test = ((items.len() as f64 * TEST_ITEM_FRACTION).floor() as usize)
            .clamp(1, items.len() - 1);
        let (test_items, train_items) = items.split_at(n_test);

        // Unbiased test ratings: every test-side item at the age bin it has
        // when the user makes their final rating.
        let mut test_sorted = test_items.to_vec();
        test_sorted.sort_unstable();
        for &i in &test_sorted {
            let t = log
                .period_at(i, presence.last)
                .expect("in-presence item exists at the user's last rating");
            let rating = ground_truth
                .rating(u, i, t)
                .ok_or_else(|| Error::IncompleteGroundTruth(format!("({u}, {i}, {t})")))?;
            test_cells.push(ObservedCell {
                user: u,
                item: i,
                period: t,
                rating,
                timestamp: presence.last,
            });
        }

        // Biased training sample over the other half of the items.
        let span = presence.last - presence.first;
        let cut_ts = presence.first + (span as f64 * PRESENCE_CUT).floor() as i64;
        let mut train_sorted = train_items.to_vec();
        train_sorted.sort_unstable();
        for &i in &train_sorted {
            let mask = log.presence_mask(u, i);
            let publication = log.publication_time(i);
            for t in 1..=log.num_periods() as u8 {
                if mask & (1 << (t - 1)) == 0 {
                    continue;
                }
                let (start, _) = log.binning().interval_secs(t);
                let cell_start = (publication + start).max(presence.first);
                if cell_start >= cut_ts {
                    continue;
                }
                let p = propensities.value(log, u, i, t);
                if rng.gen::<f64>() < p {
                    let rating = ground_truth
                        .rating(u, i, t)
                        .ok_or_else(|| Error::IncompleteGroundTruth(format!("({u}, {i}, {t})")))?;
                    train_cells.push(ObservedCell {
                        user: u,
                        item: i,
                        period: t,
                        rating,
                        timestamp: cell_start,
                    });
                }
            }
        }
    }

    Ok(SimulatedWorld {
        log: Arc::clone(log),
        ground_truth,
        propensities,
        train: LogView::new(Arc::clone(log), "train", train_cells),
        test: LogView::new(Arc::clone(log), "test", test_cells),
        seed,
        skipped_users,
    })
}

impl SimulatedWorld {
    /// Observed training cells as a fraction of the presence cube.
    pub fn observed_fraction(&self) -> f64 {
        self.train.len() as f64 / self.log.presence_cell_count() as f64
    }

    /// Write `gt.csv`, `propensity.csv` and `train.csv` into a directory.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let gt_file = std::fs::File::create(dir.join("gt.csv"))?;
        self.write_ground_truth(std::io::BufWriter::new(gt_file))?;
        let prop_file = std::fs::File::create(dir.join("propensity.csv"))?;
        self.propensities.write_csv(std::io::BufWriter::new(prop_file), &self.log)?;
        let train_file = std::fs::File::create(dir.join("train.csv"))?;
        self.write_train(std::io::BufWriter::new(train_file))?;
        Ok(())
    }

    fn write_ground_truth<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["userId", "movieId", "period", "rating"])?;
        for cell in self.log.full_view().cells() {
            let y = self
                .ground_truth
                .rating(cell.user, cell.item, cell.period)
                .ok_or_else(|| {
                    Error::IncompleteGroundTruth(format!(
                        "({}, {}, {})",
                        cell.user, cell.item, cell.period
                    ))
                })?;
            w.write_record([
                self.log.user_raw_id(cell.user).to_string(),
                self.log.item_raw_id(cell.item).to_string(),
                cell.period.to_string(),
                y.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_train<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["userId", "movieId", "period", "rating"])?;
        for c in self.train.observed() {
            w.write_record([
                self.log.user_raw_id(c.user).to_string(),
                self.log.item_raw_id(c.item).to_string(),
                c.period.to_string(),
                c.rating.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Load the fitted artifacts of a serialized world (`gt.csv` and
/// `propensity.csv`) so step 3 can re-run without refitting. Sampling with
/// the original seed reproduces the world exactly.
pub fn load_world_artifacts(
    dir: &Path,
    log: &Arc<InteractionLog>,
) -> Result<(GroundTruth, PropensityTable)> {
    let gt_path = dir.join("gt.csv");
    let mut map = HashMap::new();
    let mut rdr = csv::Reader::from_path(&gt_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", gt_path.display())))?;
    for record in rdr.records() {
        let record = record?;
        let (u, i, t, v) = parse_cell_row(&record, log)?;
        map.insert((u, i, t), v);
    }
    if map.len() as u64 != log.presence_cell_count() {
        return Err(Error::Data(format!(
            "gt.csv covers {} cells but the log has {} presence-restricted cells",
            map.len(),
            log.presence_cell_count()
        )));
    }

    let prop_path = dir.join("propensity.csv");
    let n_periods = log.num_periods();
    let mut values = vec![0.0; log.num_items() * n_periods];
    let mut rdr = csv::Reader::from_path(&prop_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", prop_path.display())))?;
    for record in rdr.records() {
        let record = record?;
        let (_, i, t, v) = parse_cell_row(&record, log)?;
        values[i as usize * n_periods + t as usize - 1] = v;
    }
    let table = PropensityTable::from_item_age(PropensitySource::GroundTruth, values, n_periods)
        .zero_outside_presence(true);
    Ok((GroundTruth::Dense { map: Arc::new(map) }, table))
}

fn parse_cell_row(
    record: &csv::StringRecord,
    log: &InteractionLog,
) -> Result<(u32, u32, u8, f64)> {
    let field = |k: usize| -> Result<&str> {
        record.get(k).ok_or_else(|| Error::Data(format!("short row {record:?}")))
    };
    let user_raw: u32 =
        field(0)?.parse().map_err(|e| Error::Data(format!("bad userId: {e}")))?;
    let item_raw: u32 =
        field(1)?.parse().map_err(|e| Error::Data(format!("bad movieId: {e}")))?;
    let t: u8 = field(2)?.parse().map_err(|e| Error::Data(format!("bad period: {e}")))?;
    let v: f64 = field(3)?.parse().map_err(|e| Error::Data(format!("bad value: {e}")))?;
    let u = log
        .user_dense_id(user_raw)
        .ok_or(Error::UnknownEntity { kind: "user", id: user_raw.to_string() })?;
    let i = log
        .item_dense_id(item_raw)
        .ok_or(Error::UnknownEntity { kind: "item", id: item_raw.to_string() })?;
    if t == 0 || t as usize > log.num_periods() {
        return Err(Error::UnknownEntity { kind: "period", id: t.to_string() });
    }
    Ok((u, i, t, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        split, AgeBinning, RatingEvent, SplitSpec, SplitStrategy, SECONDS_PER_YEAR,
    };

    fn years(y: f64) -> i64 {
        (y * SECONDS_PER_YEAR as f64).round() as i64
    }

    /// Base log: 14 users x 10 items spread over two age bins, one devoted
    /// user rating everything 5.0, plus a late item only one late user sees.
    fn base_log() -> Arc<InteractionLog> {
        let mut events = Vec::new();
        for u in 0..14u32 {
            for i in 0..10u32 {
                if u != 0 && (u + i) % 3 == 0 {
                    continue;
                }
                let rating =
                    if u == 0 { 5.0 } else { 0.5 + f64::from((u + 2 * i) % 9) * 0.5 };
                let age = if (u + i) % 2 == 0 { 0.3 } else { 1.6 };
                events.push(
                    RatingEvent::new(u + 1, i + 1, rating, years(age) + i64::from(u * 31 + i))
                        .unwrap(),
                );
            }
        }
        // Published long after everyone else left: out of presence for all
        // but its single rater.
        events.push(RatingEvent::new(99, 999, 3.0, years(10.0)).unwrap());
        InteractionLog::from_events(&events, AgeBinning::standard()).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            batch_size: 16,
            max_epochs: 150,
            patience: 150,
            ..TrainConfig::default()
        }
    }

    fn quick_gt(log: &Arc<InteractionLog>) -> GroundTruth {
        let views = split(log, &SplitSpec::new(SplitStrategy::Random, 3)).unwrap();
        build_ground_truth(
            &views.train,
            &views.valid,
            Arc::new(PropensityTable::uniform(1.0)),
            4,
            &quick_cfg(),
        )
        .unwrap()
    }

    #[test]
    fn ground_truth_interpolates_devoted_user() {
        let log = base_log();
        let full = log.full_view();
        let props = Arc::new(PropensityTable::uniform(1.0));
        let cfg = TrainConfig {
            lr: 0.1,
            batch_size: 16,
            max_epochs: 400,
            patience: 400,
            ..TrainConfig::default()
        };
        let gt = build_ground_truth(&full, &full, props, 8, &cfg).unwrap();
        let u = log.user_dense_id(1).unwrap();
        let mut checked = 0;
        for cell in full.cells_of_user(u) {
            if cell.observed {
                let y = gt.rating(cell.user, cell.item, cell.period).unwrap();
                assert!(y >= 4.5, "devoted user's ground truth {y} sank too low");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn ground_truth_covers_presence_cube() {
        let log = base_log();
        let gt = quick_gt(&log);
        let mut count = 0u64;
        for cell in log.full_view().cells() {
            let y = gt.rating(cell.user, cell.item, cell.period).unwrap();
            assert!((RATING_RANGE.0..=RATING_RANGE.1).contains(&y));
            count += 1;
        }
        assert_eq!(count, log.presence_cell_count());
    }

    #[test]
    fn propensities_hit_target_mean_and_presence_zeroing() {
        let log = base_log();
        let table = build_propensities(&log, 4, 0.04, &quick_cfg()).unwrap();
        let mean = table.mean_in_presence(&log);
        assert!((mean - 0.04).abs() < 1e-9, "mean {mean}");
        let mut found = false;
        'outer: for u in 0..log.num_users() as u32 {
            for i in 0..log.num_items() as u32 {
                if log.presence_mask(u, i) == 0 {
                    assert_eq!(table.value(&log, u, i, 1), 0.0);
                    found = true;
                    break 'outer;
                }
            }
        }
        assert!(found, "expected at least one out-of-presence pair");
    }

    #[test]
    fn world_sampling_extremes() {
        let log = base_log();
        let gt = quick_gt(&log);

        // All-zero propensities: empty training set.
        let zero = Arc::new(PropensityTable::uniform(0.0));
        let world = sample_world(&log, gt.clone(), zero, 5).unwrap();
        assert!(world.train.is_empty());
        assert!(!world.test.is_empty());

        // All-one propensities: every candidate cell observed.
        let one = Arc::new(PropensityTable::uniform(1.0));
        let world = sample_world(&log, gt, one, 5).unwrap();
        assert!(!world.train.is_empty());
        for c in world.train.observed() {
            assert!(log.in_presence(c.user, c.item, c.period));
        }
    }

    #[test]
    fn world_train_and_test_items_disjoint_and_reproducible() {
        let log = base_log();
        let gt = quick_gt(&log);
        let props = Arc::new(PropensityTable::uniform(0.35));

        for seed in [1u64, 2, 3] {
            let world = sample_world(&log, gt.clone(), Arc::clone(&props), seed).unwrap();
            let mut train_items: HashMap<u32, Vec<u32>> = HashMap::new();
            for c in world.train.observed() {
                train_items.entry(c.user).or_default().push(c.item);
            }
            for c in world.test.observed() {
                if let Some(items) = train_items.get(&c.user) {
                    assert!(!items.contains(&c.item), "user {} item {} leaks", c.user, c.item);
                }
            }
        }

        let a = sample_world(&log, gt.clone(), Arc::clone(&props), 9).unwrap();
        let b = sample_world(&log, gt.clone(), Arc::clone(&props), 9).unwrap();
        assert_eq!(a.train.observed(), b.train.observed());
        assert_eq!(a.test.observed(), b.test.observed());
        let c = sample_world(&log, gt, props, 10).unwrap();
        assert_ne!(a.train.observed(), c.train.observed());
    }

    #[test]
    fn world_round_trips_through_csv() {
        let log = base_log();
        let gt = quick_gt(&log);
        let props = Arc::new(build_propensities(&log, 4, 0.2, &quick_cfg()).unwrap());
        let world = sample_world(&log, gt, props, 21).unwrap();

        let dir = tempfile::tempdir().unwrap();
        world.write_dir(dir.path()).unwrap();
        let (gt2, props2) = load_world_artifacts(dir.path(), &log).unwrap();
        let world2 = sample_world(&log, gt2, Arc::new(props2), 21).unwrap();
        assert_eq!(world.train.observed(), world2.train.observed());
        assert_eq!(world.test.observed(), world2.test.observed());
    }

    #[test]
    fn test_cells_sit_at_last_presence_period() {
        let log = base_log();
        let gt = quick_gt(&log);
        let world =
            sample_world(&log, gt, Arc::new(PropensityTable::uniform(0.5)), 4).unwrap();
        for c in world.test.observed() {
            let expect = log.period_at(c.item, log.presence(c.user).last).unwrap();
            assert_eq!(c.period, expect);
        }
        // Training cells all start before the 80% cut.
        for c in world.train.observed() {
            let p = log.presence(c.user);
            let cut = p.first + ((p.last - p.first) as f64 * PRESENCE_CUT).floor() as i64;
            assert!(c.timestamp < cut);
        }
    }
}
