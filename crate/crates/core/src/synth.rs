//! Synthetic rating logs for benchmarks and integration tests.
//!
//! The generator mimics the structure the estimators care about: items are
//! published over a span of years, users are present for short windows,
//! popularity decays with item age, and mean ratings drift downward as
//! items get older.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{AgeBinning, InteractionLog, RatingEvent, SECONDS_PER_YEAR};

/// Knobs of the synthetic world.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Items are published uniformly over this many years.
    pub catalog_span_years: f64,
    /// Users arrive uniformly over the catalog span and stay this long.
    pub presence_years: f64,
    /// Mean ratings per user.
    pub ratings_per_user: f64,
    /// Popularity decay per age bin: weight of bin t is decay^(t-1).
    pub age_decay: f64,
    /// Mean rating drop per age bin.
    pub rating_drift_per_bin: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_users: 120,
            n_items: 160,
            catalog_span_years: 12.0,
            presence_years: 1.1,
            ratings_per_user: 45.0,
            age_decay: 0.45,
            rating_drift_per_bin: 0.35,
            seed: 13,
        }
    }
}

fn grid(rating: f64) -> f64 {
    ((rating * 2.0).round() / 2.0).clamp(0.5, 5.0)
}

/// Generate a log whose popularity decays with item age and whose mean
/// rating drifts down as items get older.
pub fn synthetic_log(spec: &SyntheticSpec) -> Arc<InteractionLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let year = SECONDS_PER_YEAR as f64;
    let binning = AgeBinning::standard();

    let publication: Vec<i64> = (0..spec.n_items)
        .map(|_| (rng.gen::<f64>() * spec.catalog_span_years * year) as i64)
        .collect();
    // Per-item appeal and per-user generosity give the factorization
    // something to learn beyond the age trend.
    let appeal: Vec<f64> = (0..spec.n_items).map(|_| rng.gen_range(-0.7..0.7)).collect();
    let generosity: Vec<f64> = (0..spec.n_users).map(|_| rng.gen_range(-0.5..0.5)).collect();

    let mut events = Vec::new();
    for u in 0..spec.n_users {
        let arrive = rng.gen::<f64>() * spec.catalog_span_years * year;
        let leave = arrive + spec.presence_years * year;
        let n_ratings = (spec.ratings_per_user * rng.gen_range(0.6..1.4)).round() as usize;
        let mut placed = 0usize;
        let mut guard = 0usize;
        while placed < n_ratings.max(6) && guard < 50 * n_ratings.max(6) {
            guard += 1;
            let i = rng.gen_range(0..spec.n_items);
            let ts = arrive + rng.gen::<f64>() * (leave - arrive);
            let age = ts - publication[i] as f64;
            if age < 0.0 {
                continue;
            }
            let bin = binning.bin_age_years(age / year).unwrap();
            // Popularity decays with the age bin.
            let keep = spec.age_decay.powi(i32::from(bin) - 1);
            if rng.gen::<f64>() > keep {
                continue;
            }
            let mean = 3.6 + appeal[i] + generosity[u]
                - spec.rating_drift_per_bin * f64::from(bin - 1);
            let rating = grid(mean + rng.gen_range(-0.8..0.8));
            events.push(
                RatingEvent::new(u as u32 + 1, i as u32 + 1, rating, ts as i64).unwrap(),
            );
            placed += 1;
        }
    }
    InteractionLog::from_events(&events, binning).expect("synthetic log is nonempty")
}
