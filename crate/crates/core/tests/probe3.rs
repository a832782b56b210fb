use std::sync::Arc;

use dancer_core::dataset::{split, SplitSpec, SplitStrategy};
use dancer_core::losses::naive_loss;
use dancer_core::losses::PointLoss;
use dancer_core::model::{predict, Family, ModelSpec};
use dancer_core::propensity::PropensityTable;
use dancer_core::sim::{build_ground_truth, build_propensities, sample_world};
use dancer_core::synth::{synthetic_log, SyntheticSpec};
use dancer_core::train::{train, Estimator, TrainConfig};

#[test]
#[ignore]
fn probe_weights_and_biases() {
    let spec = SyntheticSpec {
        n_users: 150,
        n_items: 400,
        ratings_per_user: 70.0,
        ..SyntheticSpec::default()
    };
    let log = synthetic_log(&spec);
    let cfg = TrainConfig { lr: 0.1, max_epochs: 80, patience: 80, ..TrainConfig::default() };
    let views = split(&log, &SplitSpec::new(SplitStrategy::Random, 0)).unwrap();
    let gt = build_ground_truth(
        &views.train,
        &views.valid,
        Arc::new(PropensityTable::uniform(1.0)),
        16,
        &cfg,
    )
    .unwrap();
    let props = Arc::new(build_propensities(&log, 16, 0.15, &cfg).unwrap());
    let world = sample_world(&log, gt, Arc::clone(&props), 1).unwrap();

    // Weight distribution over observed train cells.
    let mut weights: Vec<f64> = world
        .train
        .observed()
        .iter()
        .map(|c| 1.0 / props.clipped(&log, c.user, c.item, c.period))
        .collect();
    weights.sort_by(f64::total_cmp);
    let q = |f: f64| weights[(f * (weights.len() - 1) as f64) as usize];
    println!(
        "weights n {} min {:.2} q25 {:.2} med {:.2} q75 {:.2} max {:.2}",
        weights.len(),
        q(0.0),
        q(0.25),
        q(0.5),
        q(0.75),
        q(1.0)
    );

    // Per-age observed train counts vs test counts.
    let train_agg = dancer_core::metrics::per_age_aggregates(&world.train);
    let test_agg = dancer_core::metrics::per_age_aggregates(&world.test);
    for t in 0..7 {
        println!(
            "bin {}: train n {} mean {:?} | test n {} mean {:?}",
            t + 1,
            train_agg[t].count,
            train_agg[t].mean,
            test_agg[t].count,
            test_agg[t].mean
        );
    }

    let tcfg = TrainConfig {
        lr: 0.05,
        l2: 0.01,
        max_epochs: 150,
        patience: 150,
        seed: 1,
        ..TrainConfig::default()
    };
    let mspec = ModelSpec::rating(Family::Mf, 8);
    let (naive, _) =
        train(&mspec, &world.train, &world.train, &Estimator::Naive, &tcfg).unwrap();
    let (dancer, _) = train(
        &mspec,
        &world.train,
        &world.train,
        &Estimator::Dancer(Arc::clone(&props)),
        &tcfg,
    )
    .unwrap();
    println!("mf naive  b {:.4}", naive.global_bias);
    println!("mf dancer b {:.4}", dancer.global_bias);
    let diff: f64 = naive
        .user_vecs
        .iter()
        .zip(&dancer.user_vecs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max |user vec diff| {:.6}", diff);
    let test_mse_naive = naive_loss(
        &world.test,
        |u, i, t| predict(&mspec, &naive, u, i, t),
        PointLoss::Mse,
    )
    .unwrap();
    let test_mse_dancer = naive_loss(
        &world.test,
        |u, i, t| predict(&mspec, &dancer, u, i, t),
        PointLoss::Mse,
    )
    .unwrap();
    println!("mf test mse naive {test_mse_naive:.4} dancer {test_mse_dancer:.4}");
}
