use std::sync::Arc;

use dancer_core::dataset::{split, SplitSpec, SplitStrategy};
use dancer_core::model::Family;
use dancer_core::propensity::PropensityTable;
use dancer_core::sim::{build_ground_truth, build_propensities, sample_world};
use dancer_core::synth::{synthetic_log, SyntheticSpec};
use dancer_core::train::TrainConfig;

#[test]
#[ignore]
fn probe_world_shape() {
    let log = synthetic_log(&SyntheticSpec::default());
    println!(
        "log: users {} items {} ratings {} presence_cells {} obs_rate {:.4}",
        log.num_users(),
        log.num_items(),
        log.observed_cells().len(),
        log.presence_cell_count(),
        log.observed_cells().len() as f64 / log.presence_cell_count() as f64
    );
    let agg = dancer_core::metrics::per_age_aggregates(&log.full_view());
    for (k, a) in agg.iter().enumerate() {
        println!("bin {}: count {} mean {:?}", k + 1, a.count, a.mean);
    }

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
    let props = Arc::new(build_propensities(&log, 16, 0.04, &cfg).unwrap());
    println!("propensity mean {:.6}", props.mean_in_presence(&log));

    for seed in 1..=5u64 {
        let world = sample_world(&log, gt.clone(), Arc::clone(&props), seed).unwrap();
        println!(
            "world seed {}: train {} test {} fraction {:.4} skipped {}",
            seed,
            world.train.len(),
            world.test.len(),
            world.observed_fraction(),
            world.skipped_users
        );
    }

    // Check GT age drift: mean gt rating per bin over presence cells.
    let mut sums = vec![0.0; 7];
    let mut counts = vec![0u64; 7];
    for cell in log.full_view().cells() {
        let y = match &gt {
            dancer_core::sim::GroundTruth::Model { spec, params } => {
                dancer_core::model::predict(spec, params, cell.user, cell.item, cell.period)
                    .clamp(0.5, 5.0)
            }
            _ => unreachable!(),
        };
        sums[cell.period as usize - 1] += y;
        counts[cell.period as usize - 1] += 1;
    }
    for t in 0..7 {
        if counts[t] > 0 {
            println!("gt bin {} mean {:.3} (n {})", t + 1, sums[t] / counts[t] as f64, counts[t]);
        }
    }
    let _ = Family::Tmf;
}
