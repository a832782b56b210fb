use criterion::{black_box, criterion_group, criterion_main, Criterion};

use dancer_core::synth::{synthetic_log, SyntheticSpec};
use dancer_core::dataset::{split, SplitSpec, SplitStrategy};
use dancer_core::losses::{clamp_open_unit, propensity_nll};
use dancer_core::model::{predict, ActiveEntities, Family, ModelParams, ModelSpec};
use dancer_core::oracle::{expected_loss, OracleEstimator, ToyInstance};
use dancer_core::losses::PointLoss;
use dancer_core::train::{train, Estimator, TrainConfig};

fn bench_predict(c: &mut Criterion) {
    let log = synthetic_log(&SyntheticSpec::default());
    let spec = ModelSpec::observation(Family::Tmtf, 32);
    let params = ModelParams::init(&spec, &log, &ActiveEntities::everything(&log), 7);
    c.bench_function("tmtf_predict_1k_cells", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for k in 0..1000u32 {
                let u = k % log.num_users() as u32;
                let i = (k * 7) % log.num_items() as u32;
                let t = (k % 7 + 1) as u8;
                acc += predict(&spec, &params, u, i, t);
            }
            black_box(acc)
        })
    });
}

fn bench_nll_pass(c: &mut Criterion) {
    let log = synthetic_log(&SyntheticSpec::default());
    let view = log.full_view();
    let spec = ModelSpec::observation(Family::Tmtf, 32);
    let params = ModelParams::init(&spec, &log, &ActiveEntities::everything(&log), 7);
    c.bench_function("nll_full_presence_pass", |b| {
        b.iter(|| {
            let nll = propensity_nll(&view, |u, i, t| {
                clamp_open_unit(predict(&spec, &params, u, i, t))
            })
            .unwrap();
            black_box(nll)
        })
    });
}

fn bench_oracle(c: &mut Criterion) {
    let inst = ToyInstance::single_pair(
        &[1.0, 2.0, 0.5, 1.5, 2.5, 0.7, 1.1, 0.2, 3.0, 1.9],
        &[0.8, 0.2, 0.5, 0.3, 0.7, 0.4, 0.6, 0.9, 0.1, 0.5],
    )
    .unwrap();
    c.bench_function("oracle_exact_expectation_10_cells", |b| {
        b.iter(|| {
            black_box(expected_loss(&inst, OracleEstimator::Dancer, PointLoss::Mse).unwrap())
        })
    });
}

fn bench_training_epoch(c: &mut Criterion) {
    let log = synthetic_log(&SyntheticSpec::default());
    let views = split(&log, &SplitSpec::new(SplitStrategy::Random, 1)).unwrap();
    let spec = ModelSpec::rating(Family::Tmf, 32);
    let cfg = TrainConfig { lr: 0.01, max_epochs: 1, patience: 1, ..TrainConfig::default() };
    c.bench_function("tmf_rating_epoch", |b| {
        b.iter(|| {
            let out = train(&spec, &views.train, &views.valid, &Estimator::Naive, &cfg).unwrap();
            black_box(out.1.epochs.len())
        })
    });
}

criterion_group!(benches, bench_predict, bench_nll_pass, bench_oracle, bench_training_epoch);
criterion_main!(benches);
