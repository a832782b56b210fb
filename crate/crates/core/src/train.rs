//! Seeded mini-batch SGD for both tasks.
//!
//! Rating models minimize an estimator-weighted squared error over the
//! observed training cells; observation models minimize the Bernoulli NLL
//! over every presence-restricted cell (optionally with uniform negative
//! subsampling, each sampled negative weighted by the inverse sample rate).
//! L2 regularization applies per cell to the touched embeddings and
//! user/item/age offsets; the global offset stays free. Identical
//! (config, seed, data) reproduce identical parameters bitwise.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::LogView;
use crate::losses::{self, clamp_open_unit, PointLoss};
use crate::model::{predict, score, ActiveEntities, Link, ModelParams, ModelSpec};
use crate::numeric::{mix_seed, sigmoid};
use crate::propensity::PropensityTable;
use crate::{Error, Result};

/// Learning-rate grid searched by default.
pub const LR_GRID: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// L2-weight grid searched by default: zero plus powers of ten up to 1.
pub const L2_GRID: [f64; 9] = [0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Observation task only: sample each negative cell with this rate and
    /// weight it by the reciprocal. `None` enumerates every cell.
    pub negative_sample_rate: Option<f64>,
    pub p_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            l2: 0.0,
            batch_size: 1024,
            max_epochs: 200,
            patience: 5,
            seed: 0,
            negative_sample_rate: None,
            p_min: losses::DEFAULT_P_MIN,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config(format!("l2 weight {} must be nonnegative", self.l2)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be positive".into()));
        }
        if let Some(r) = self.negative_sample_rate {
            if !(0.0 < r && r <= 1.0) {
                return Err(Error::Config(format!("negative sample rate {r} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Loss weighting applied during rating-model training and validation.
#[derive(Debug, Clone)]
pub enum Estimator {
    Naive,
    StaticIps(Arc<PropensityTable>),
    Dancer(Arc<PropensityTable>),
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Naive => "naive",
            Estimator::StaticIps(_) => "static-ips",
            Estimator::Dancer(_) => "dancer",
        }
    }

    fn table(&self) -> Option<&PropensityTable> {
        match self {
            Estimator::Naive => None,
            Estimator::StaticIps(t) | Estimator::Dancer(t) => Some(t),
        }
    }
}

/// One training example: a cell, its target (rating or indicator), and its
/// loss weight (inverse propensity, inverse sample rate, or 1).
#[derive(Debug, Clone, Copy)]
pub struct CellSample {
    pub user: u32,
    pub item: u32,
    pub period: u8,
    pub target: f64,
    pub weight: f64,
}

/// Sparse gradient of the per-cell objective with respect to every
/// parameter the cell touches.
#[derive(Debug, Clone, Default)]
pub struct CellGradient {
    pub user_vec: Vec<f64>,
    pub item_vec: Vec<f64>,
    pub age_vec: Vec<f64>,
    pub user_bias: f64,
    pub item_bias: f64,
    pub age_bias: f64,
    pub global_bias: f64,
}

impl CellGradient {
    pub fn zeros(dim: usize) -> Self {
        Self {
            user_vec: vec![0.0; dim],
            item_vec: vec![0.0; dim],
            age_vec: vec![0.0; dim],
            user_bias: 0.0,
            item_bias: 0.0,
            age_bias: 0.0,
            global_bias: 0.0,
        }
    }

    fn clear(&mut self) {
        self.user_vec.iter_mut().for_each(|v| *v = 0.0);
        self.item_vec.iter_mut().for_each(|v| *v = 0.0);
        self.age_vec.iter_mut().for_each(|v| *v = 0.0);
        self.user_bias = 0.0;
        self.item_bias = 0.0;
        self.age_bias = 0.0;
        self.global_bias = 0.0;
    }
}

/// Per-cell objective: `weight * L(pred, target)` plus `l2` times the
/// squared norm of the touched regularized parameters. The point loss is
/// squared error under the identity link and Bernoulli NLL under sigmoid.
pub fn per_cell_objective(
    spec: &ModelSpec,
    params: &ModelParams,
    sample: &CellSample,
    l2: f64,
) -> f64 {
    let (u, i, t) = (sample.user, sample.item, sample.period);
    let loss = match spec.link {
        Link::Identity => {
            let e = score(spec, params, u, i, t) - sample.target;
            e * e
        }
        Link::Sigmoid => {
            let p = clamp_open_unit(sigmoid(score(spec, params, u, i, t)));
            losses::bernoulli_nll(p, sample.target)
        }
    };
    sample.weight * loss + l2 * touched_norm_sq(spec, params, u, i, t)
}

fn touched_norm_sq(spec: &ModelSpec, params: &ModelParams, u: u32, i: u32, t: u8) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let mut n = 0.0;
    if spec.family.uses_user_vec() {
        n += sq(params.user_vec(u));
    }
    if spec.family.uses_item_vec() {
        n += sq(params.item_vec(i));
    }
    if spec.family.uses_age_vec() {
        n += sq(params.age_vec(t));
    }
    if spec.family.uses_age_bias() {
        let b = params.age_bias[t as usize - 1];
        n += b * b;
    }
    if spec.uses_offsets() {
        let (bu, bi) = (params.user_bias[u as usize], params.item_bias[i as usize]);
        n += bu * bu + bi * bi;
    }
    n
}

/// Exact analytic gradient of [`per_cell_objective`]. Slices in `out` must
/// be sized to the spec's dimension; entries for unused parameter groups
/// stay zero.
pub fn cell_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    sample: &CellSample,
    l2: f64,
    out: &mut CellGradient,
) {
    out.clear();
    let (u, i, t) = (sample.user, sample.item, sample.period);
    let s = score(spec, params, u, i, t);
    // d loss / d score, weight included.
    let dscore = sample.weight
        * match spec.link {
            Link::Identity => 2.0 * (s - sample.target),
            Link::Sigmoid => sigmoid(s) - sample.target,
        };

    let d = spec.dim;
    let family = spec.family;
    if family.uses_user_vec() {
        let pu = params.user_vec(u);
        let qi = params.item_vec(i);
        for k in 0..d {
            let ds_dpu = match family {
                crate::model::Family::Ttf => qi[k] * params.age_vec(t)[k],
                crate::model::Family::TtfPlusPlus | crate::model::Family::Tmtf => {
                    qi[k] + params.age_vec(t)[k]
                }
                _ => qi[k],
            };
            out.user_vec[k] = dscore * ds_dpu + 2.0 * l2 * pu[k];
        }
    }
    if family.uses_item_vec() {
        let qi = params.item_vec(i);
        for k in 0..d {
            let ds_dqi = match family {
                crate::model::Family::Ttf => params.user_vec(u)[k] * params.age_vec(t)[k],
                crate::model::Family::ItemAge => params.age_vec(t)[k],
                _ => params.user_vec(u)[k],
            };
            out.item_vec[k] = dscore * ds_dqi + 2.0 * l2 * qi[k];
        }
    }
    if family.uses_age_vec() {
        let at = params.age_vec(t);
        for k in 0..d {
            let ds_dat = match family {
                crate::model::Family::Ttf => params.user_vec(u)[k] * params.item_vec(i)[k],
                crate::model::Family::ItemAge => params.item_vec(i)[k],
                _ => params.user_vec(u)[k],
            };
            out.age_vec[k] = dscore * ds_dat + 2.0 * l2 * at[k];
        }
    }
    if family.uses_age_bias() {
        out.age_bias = dscore + 2.0 * l2 * params.age_bias[t as usize - 1];
    }
    if spec.uses_offsets() {
        out.user_bias = dscore + 2.0 * l2 * params.user_bias[u as usize];
        out.item_bias = dscore + 2.0 * l2 * params.item_bias[i as usize];
    }
    if spec.uses_global_bias() {
        out.global_bias = dscore;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_objective: f64,
    pub valid_objective: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid: f64,
}

impl TrainingReport {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_objective", "valid_objective"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_objective.to_string(),
                e.valid_objective.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accumulates a mini-batch of sparse gradients keyed by entity.
struct BatchAccum {
    dim: usize,
    users: HashMap<u32, usize>,
    user_grads: Vec<f64>,
    user_bias: Vec<f64>,
    items: HashMap<u32, usize>,
    item_grads: Vec<f64>,
    item_bias: Vec<f64>,
    age_grads: Vec<f64>,
    age_bias: Vec<f64>,
    ages_touched: Vec<bool>,
    global: f64,
    weight_sum: f64,
}

impl BatchAccum {
    fn new(dim: usize, n_periods: usize) -> Self {
        Self {
            dim,
            users: HashMap::new(),
            user_grads: Vec::new(),
            user_bias: Vec::new(),
            items: HashMap::new(),
            item_grads: Vec::new(),
            item_bias: Vec::new(),
            age_grads: vec![0.0; n_periods * dim],
            age_bias: vec![0.0; n_periods],
            ages_touched: vec![false; n_periods],
            global: 0.0,
            weight_sum: 0.0,
        }
    }

    fn clear(&mut self) {
        self.users.clear();
        self.user_grads.clear();
        self.user_bias.clear();
        self.items.clear();
        self.item_grads.clear();
        self.item_bias.clear();
        self.age_grads.iter_mut().for_each(|v| *v = 0.0);
        self.age_bias.iter_mut().for_each(|v| *v = 0.0);
        self.ages_touched.iter_mut().for_each(|v| *v = false);
        self.global = 0.0;
        self.weight_sum = 0.0;
    }

    fn add(&mut self, sample: &CellSample, grad: &CellGradient, spec: &ModelSpec) {
        let d = self.dim;
        self.weight_sum += sample.weight;
        if spec.family.uses_user_vec() || spec.uses_offsets() {
            let next = self.users.len();
            let slot = *self.users.entry(sample.user).or_insert(next);
            if slot == next {
                self.user_grads.resize((next + 1) * d, 0.0);
                self.user_bias.resize(next + 1, 0.0);
            }
            for k in 0..d {
                self.user_grads[slot * d + k] += grad.user_vec[k];
            }
            self.user_bias[slot] += grad.user_bias;
        }
        if spec.family.uses_item_vec() || spec.uses_offsets() {
            let next = self.items.len();
            let slot = *self.items.entry(sample.item).or_insert(next);
            if slot == next {
                self.item_grads.resize((next + 1) * d, 0.0);
                self.item_bias.resize(next + 1, 0.0);
            }
            for k in 0..d {
                self.item_grads[slot * d + k] += grad.item_vec[k];
            }
            self.item_bias[slot] += grad.item_bias;
        }
        if spec.family.uses_age_vec() || spec.family.uses_age_bias() {
            let t = sample.period as usize - 1;
            self.ages_touched[t] = true;
            for k in 0..d {
                self.age_grads[t * d + k] += grad.age_vec[k];
            }
            self.age_bias[t] += grad.age_bias;
        }
        self.global += grad.global_bias;
    }

    /// Apply `params -= lr * accumulated / weight_sum`. Normalizing by the
    /// batch weight keeps the step scale comparable between full
    /// enumeration and subsampled epochs; with unit weights it is the plain
    /// batch mean.
    fn apply(&self, params: &mut ModelParams, lr: f64) {
        if self.weight_sum == 0.0 {
            return;
        }
        let step = lr / self.weight_sum;
        let d = self.dim;
        for (&u, &slot) in &self.users {
            let base = u as usize * d;
            for k in 0..d {
                params.user_vecs[base + k] -= step * self.user_grads[slot * d + k];
            }
            params.user_bias[u as usize] -= step * self.user_bias[slot];
        }
        for (&i, &slot) in &self.items {
            let base = i as usize * d;
            for k in 0..d {
                params.item_vecs[base + k] -= step * self.item_grads[slot * d + k];
            }
            params.item_bias[i as usize] -= step * self.item_bias[slot];
        }
        for (t, &touched) in self.ages_touched.iter().enumerate() {
            if touched {
                for k in 0..d {
                    params.age_vecs[t * d + k] -= step * self.age_grads[t * d + k];
                }
                params.age_bias[t] -= step * self.age_bias[t];
            }
        }
        params.global_bias -= step * self.global;
    }
}

/// The frozen inputs of one training run.
struct Runner<'a> {
    spec: &'a ModelSpec,
    train_view: &'a LogView,
    estimator: &'a Estimator,
    cfg: &'a TrainConfig,
}

impl Runner<'_> {
    fn rating_samples(&self) -> Result<Vec<CellSample>> {
        let log = self.train_view.log();
        let table = self.estimator.table();
        self.train_view
            .observed()
            .iter()
            .map(|c| {
                let weight = match table {
                    None => 1.0,
                    Some(t) => {
                        let p = t.clipped(log, c.user, c.item, c.period);
                        if !p.is_finite() || p <= 0.0 {
                            return Err(Error::PropensityDomain(format!(
                                "propensity {p} at observed cell ({}, {}, {})",
                                c.user, c.item, c.period
                            )));
                        }
                        1.0 / p
                    }
                };
                Ok(CellSample {
                    user: c.user,
                    item: c.item,
                    period: c.period,
                    target: c.rating,
                    weight,
                })
            })
            .collect()
    }

    fn observation_samples(&self, epoch: usize, buf: &mut Vec<CellSample>) {
        buf.clear();
        match self.cfg.negative_sample_rate {
            None => {
                for cell in self.train_view.cells() {
                    buf.push(CellSample {
                        user: cell.user,
                        item: cell.item,
                        period: cell.period,
                        target: if cell.observed { 1.0 } else { 0.0 },
                        weight: 1.0,
                    });
                }
            }
            Some(rate) => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, 0xA000 + epoch as u64));
                let inv = 1.0 / rate;
                for cell in self.train_view.cells() {
                    if cell.observed {
                        buf.push(CellSample {
                            user: cell.user,
                            item: cell.item,
                            period: cell.period,
                            target: 1.0,
                            weight: 1.0,
                        });
                    } else if rng.gen::<f64>() < rate {
                        buf.push(CellSample {
                            user: cell.user,
                            item: cell.item,
                            period: cell.period,
                            target: 0.0,
                            weight: inv,
                        });
                    }
                }
            }
        }
    }

    fn objective(&self, params: &ModelParams, view: &LogView) -> Result<f64> {
        let spec = self.spec;
        match spec.link {
            Link::Sigmoid => losses::propensity_nll(view, |u, i, t| {
                clamp_open_unit(predict(spec, params, u, i, t))
            }),
            Link::Identity => {
                let pred = |u, i, t| predict(spec, params, u, i, t);
                match self.estimator {
                    Estimator::Naive => losses::naive_loss(view, pred, PointLoss::Mse),
                    Estimator::StaticIps(table) => {
                        let log = view.log();
                        losses::static_ips_loss(
                            view,
                            pred,
                            |u, i, t| table.clipped(log, u, i, t),
                            PointLoss::Mse,
                            self.cfg.p_min,
                        )
                    }
                    Estimator::Dancer(table) => {
                        let log = view.log();
                        losses::dancer_loss(
                            view,
                            pred,
                            |u, i, t| table.clipped(log, u, i, t),
                            PointLoss::Mse,
                            self.cfg.p_min,
                        )
                    }
                }
            }
        }
    }
}

/// Fit a model on the train view, early-stopping on the validation
/// objective (same estimator as training), and return the best-validation
/// checkpoint plus the per-epoch report.
pub fn train(
    spec: &ModelSpec,
    train_view: &LogView,
    valid_view: &LogView,
    estimator: &Estimator,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainingReport)> {
    cfg.validate()?;
    if !spec.is_trainable() {
        return Err(Error::Config(format!(
            "family {} has no trainable parameters",
            spec.family.as_str()
        )));
    }
    if spec.link == Link::Sigmoid && !matches!(estimator, Estimator::Naive) {
        return Err(Error::Config(
            "observation-task training minimizes the NLL and takes no IPS estimator".into(),
        ));
    }
    let log = train_view.log();
    let active = ActiveEntities::from_view(train_view);
    let mut params = ModelParams::init(spec, log, &active, cfg.seed);

    let mut samples: Vec<CellSample> = Vec::new();
    let fixed_samples = spec.link == Link::Identity;
    if fixed_samples {
        samples = Runner { spec, train_view, estimator, cfg }.rating_samples()?;
        if samples.is_empty() {
            return Err(Error::EmptyPartition("train".into()));
        }
    }

    let runner = Runner { spec, train_view, estimator, cfg };
    let mut report = TrainingReport::default();
    let mut best_params = params.clone();
    let mut best_valid = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0usize;

    let mut grad = CellGradient::zeros(spec.dim);
    let mut accum = BatchAccum::new(spec.dim, log.num_periods());

    for epoch in 1..=cfg.max_epochs {
        if !fixed_samples {
            runner.observation_samples(epoch, &mut samples);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xE000 + epoch as u64));
        samples.shuffle(&mut rng);

        for batch in samples.chunks(cfg.batch_size) {
            accum.clear();
            for sample in batch {
                cell_gradient(spec, &params, sample, cfg.l2, &mut grad);
                accum.add(sample, &grad, spec);
            }
            accum.apply(&mut params, cfg.lr);
        }

        let train_objective = runner.objective(&params, train_view)?;
        let valid_objective = runner.objective(&params, valid_view)?;
        if !train_objective.is_finite() || !params.all_finite() {
            return Err(Error::Diverged { epoch, objective: "train" });
        }
        if !valid_objective.is_finite() {
            return Err(Error::Diverged { epoch, objective: "valid" });
        }
        report.epochs.push(EpochStats { epoch, train_objective, valid_objective });

        if valid_objective < best_valid {
            best_valid = valid_objective;
            best_epoch = epoch;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    report.best_epoch = best_epoch;
    report.best_valid = best_valid;
    Ok((best_params, report))
}

/// Outcome of one grid-search trial.
#[derive(Debug, Clone)]
pub struct GridTrial {
    pub lr: f64,
    pub l2: f64,
    pub valid_objective: Option<f64>,
}

#[derive(Debug)]
pub struct GridSearchResult {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub report: TrainingReport,
    pub trials: Vec<GridTrial>,
}

/// Train one model per (lr, l2) pair and keep the configuration with the
/// lowest validation objective. Diverged trials are skipped; ties break
/// toward smaller l2, then smaller lr. Trials run concurrently but
/// selection order is fixed.
pub fn grid_search(
    spec: &ModelSpec,
    train_view: &LogView,
    valid_view: &LogView,
    estimator: &Estimator,
    lr_grid: &[f64],
    l2_grid: &[f64],
    base: &TrainConfig,
) -> Result<GridSearchResult> {
    if lr_grid.is_empty() || l2_grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let mut combos: Vec<(f64, f64)> = Vec::new();
    let mut l2s = l2_grid.to_vec();
    l2s.sort_by(f64::total_cmp);
    let mut lrs = lr_grid.to_vec();
    lrs.sort_by(f64::total_cmp);
    for &l2 in &l2s {
        for &lr in &lrs {
            combos.push((l2, lr));
        }
    }

    let outcomes: Vec<(f64, f64, Result<(ModelParams, TrainingReport)>)> = combos
        .par_iter()
        .map(|&(l2, lr)| {
            let cfg = TrainConfig { lr, l2, ..base.clone() };
            (l2, lr, train(spec, train_view, valid_view, estimator, &cfg))
        })
        .collect();

    let mut best: Option<(f64, GridSearchResult)> = None;
    let mut trials = Vec::with_capacity(outcomes.len());
    for (l2, lr, outcome) in outcomes {
        match outcome {
            Ok((params, report)) => {
                trials.push(GridTrial { lr, l2, valid_objective: Some(report.best_valid) });
                let better = match &best {
                    None => true,
                    Some((valid, _)) => report.best_valid < *valid,
                };
                if better {
                    let config = TrainConfig { lr, l2, ..base.clone() };
                    best = Some((
                        report.best_valid,
                        GridSearchResult { config, params, report, trials: Vec::new() },
                    ));
                }
            }
            Err(Error::Diverged { .. }) => {
                trials.push(GridTrial { lr, l2, valid_objective: None });
            }
            Err(other) => return Err(other),
        }
    }
    match best {
        Some((_, mut result)) => {
            result.trials = trials;
            Ok(result)
        }
        None => Err(Error::ExhaustedGrid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AgeBinning, InteractionLog, RatingEvent, SECONDS_PER_YEAR};
    use crate::model::Family;

    fn years(y: f64) -> i64 {
        (y * SECONDS_PER_YEAR as f64).round() as i64
    }

    /// A small log with two age bins and a mild period effect; every user
    /// has enough ratings for a nonempty validation partition.
    fn toy_views() -> (LogView, LogView) {
        let mut events = Vec::new();
        for u in 0..16u32 {
            for i in 0..13u32 {
                if (u + i) % 5 == 0 {
                    continue;
                }
                let age = if (u * 7 + i) % 2 == 0 { 0.2 } else { 1.4 };
                let rating = 0.5 + f64::from((u + 2 * i) % 9) * 0.5;
                events.push(
                    RatingEvent::new(u + 1, i + 1, rating, years(age) + i64::from(u)).unwrap(),
                );
            }
        }
        let log = InteractionLog::from_events(&events, AgeBinning::standard()).unwrap();
        let views = crate::dataset::split(
            &log,
            &crate::dataset::SplitSpec::new(crate::dataset::SplitStrategy::Random, 7),
        )
        .unwrap();
        assert!(!views.valid.is_empty());
        (views.train, views.valid)
    }

    #[test]
    fn gradient_examples_at_origin() {
        let events = [RatingEvent::new(1, 1, 1.0, 0).unwrap()];
        let log = InteractionLog::from_events(&events, AgeBinning::standard()).unwrap();
        let spec = ModelSpec::rating(Family::Mf, 2);
        let params = ModelParams {
            dim: 2,
            n_users: 1,
            n_items: 1,
            n_periods: 7,
            user_vecs: vec![0.0; 2],
            item_vecs: vec![0.0; 2],
            age_vecs: vec![0.0; 14],
            user_bias: vec![0.0],
            item_bias: vec![0.0],
            age_bias: vec![0.0; 7],
            global_bias: 0.0,
        };
        let sample = CellSample { user: 0, item: 0, period: 1, target: 1.0, weight: 1.0 };
        let mut grad = CellGradient::zeros(2);
        cell_gradient(&spec, &params, &sample, 0.0, &mut grad);
        // d/db = 2 (yhat - y) = -2 at the origin.
        assert!((grad.global_bias - (-2.0)).abs() < 1e-12);

        // Sigmoid link, o = 1, zero score: d/dscore = sigma(0) - 1 = -0.5.
        let ospec = ModelSpec::observation(Family::Tmf, 2);
        let osample = CellSample { user: 0, item: 0, period: 1, target: 1.0, weight: 1.0 };
        cell_gradient(&ospec, &params, &osample, 0.0, &mut grad);
        assert!((grad.age_bias - (-0.5)).abs() < 1e-12);
        let _ = log;
    }

    /// Central finite difference of the per-cell objective w.r.t. one
    /// parameter slot.
    fn fd(
        spec: &ModelSpec,
        params: &mut ModelParams,
        sample: &CellSample,
        l2: f64,
        write: impl Fn(&mut ModelParams, f64),
        read: impl Fn(&ModelParams) -> f64,
    ) -> f64 {
        let h = 1e-5;
        let orig = read(params);
        write(params, orig + h);
        let plus = per_cell_objective(spec, params, sample, l2);
        write(params, orig - h);
        let minus = per_cell_objective(spec, params, sample, l2);
        write(params, orig);
        (plus - minus) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let tol = 1e-4 * analytic.abs().max(numeric.abs()).max(1.0);
        assert!(
            (analytic - numeric).abs() <= tol,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let families = [Family::Mf, Family::Tmf, Family::Ttf, Family::TtfPlusPlus, Family::Tmtf];
        let dim = 3;
        for family in families {
            for link in [Link::Identity, Link::Sigmoid] {
                let spec = ModelSpec { family, link, dim };
                for trial in 0..4 {
                    let mut params = ModelParams {
                        dim,
                        n_users: 2,
                        n_items: 2,
                        n_periods: 3,
                        user_vecs: (0..6).map(|_| rng.gen_range(-0.8..0.8)).collect(),
                        item_vecs: (0..6).map(|_| rng.gen_range(-0.8..0.8)).collect(),
                        age_vecs: (0..9).map(|_| rng.gen_range(-0.8..0.8)).collect(),
                        user_bias: (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                        item_bias: (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                        age_bias: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                        global_bias: rng.gen_range(-0.5..0.5),
                    };
                    let weight = if trial % 2 == 0 { 1.0 } else { 1.0 / 0.37 };
                    let target = match link {
                        Link::Identity => rng.gen_range(0.5..5.0),
                        Link::Sigmoid => f64::from(u8::from(trial % 2 == 0)),
                    };
                    let sample = CellSample {
                        user: rng.gen_range(0..2),
                        item: rng.gen_range(0..2),
                        period: rng.gen_range(1..=3),
                        target,
                        weight,
                    };
                    let l2 = if trial >= 2 { 0.05 } else { 0.0 };
                    let mut grad = CellGradient::zeros(dim);
                    cell_gradient(&spec, &params, &sample, l2, &mut grad);
                    let u = sample.user as usize;
                    for k in 0..dim {
                        let numeric = fd(
                            &spec,
                            &mut params,
                            &sample,
                            l2,
                            |p, v| p.user_vecs[u * dim + k] = v,
                            |p| p.user_vecs[u * dim + k],
                        );
                        assert_close(grad.user_vec[k], numeric, "user_vec");
                    }
                    let numeric = fd(
                        &spec,
                        &mut params,
                        &sample,
                        l2,
                        |p, v| p.global_bias = v,
                        |p| p.global_bias,
                    );
                    assert_close(grad.global_bias, numeric, "global_bias");
                }
            }
        }
    }

    #[test]
    fn single_cell_interpolation_drives_mse_to_zero() {
        let events = [
            RatingEvent::new(1, 1, 4.5, 0).unwrap(),
            RatingEvent::new(1, 2, 4.5, 10).unwrap(),
        ];
        let log = InteractionLog::from_events(&events, AgeBinning::standard()).unwrap();
        let view = log.full_view();
        let spec = ModelSpec::rating(Family::Mf, 4);
        let cfg = TrainConfig {
            lr: 0.05,
            max_epochs: 400,
            patience: 400,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (params, report) = train(&spec, &view, &view, &Estimator::Naive, &cfg).unwrap();
        let mse = report.epochs.last().unwrap().train_objective;
        assert!(mse < 1e-3, "training MSE {mse} should approach zero");
        assert!(params.all_finite());
    }

    #[test]
    fn heavy_regularization_collapses_predictions() {
        let (train_view, valid_view) = toy_views();
        // TTF regularizes every parameter it reads, so in the large-l2
        // limit its identity-link predictions collapse to zero.
        let spec = ModelSpec::rating(Family::Ttf, 4);
        let cfg = TrainConfig {
            lr: 0.01,
            l2: 10.0,
            batch_size: 1,
            max_epochs: 50,
            patience: 50,
            ..TrainConfig::default()
        };
        let (params, _) = train(&spec, &train_view, &valid_view, &Estimator::Naive, &cfg).unwrap();
        let c = train_view.observed()[0];
        let pred = predict(&spec, &params, c.user, c.item, c.period);
        assert!(pred.abs() < 1e-3, "prediction {pred} should collapse to zero");
        assert!(params.user_vecs.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn training_objective_non_increasing_at_tiny_lr() {
        let (train_view, valid_view) = toy_views();
        assert!(train_view.len() >= 100, "toy instance has {} cells", train_view.len());
        let spec = ModelSpec::rating(Family::Tmf, 4);
        let cfg = TrainConfig {
            lr: 1e-5,
            max_epochs: 12,
            patience: 12,
            ..TrainConfig::default()
        };
        let (_, report) = train(&spec, &train_view, &valid_view, &Estimator::Naive, &cfg).unwrap();
        for pair in report.epochs.windows(2) {
            assert!(
                pair[1].train_objective <= pair[0].train_objective + 1e-12,
                "objective rose: {} -> {}",
                pair[0].train_objective,
                pair[1].train_objective
            );
        }
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (train_view, valid_view) = toy_views();
        let spec = ModelSpec::observation(Family::Tmtf, 4);
        let cfg = TrainConfig { lr: 0.05, max_epochs: 6, ..TrainConfig::default() };
        let (a, _) = train(&spec, &train_view, &valid_view, &Estimator::Naive, &cfg).unwrap();
        let (b, _) = train(&spec, &train_view, &valid_view, &Estimator::Naive, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dancer_with_unit_propensities_matches_naive_trajectory() {
        let (train_view, valid_view) = toy_views();
        let table = Arc::new(crate::propensity::PropensityTable::uniform(1.0));
        let spec = ModelSpec::rating(Family::Tmf, 4);
        let cfg = TrainConfig { lr: 0.02, max_epochs: 5, ..TrainConfig::default() };
        let (a, _) = train(&spec, &train_view, &valid_view, &Estimator::Naive, &cfg).unwrap();
        let (b, _) =
            train(&spec, &train_view, &valid_view, &Estimator::Dancer(table), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observation_task_rejects_ips_estimators() {
        let (train_view, valid_view) = toy_views();
        let spec = ModelSpec::observation(Family::Mf, 4);
        let table = Arc::new(crate::propensity::PropensityTable::uniform(0.5));
        let res = train(
            &spec,
            &train_view,
            &valid_view,
            &Estimator::Dancer(table),
            &TrainConfig::default(),
        );
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn grid_search_prefers_finite_and_small() {
        let (train_view, valid_view) = toy_views();
        let spec = ModelSpec::rating(Family::Mf, 4);
        let base = TrainConfig { max_epochs: 15, ..TrainConfig::default() };
        // Single-entry grid returns that configuration.
        let single = grid_search(
            &spec,
            &train_view,
            &valid_view,
            &Estimator::Naive,
            &[0.01],
            &[1e-4],
            &base,
        )
        .unwrap();
        assert_eq!(single.config.lr, 0.01);
        assert_eq!(single.config.l2, 1e-4);

        // λ in {0, 1.0}: the unregularized model attains the lower
        // validation MSE on this instance.
        let result = grid_search(
            &spec,
            &train_view,
            &valid_view,
            &Estimator::Naive,
            &[0.01],
            &[0.0, 1.0],
            &base,
        )
        .unwrap();
        assert_eq!(result.config.l2, 0.0);
        let objs: Vec<Option<f64>> =
            result.trials.iter().map(|t| t.valid_objective).collect();
        assert_eq!(objs.len(), 2);
        assert!(objs[0].unwrap() < objs[1].unwrap());
    }

    #[test]
    fn negative_sampling_approximates_full_enumeration() {
        let (train_view, valid_view) = toy_views();
        let spec = ModelSpec::observation(Family::Constant, 1);
        let full_cfg = TrainConfig { lr: 0.5, max_epochs: 80, patience: 80, ..TrainConfig::default() };
        let (full, _) = train(&spec, &train_view, &valid_view, &Estimator::Naive, &full_cfg).unwrap();
        let sampled_cfg =
            TrainConfig { negative_sample_rate: Some(0.5), ..full_cfg.clone() };
        let (sampled, _) =
            train(&spec, &train_view, &valid_view, &Estimator::Naive, &sampled_cfg).unwrap();
        let p_full = sigmoid(full.global_bias);
        let p_sampled = sigmoid(sampled.global_bias);
        assert!(
            (p_full - p_sampled).abs() < 0.02,
            "full {p_full} vs sampled {p_sampled}"
        );
    }
}
