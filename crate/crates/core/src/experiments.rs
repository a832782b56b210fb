//! End-to-end experiment pipelines behind the CLI subcommands.
//!
//! Configuration is a flat `key=value` text file with dotted section
//! prefixes (`train.lr=0.001`); any key can be overridden from the command
//! line. Every emitted CSV row carries the config and seed-list
//! fingerprints, and rows are assembled in a fixed order, so identical
//! configurations reproduce byte-identical outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::dataset::{
    read_ratings_csv_path, split, AgeBinning, InteractionLog, LogView, ObservedCell, SplitSpec,
    SplitStrategy,
};
use crate::losses::{clamp_open_unit, nll_to_perplexity, propensity_nll};
use crate::metrics::{
    evaluate_suite, mean_std, paired_seed_comparison, per_age_aggregates, per_age_predicted,
    RatingMetrics,
};
use crate::model::{predict, Family, Link, ModelParams, ModelSpec, RatingModel};
use crate::numeric::{fnv1a64, mix_seed};
use crate::oracle::{counterexample_instance, expected_loss, OracleEstimator};
use crate::propensity::{estimate_counting, estimate_model, CountingKind, PropensityTable};
use crate::sim::{
    build_ground_truth, build_propensities, load_world_artifacts, sample_world, GroundTruth,
    SimulatedWorld, TARGET_MEAN_PROPENSITY,
};
use crate::train::{grid_search, train, Estimator, TrainConfig, L2_GRID, LR_GRID};
use crate::losses::PointLoss;
use crate::{Error, Result};

/// Scale applied to predicted observation probabilities when evaluating the
/// time-based split, compensating its four-fold train/test rate mismatch.
pub const TIME_BASED_SCALE: f64 = 0.25;

/// Flat key=value configuration with stable hashing.
#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    map: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse a config file: one `key=value` per line, `#` comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim());
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required config key '{key}'")))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("bad float for '{key}': {e}"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("bad integer for '{key}': {e}"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("bad integer for '{key}': {e}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(other) => Err(Error::Config(format!("bad bool for '{key}': {other}"))),
        }
    }

    /// Comma-separated list of run seeds; defaults to 1..=10. Duplicates are
    /// rejected.
    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = match self.get("seeds") {
            None => (1..=10).collect(),
            Some(spec) => spec
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("bad seed '{s}': {e}")))
                })
                .collect::<Result<_>>()?,
        };
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        Ok(seeds)
    }

    fn float_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(spec) => spec
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("bad float '{s}' in {key}: {e}")))
                })
                .collect(),
        }
    }

    /// FNV-1a fingerprint of the canonical key=value serialization.
    pub fn hash(&self) -> u64 {
        let canonical: String =
            self.map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        fnv1a64(canonical.as_bytes())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get_or("out", "out"))
    }
}

fn seeds_hash(seeds: &[u64]) -> u64 {
    let joined: String =
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    fnv1a64(joined.as_bytes())
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

/// Load the rating log named by the config's `dataset` key.
pub fn ingest_log(cfg: &ExperimentConfig) -> Result<Arc<InteractionLog>> {
    let path = PathBuf::from(cfg.require("dataset")?);
    let events = read_ratings_csv_path(&path)?;
    InteractionLog::from_events(&events, AgeBinning::standard())
}

fn rating_cfg(cfg: &ExperimentConfig, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        lr: cfg.get_f64("train.lr", 0.01)?,
        l2: cfg.get_f64("train.l2", 0.01)?,
        batch_size: cfg.get_usize("train.batch_size", 1024)?,
        max_epochs: cfg.get_usize("train.max_epochs", 200)?,
        patience: cfg.get_usize("train.patience", 5)?,
        seed,
        negative_sample_rate: None,
        p_min: cfg.get_f64("train.p_min", crate::losses::DEFAULT_P_MIN)?,
    })
}

fn obs_cfg(cfg: &ExperimentConfig, seed: u64) -> Result<TrainConfig> {
    let rate = cfg.get_f64("obs.negative_sample_rate", 0.0)?;
    Ok(TrainConfig {
        lr: cfg.get_f64("obs.lr", 0.1)?,
        l2: cfg.get_f64("obs.l2", 1e-6)?,
        batch_size: cfg.get_usize("obs.batch_size", 1024)?,
        max_epochs: cfg.get_usize("obs.max_epochs", 200)?,
        patience: cfg.get_usize("obs.patience", 5)?,
        seed,
        negative_sample_rate: if rate > 0.0 { Some(rate) } else { None },
        p_min: cfg.get_f64("train.p_min", crate::losses::DEFAULT_P_MIN)?,
    })
}

fn dim(cfg: &ExperimentConfig) -> Result<usize> {
    cfg.get_usize("dim", crate::model::DEFAULT_DIM)
}

/// Fit a model, optionally grid-searching (grid.enabled) over the stated
/// lr/l2 ranges.
fn fit_model(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    train_view: &LogView,
    valid_view: &LogView,
    estimator: &Estimator,
    base: &TrainConfig,
) -> Result<ModelParams> {
    if cfg.get_bool("grid.enabled", false)? {
        let lr_grid = cfg.float_list("grid.lr", &LR_GRID)?;
        let l2_grid = cfg.float_list("grid.l2", &L2_GRID)?;
        let result =
            grid_search(spec, train_view, valid_view, estimator, &lr_grid, &l2_grid, base)?;
        Ok(result.params)
    } else {
        let (params, _) = train(spec, train_view, valid_view, estimator, base)?;
        Ok(params)
    }
}

// ---------------------------------------------------------------------------
// RQ1: observation prediction
// ---------------------------------------------------------------------------

/// An observation-prediction method: a counting ratio or a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsMethod {
    Counting(CountingKind),
    Model(Family),
}

impl ObsMethod {
    pub fn name(self) -> &'static str {
        match self {
            ObsMethod::Counting(k) => k.as_str(),
            ObsMethod::Model(f) => f.as_str(),
        }
    }

    /// Table 1's eight methods, static baselines first.
    pub fn rq1_default_set() -> Vec<ObsMethod> {
        vec![
            ObsMethod::Counting(CountingKind::Constant),
            ObsMethod::Counting(CountingKind::Pop),
            ObsMethod::Model(Family::Mf),
            ObsMethod::Counting(CountingKind::TPop),
            ObsMethod::Model(Family::Tmf),
            ObsMethod::Model(Family::Ttf),
            ObsMethod::Model(Family::TtfPlusPlus),
            ObsMethod::Model(Family::Tmtf),
        ]
    }
}

impl std::str::FromStr for ObsMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(kind) = s.parse::<CountingKind>() {
            if !matches!(kind, CountingKind::TgPop) {
                return Ok(ObsMethod::Counting(kind));
            }
        }
        let family: Family = s.parse()?;
        if family.is_counting() || family == Family::ItemAge {
            return Err(Error::Config(format!("'{s}' is not an observation model")));
        }
        Ok(ObsMethod::Model(family))
    }
}

fn parse_obs_methods(cfg: &ExperimentConfig) -> Result<Vec<ObsMethod>> {
    match cfg.get("methods") {
        None => Ok(ObsMethod::rq1_default_set()),
        Some(spec) => spec.split(',').map(|s| s.trim().parse()).collect(),
    }
}

/// Fit one observation method on a split and return its propensity table.
pub fn fit_observation_method(
    cfg: &ExperimentConfig,
    method: ObsMethod,
    train_view: &LogView,
    valid_view: &LogView,
    seed: u64,
) -> Result<PropensityTable> {
    match method {
        ObsMethod::Counting(kind) => estimate_counting(kind, train_view),
        ObsMethod::Model(family) => {
            let spec = ModelSpec::observation(family, dim(cfg)?);
            if cfg.get_bool("grid.enabled", false)? {
                let params = fit_model(
                    cfg,
                    &spec,
                    train_view,
                    valid_view,
                    &Estimator::Naive,
                    &obs_cfg(cfg, seed)?,
                )?;
                Ok(PropensityTable::from_model(spec, params))
            } else {
                let (table, _) =
                    estimate_model(&spec, train_view, valid_view, &obs_cfg(cfg, seed)?)?;
                Ok(table)
            }
        }
    }
}

/// NLL and PPL of a propensity table on a test view; estimates are clamped
/// strictly inside (0, 1) the same way the optimizer clamps them.
pub fn observation_nll_ppl(table: &PropensityTable, test_view: &LogView) -> Result<(f64, f64)> {
    let log = test_view.log();
    let nll =
        propensity_nll(test_view, |u, i, t| clamp_open_unit(table.value(log, u, i, t)))?;
    Ok((nll, nll_to_perplexity(nll)))
}

#[derive(Debug, Clone)]
pub struct Rq1Row {
    pub strategy: SplitStrategy,
    pub method: String,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub ppl_mean: f64,
    pub ppl_std: f64,
    pub significant_vs_mf: Option<bool>,
    pub per_seed_nll: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Rq1Report {
    pub rows: Vec<Rq1Row>,
}

pub fn run_rq1(cfg: &ExperimentConfig) -> Result<Rq1Report> {
    let log = ingest_log(cfg)?;
    let seeds = cfg.seeds()?;
    let methods = parse_obs_methods(cfg)?;
    let strategies: Vec<SplitStrategy> = match cfg.get("split.strategy") {
        None => vec![SplitStrategy::Random, SplitStrategy::TimeBased],
        Some(s) => vec![s.parse()?],
    };

    let mut rows = Vec::new();
    for &strategy in &strategies {
        let splits: Vec<_> = seeds
            .iter()
            .map(|&seed| split(&log, &SplitSpec::new(strategy, seed)))
            .collect::<Result<_>>()?;

        // (method, seed) jobs fan out; results are gathered in job order.
        let jobs: Vec<(usize, usize)> = (0..methods.len())
            .flat_map(|m| (0..seeds.len()).map(move |s| (m, s)))
            .collect();
        let outcomes: Vec<Result<f64>> = jobs
            .par_iter()
            .map(|&(m, s)| {
                let views = &splits[s];
                let mut table =
                    fit_observation_method(cfg, methods[m], &views.train, &views.valid, seeds[s])?;
                if strategy == SplitStrategy::TimeBased {
                    table.rescale(TIME_BASED_SCALE)?;
                }
                let (nll, _) = observation_nll_ppl(&table, &views.test)?;
                Ok(nll)
            })
            .collect();

        let mut per_method_nll: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
        for ((m, _), outcome) in jobs.into_iter().zip(outcomes) {
            per_method_nll[m].push(outcome?);
        }

        let mf_nll = methods
            .iter()
            .position(|m| *m == ObsMethod::Model(Family::Mf))
            .map(|k| per_method_nll[k].clone());

        for (m, method) in methods.iter().enumerate() {
            let nlls = &per_method_nll[m];
            let ppls: Vec<f64> = nlls.iter().map(|&n| nll_to_perplexity(n)).collect();
            let (nll_mean, nll_std) = mean_std(nlls);
            let (ppl_mean, ppl_std) = mean_std(&ppls);
            let significant_vs_mf = match (&mf_nll, method) {
                (Some(mf), m) if *m != ObsMethod::Model(Family::Mf) && mf.len() >= 2 => {
                    Some(paired_seed_comparison(nlls, mf)?.significant)
                }
                _ => None,
            };
            rows.push(Rq1Row {
                strategy,
                method: method.name().to_string(),
                nll_mean,
                nll_std,
                ppl_mean,
                ppl_std,
                significant_vs_mf,
                per_seed_nll: nlls.clone(),
            });
        }
    }

    let report = Rq1Report { rows };
    write_rq1_csv(cfg, &seeds, &report)?;
    Ok(report)
}

fn write_rq1_csv(cfg: &ExperimentConfig, seeds: &[u64], report: &Rq1Report) -> Result<()> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("rq1.csv"))?;
    w.write_record([
        "strategy",
        "method",
        "nll_mean",
        "nll_std",
        "ppl_mean",
        "ppl_std",
        "significant_vs_mf",
        "n_runs",
        "seeds_hash",
        "config_hash",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.strategy.as_str().to_string(),
            r.method.clone(),
            r.nll_mean.to_string(),
            r.nll_std.to_string(),
            r.ppl_mean.to_string(),
            r.ppl_std.to_string(),
            r.significant_vs_mf.map(|b| b.to_string()).unwrap_or_default(),
            r.per_seed_nll.len().to_string(),
            hex(seeds_hash(seeds)),
            hex(cfg.hash()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// RQ2: rating prediction on logged data
// ---------------------------------------------------------------------------

/// A rating-prediction method of the observed/debiased comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingMethod {
    Counting(Family),
    Factor(Family),
}

impl RatingMethod {
    pub fn name(self) -> &'static str {
        match self {
            RatingMethod::Counting(f) | RatingMethod::Factor(f) => f.as_str(),
        }
    }

    /// Table 2's seven methods.
    pub fn rq2_default_set() -> Vec<RatingMethod> {
        vec![
            RatingMethod::Counting(Family::Avg),
            RatingMethod::Factor(Family::Mf),
            RatingMethod::Counting(Family::TAvg),
            RatingMethod::Factor(Family::Tmf),
            RatingMethod::Factor(Family::Ttf),
            RatingMethod::Factor(Family::TtfPlusPlus),
            RatingMethod::Factor(Family::Tmtf),
        ]
    }
}

impl std::str::FromStr for RatingMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let family: Family = s.parse()?;
        match family {
            Family::Avg | Family::TAvg => Ok(RatingMethod::Counting(family)),
            Family::Mf | Family::Tmf | Family::Ttf | Family::TtfPlusPlus | Family::Tmtf => {
                Ok(RatingMethod::Factor(family))
            }
            other => Err(Error::Config(format!(
                "'{}' is not a rating-prediction method",
                other.as_str()
            ))),
        }
    }
}

fn parse_rating_methods(cfg: &ExperimentConfig) -> Result<Vec<RatingMethod>> {
    match cfg.get("methods") {
        None => Ok(RatingMethod::rq2_default_set()),
        Some(spec) => spec.split(',').map(|s| s.trim().parse()).collect(),
    }
}

/// Fit a rating method and return its predictor.
fn fit_rating_method(
    cfg: &ExperimentConfig,
    method: RatingMethod,
    train_view: &LogView,
    valid_view: &LogView,
    estimator: &Estimator,
    seed: u64,
) -> Result<RatingModel> {
    match method {
        RatingMethod::Counting(family) => Ok(RatingModel::counting(family, train_view)),
        RatingMethod::Factor(family) => {
            let spec = ModelSpec::rating(family, dim(cfg)?);
            let params =
                fit_model(cfg, &spec, train_view, valid_view, estimator, &rating_cfg(cfg, seed)?)?;
            Ok(RatingModel::Factor { spec, params: Arc::new(params) })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rq2Row {
    pub setting: &'static str,
    pub method: String,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub significant_vs_mf: Option<bool>,
    pub per_seed_mse: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Rq2Report {
    pub rows: Vec<Rq2Row>,
}

pub fn run_rq2(cfg: &ExperimentConfig) -> Result<Rq2Report> {
    let log = ingest_log(cfg)?;
    let seeds = cfg.seeds()?;
    let methods = parse_rating_methods(cfg)?;

    // Per-seed random split plus the TMTF-estimated propensities from the
    // observation task on the same split.
    let per_seed: Vec<(crate::dataset::SplitViews, Arc<PropensityTable>)> = seeds
        .par_iter()
        .map(|&seed| {
            let views = split(&log, &SplitSpec::new(SplitStrategy::Random, seed))?;
            let table = fit_observation_method(
                cfg,
                ObsMethod::Model(Family::Tmtf),
                &views.train,
                &views.valid,
                seed,
            )?;
            Ok((views, Arc::new(table)))
        })
        .collect::<Result<_>>()?;

    let settings: [&'static str; 2] = ["observed", "debiased"];
    let mut rows = Vec::new();
    for setting in settings {
        let jobs: Vec<(usize, usize)> = (0..methods.len())
            .flat_map(|m| (0..seeds.len()).map(move |s| (m, s)))
            .collect();
        let outcomes: Vec<Result<RatingMetrics>> = jobs
            .par_iter()
            .map(|&(m, s)| {
                let (views, table) = &per_seed[s];
                let estimator = if setting == "debiased" {
                    Estimator::Dancer(Arc::clone(table))
                } else {
                    Estimator::Naive
                };
                let model = fit_rating_method(
                    cfg,
                    methods[m],
                    &views.train,
                    &views.valid,
                    &estimator,
                    seeds[s],
                )?;
                let propensities =
                    if setting == "debiased" { Some(table.as_ref()) } else { None };
                evaluate_suite(&views.test, |u, i, t| model.predict(u, i, t), propensities)
            })
            .collect();

        let mut per_method: Vec<Vec<RatingMetrics>> = vec![Vec::new(); methods.len()];
        for ((m, _), outcome) in jobs.into_iter().zip(outcomes) {
            per_method[m].push(outcome?);
        }

        let mf_mse: Option<Vec<f64>> = methods
            .iter()
            .position(|m| *m == RatingMethod::Factor(Family::Mf))
            .map(|k| per_method[k].iter().map(|r| r.mse).collect());

        for (m, method) in methods.iter().enumerate() {
            let suite = &per_method[m];
            let mses: Vec<f64> = suite.iter().map(|r| r.mse).collect();
            let maes: Vec<f64> = suite.iter().map(|r| r.mae).collect();
            let accs: Vec<f64> = suite.iter().map(|r| r.acc).collect();
            let (mse_mean, mse_std) = mean_std(&mses);
            let (mae_mean, mae_std) = mean_std(&maes);
            let (acc_mean, acc_std) = mean_std(&accs);
            let significant_vs_mf = match (&mf_mse, method) {
                (Some(mf), m) if *m != RatingMethod::Factor(Family::Mf) && mf.len() >= 2 => {
                    Some(paired_seed_comparison(&mses, mf)?.significant)
                }
                _ => None,
            };
            rows.push(Rq2Row {
                setting,
                method: method.name().to_string(),
                mse_mean,
                mse_std,
                mae_mean,
                mae_std,
                acc_mean,
                acc_std,
                significant_vs_mf,
                per_seed_mse: mses,
            });
        }
    }

    let report = Rq2Report { rows };
    write_rq2_csv(cfg, &seeds, &report)?;
    Ok(report)
}

fn write_rq2_csv(cfg: &ExperimentConfig, seeds: &[u64], report: &Rq2Report) -> Result<()> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("rq2.csv"))?;
    w.write_record([
        "setting",
        "method",
        "mse_mean",
        "mse_std",
        "mae_mean",
        "mae_std",
        "acc_mean",
        "acc_std",
        "significant_vs_mf",
        "n_runs",
        "seeds_hash",
        "config_hash",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.setting.to_string(),
            r.method.clone(),
            r.mse_mean.to_string(),
            r.mse_std.to_string(),
            r.mae_mean.to_string(),
            r.mae_std.to_string(),
            r.acc_mean.to_string(),
            r.acc_std.to_string(),
            r.significant_vs_mf.map(|b| b.to_string()).unwrap_or_default(),
            r.per_seed_mse.len().to_string(),
            hex(seeds_hash(seeds)),
            hex(cfg.hash()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// RQ3: debiasing on simulated worlds
// ---------------------------------------------------------------------------

/// Table 3's method grid: a model family times a loss estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rq3Method {
    Counting(Family),
    Factor { family: Family, weighting: Weighting },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Naive,
    StaticIps,
    Dancer,
}

impl Rq3Method {
    pub fn name(self) -> String {
        match self {
            Rq3Method::Counting(f) => f.as_str().to_string(),
            Rq3Method::Factor { family, weighting } => match weighting {
                Weighting::Naive => family.as_str().to_string(),
                Weighting::StaticIps => format!("{}-staticips", family.as_str()),
                Weighting::Dancer => format!("{}-dancer", family.as_str()),
            },
        }
    }

    pub fn rq3_default_set() -> Vec<Rq3Method> {
        vec![
            Rq3Method::Counting(Family::Avg),
            Rq3Method::Counting(Family::TAvg),
            Rq3Method::Factor { family: Family::Mf, weighting: Weighting::Naive },
            Rq3Method::Factor { family: Family::Tmf, weighting: Weighting::Naive },
            Rq3Method::Factor { family: Family::Mf, weighting: Weighting::StaticIps },
            Rq3Method::Factor { family: Family::Tmf, weighting: Weighting::StaticIps },
            Rq3Method::Factor { family: Family::Mf, weighting: Weighting::Dancer },
            Rq3Method::Factor { family: Family::Tmf, weighting: Weighting::Dancer },
        ]
    }
}

/// Propensities handed to TMF-DANCER in the robustness comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rq3Propensities {
    GroundTruth,
    TgPop,
    TPop,
}

impl Rq3Propensities {
    pub fn as_str(self) -> &'static str {
        match self {
            Rq3Propensities::GroundTruth => "ground-truth",
            Rq3Propensities::TgPop => "tg-pop",
            Rq3Propensities::TPop => "t-pop",
        }
    }
}

/// The fitted step-1/step-2 artifacts shared by every simulated world.
pub struct SimArtifacts {
    pub ground_truth: GroundTruth,
    pub propensities: Arc<PropensityTable>,
}

/// Fit ground truth and simulated bias on the real log (steps 1 and 2), or
/// load them from a serialized world directory.
pub fn prepare_sim_artifacts(
    cfg: &ExperimentConfig,
    log: &Arc<InteractionLog>,
) -> Result<SimArtifacts> {
    if let Some(dir) = cfg.get("world") {
        let (gt, props) = load_world_artifacts(Path::new(dir), log)?;
        return Ok(SimArtifacts { ground_truth: gt, propensities: Arc::new(props) });
    }
    let sim_seed = cfg.get_u64("sim.seed", 0)?;
    let sim_dim = cfg.get_usize("sim.dim", dim(cfg)?)?;
    let views = split(log, &SplitSpec::new(SplitStrategy::Random, sim_seed))?;

    // Step-1 weighting: TMTF-estimated propensities from the observation
    // task, i.e. the debiased-setting protocol.
    let obs_table = fit_observation_method(
        cfg,
        ObsMethod::Model(Family::Tmtf),
        &views.train,
        &views.valid,
        sim_seed,
    )?;
    let ground_truth = build_ground_truth(
        &views.train,
        &views.valid,
        Arc::new(obs_table),
        sim_dim,
        &rating_cfg(cfg, sim_seed)?,
    )?;
    let target_mean = cfg.get_f64("sim.target_mean", TARGET_MEAN_PROPENSITY)?;
    let propensities =
        build_propensities(log, sim_dim, target_mean, &obs_cfg(cfg, sim_seed)?)?;
    Ok(SimArtifacts { ground_truth, propensities: Arc::new(propensities) })
}

/// Split a view's cells per user into a training and a validation part.
fn carve_validation(view: &LogView, seed: u64, valid_fraction: f64) -> (LogView, LogView) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let log = view.log();
    let mut train: Vec<ObservedCell> = Vec::new();
    let mut valid: Vec<ObservedCell> = Vec::new();
    let cells = view.observed();
    let mut start = 0;
    while start < cells.len() {
        let user = cells[start].user;
        let mut end = start;
        while end < cells.len() && cells[end].user == user {
            end += 1;
        }
        let user_cells = &cells[start..end];
        start = end;
        let n_valid = (user_cells.len() as f64 * valid_fraction).floor() as usize;
        if n_valid == 0 {
            train.extend_from_slice(user_cells);
            continue;
        }
        let mut order: Vec<&ObservedCell> = user_cells.iter().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(
            seed,
            0xCA4E ^ u64::from(log.user_raw_id(user)),
        ));
        order.shuffle(&mut rng);
        for (k, c) in order.into_iter().enumerate() {
            if k < n_valid {
                valid.push(*c);
            } else {
                train.push(*c);
            }
        }
    }
    (
        LogView::new(Arc::clone(log), "train", train),
        LogView::new(Arc::clone(log), "valid", valid),
    )
}

/// Fit one Table-3 method on a world and evaluate plain metrics on the
/// unbiased test set.
pub fn run_rq3_method(
    cfg: &ExperimentConfig,
    world: &SimulatedWorld,
    method: Rq3Method,
    propensity_choice: Rq3Propensities,
    seed: u64,
) -> Result<RatingMetrics> {
    let (train_view, valid_view) = carve_validation(&world.train, seed, 0.1);
    let model = match method {
        Rq3Method::Counting(family) => RatingModel::counting(family, &train_view),
        Rq3Method::Factor { family, weighting } => {
            let estimator = match weighting {
                Weighting::Naive => Estimator::Naive,
                Weighting::StaticIps => {
                    let pop = estimate_counting(CountingKind::Pop, &train_view)?;
                    Estimator::StaticIps(Arc::new(pop))
                }
                Weighting::Dancer => {
                    let table: Arc<PropensityTable> = match propensity_choice {
                        Rq3Propensities::GroundTruth => Arc::clone(&world.propensities),
                        Rq3Propensities::TgPop => {
                            Arc::new(estimate_counting(CountingKind::TgPop, &train_view)?)
                        }
                        Rq3Propensities::TPop => {
                            Arc::new(estimate_counting(CountingKind::TPop, &train_view)?)
                        }
                    };
                    Estimator::Dancer(table)
                }
            };
            let spec = ModelSpec::rating(family, dim(cfg)?);
            let params = fit_model(
                cfg,
                &spec,
                &train_view,
                &valid_view,
                &estimator,
                &rating_cfg(cfg, seed)?,
            )?;
            RatingModel::Factor { spec, params: Arc::new(params) }
        }
    };
    evaluate_suite(&world.test, |u, i, t| model.predict(u, i, t), None)
}

#[derive(Debug, Clone)]
pub struct Rq3Row {
    pub table: &'static str,
    pub method: String,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub per_seed_mse: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Rq3PairRow {
    pub method_a: String,
    pub method_b: String,
    pub mse_mean_diff: f64,
    pub p_value: Option<f64>,
    pub significant: bool,
}

#[derive(Debug)]
pub struct Rq3Report {
    pub rows: Vec<Rq3Row>,
    pub pairs: Vec<Rq3PairRow>,
}

pub fn run_rq3(cfg: &ExperimentConfig) -> Result<Rq3Report> {
    let log = ingest_log(cfg)?;
    let seeds = cfg.seeds()?;
    let artifacts = prepare_sim_artifacts(cfg, &log)?;

    let worlds: Vec<SimulatedWorld> = seeds
        .iter()
        .map(|&seed| {
            sample_world(
                &log,
                artifacts.ground_truth.clone(),
                Arc::clone(&artifacts.propensities),
                seed,
            )
        })
        .collect::<Result<_>>()?;

    // Table 3 methods plus the Table 4 propensity variants.
    let methods = Rq3Method::rq3_default_set();
    let variants = [Rq3Propensities::TgPop, Rq3Propensities::TPop];

    let mut jobs: Vec<(&'static str, Rq3Method, Rq3Propensities)> = methods
        .iter()
        .map(|&m| ("table3", m, Rq3Propensities::GroundTruth))
        .collect();
    for &v in &variants {
        jobs.push((
            "table4",
            Rq3Method::Factor { family: Family::Tmf, weighting: Weighting::Dancer },
            v,
        ));
    }

    let flat: Vec<(usize, usize)> = (0..jobs.len())
        .flat_map(|j| (0..seeds.len()).map(move |s| (j, s)))
        .collect();
    let outcomes: Vec<Result<RatingMetrics>> = flat
        .par_iter()
        .map(|&(j, s)| {
            let (_, method, prop) = jobs[j];
            run_rq3_method(cfg, &worlds[s], method, prop, seeds[s])
        })
        .collect();

    let mut per_job: Vec<Vec<RatingMetrics>> = vec![Vec::new(); jobs.len()];
    for ((j, _), outcome) in flat.into_iter().zip(outcomes) {
        per_job[j].push(outcome?);
    }

    let mut rows = Vec::new();
    for (j, (table, method, prop)) in jobs.iter().enumerate() {
        let name = match table {
            &"table4" => format!("tmf-dancer[{}]", prop.as_str()),
            _ => method.name(),
        };
        let suite = &per_job[j];
        let mses: Vec<f64> = suite.iter().map(|r| r.mse).collect();
        let maes: Vec<f64> = suite.iter().map(|r| r.mae).collect();
        let accs: Vec<f64> = suite.iter().map(|r| r.acc).collect();
        let (mse_mean, mse_std) = mean_std(&mses);
        let (mae_mean, mae_std) = mean_std(&maes);
        let (acc_mean, acc_std) = mean_std(&accs);
        rows.push(Rq3Row {
            table,
            method: name,
            mse_mean,
            mse_std,
            mae_mean,
            mae_std,
            acc_mean,
            acc_std,
            per_seed_mse: mses,
        });
    }

    // Adjacent comparisons of the headline ordering.
    let chain =
        ["tmf-dancer", "tmf-staticips", "tmf", "mf-dancer", "mf"];
    let mut pairs = Vec::new();
    if seeds.len() >= 2 {
        for w in chain.windows(2) {
            let a = rows.iter().find(|r| r.method == w[0]);
            let b = rows.iter().find(|r| r.method == w[1]);
            if let (Some(a), Some(b)) = (a, b) {
                let cmp = paired_seed_comparison(&a.per_seed_mse, &b.per_seed_mse)?;
                pairs.push(Rq3PairRow {
                    method_a: a.method.clone(),
                    method_b: b.method.clone(),
                    mse_mean_diff: cmp.mean_diff,
                    p_value: cmp.p_value,
                    significant: cmp.significant,
                });
            }
        }
    }

    write_rq3_outputs(cfg, &seeds, &rows, &pairs, &worlds)?;
    Ok(Rq3Report { rows, pairs })
}

fn write_rq3_outputs(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    rows: &[Rq3Row],
    pairs: &[Rq3PairRow],
    worlds: &[SimulatedWorld],
) -> Result<()> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;

    let mut w = csv::Writer::from_path(out.join("rq3.csv"))?;
    w.write_record([
        "table",
        "method",
        "mse_mean",
        "mse_std",
        "mae_mean",
        "mae_std",
        "acc_mean",
        "acc_std",
        "n_runs",
        "seeds_hash",
        "config_hash",
    ])?;
    for r in rows {
        w.write_record([
            r.table.to_string(),
            r.method.clone(),
            r.mse_mean.to_string(),
            r.mse_std.to_string(),
            r.mae_mean.to_string(),
            r.mae_std.to_string(),
            r.acc_mean.to_string(),
            r.acc_std.to_string(),
            r.per_seed_mse.len().to_string(),
            hex(seeds_hash(seeds)),
            hex(cfg.hash()),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("rq3_pairs.csv"))?;
    w.write_record([
        "method_a",
        "method_b",
        "mse_mean_diff",
        "p_value",
        "significant",
        "seeds_hash",
        "config_hash",
    ])?;
    for p in pairs {
        w.write_record([
            p.method_a.clone(),
            p.method_b.clone(),
            p.mse_mean_diff.to_string(),
            p.p_value.map(|v| v.to_string()).unwrap_or_default(),
            p.significant.to_string(),
            hex(seeds_hash(seeds)),
            hex(cfg.hash()),
        ])?;
    }
    w.flush()?;

    if let Some(world) = worlds.first() {
        write_figure_data(cfg, world)?;
    }
    Ok(())
}

/// Figure-ready aggregates: per-age counts/means of the first world plus
/// per-item propensity and rating curves for hand-picked items
/// (`fig6.items` as raw ids).
fn write_figure_data(cfg: &ExperimentConfig, world: &SimulatedWorld) -> Result<()> {
    let out = cfg.out_dir();
    let log = &world.log;

    let mut w = csv::Writer::from_path(out.join("fig5.csv"))?;
    w.write_record(["method", "period", "mean_predicted", "mean_actual"])?;
    let actual = per_age_aggregates(&world.test);
    // The observed-vs-ground-truth curve for the simulated training set.
    let train_curve = per_age_aggregates(&world.train);
    for (k, agg) in train_curve.iter().enumerate() {
        w.write_record([
            "sim-train".to_string(),
            (k + 1).to_string(),
            agg.mean.map(|m| m.to_string()).unwrap_or_default(),
            actual[k].mean.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    let gt = &world.ground_truth;
    let gt_curve = per_age_predicted(&world.test, |u, i, t| {
        gt.rating(u, i, t).unwrap_or(f64::NAN)
    });
    for (k, agg) in gt_curve.iter().enumerate() {
        w.write_record([
            "sim-gt".to_string(),
            (k + 1).to_string(),
            agg.mean.map(|m| m.to_string()).unwrap_or_default(),
            actual[k].mean.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("fig6.csv"))?;
    w.write_record(["movieId", "period", "mean_propensity", "mean_predicted", "mean_gt"])?;
    if let Some(items) = cfg.get("fig6.items") {
        for raw in items.split(',') {
            let raw: u32 = raw
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("bad fig6 item id: {e}")))?;
            let item = log
                .item_dense_id(raw)
                .ok_or(Error::UnknownEntity { kind: "item", id: raw.to_string() })?;
            for t in 1..=log.num_periods() as u8 {
                let mut prop_sum = 0.0;
                let mut gt_sum = 0.0;
                let mut n = 0u64;
                for u in 0..log.num_users() as u32 {
                    if log.in_presence(u, item, t) {
                        prop_sum += world.propensities.value(log, u, item, t);
                        gt_sum += gt.rating(u, item, t).unwrap_or(f64::NAN);
                        n += 1;
                    }
                }
                if n > 0 {
                    w.write_record([
                        raw.to_string(),
                        t.to_string(),
                        (prop_sum / n as f64).to_string(),
                        String::new(),
                        (gt_sum / n as f64).to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Small subcommands: ingest, split, fit-propensity, train, evaluate,
// simulate, oracle
// ---------------------------------------------------------------------------

/// Ingest the dataset, print summary statistics, and emit `fig1.csv`
/// (per-age rating counts and means of the full log).
pub fn run_ingest(cfg: &ExperimentConfig) -> Result<String> {
    let log = ingest_log(cfg)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let view = log.full_view();
    let agg = per_age_aggregates(&view);
    let mut w = csv::Writer::from_path(out.join("fig1.csv"))?;
    w.write_record(["period", "count", "mean_rating"])?;
    for (k, a) in agg.iter().enumerate() {
        w.write_record([
            (k + 1).to_string(),
            a.count.to_string(),
            a.mean.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(format!(
        "users {} items {} ratings {} presence_cells {}",
        log.num_users(),
        log.num_items(),
        view.len(),
        log.presence_cell_count()
    ))
}

/// Split the dataset and write the partition manifest.
pub fn run_split(cfg: &ExperimentConfig) -> Result<String> {
    let log = ingest_log(cfg)?;
    let strategy: SplitStrategy = cfg.get_or("split.strategy", "random").parse()?;
    let seed = cfg.get_u64("split.seed", cfg.seeds()?[0])?;
    let views = split(&log, &SplitSpec::new(strategy, seed))?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let path = out.join("split.csv");
    let file = std::fs::File::create(&path)?;
    crate::dataset::write_split_manifest(std::io::BufWriter::new(file), &views)?;
    Ok(format!(
        "train {} valid {} test {} -> {}",
        views.train.len(),
        views.valid.len(),
        views.test.len(),
        path.display()
    ))
}

/// Fit one propensity estimator and export the table over the presence
/// cube.
pub fn run_fit_propensity(cfg: &ExperimentConfig) -> Result<String> {
    let log = ingest_log(cfg)?;
    let method: ObsMethod = cfg.get_or("propensity.method", "tmtf").parse()?;
    let strategy: SplitStrategy = cfg.get_or("split.strategy", "random").parse()?;
    let seed = cfg.get_u64("split.seed", cfg.seeds()?[0])?;
    let views = split(&log, &SplitSpec::new(strategy, seed))?;
    let mut table = fit_observation_method(cfg, method, &views.train, &views.valid, seed)?;
    if strategy == SplitStrategy::TimeBased {
        table.rescale(TIME_BASED_SCALE)?;
    }
    let (nll, ppl) = observation_nll_ppl(&table, &views.test)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let path = out.join("propensity.csv");
    let file = std::fs::File::create(&path)?;
    table.write_csv(std::io::BufWriter::new(file), &log)?;
    Ok(format!(
        "{} test NLL {:.6} PPL {:.6} -> {}",
        method.name(),
        nll,
        ppl,
        path.display()
    ))
}

/// Train one model and write its checkpoint plus the per-epoch report.
pub fn run_train(cfg: &ExperimentConfig) -> Result<String> {
    let log = ingest_log(cfg)?;
    let family: Family = cfg.require("model")?.parse()?;
    let task = cfg.get_or("task", "rating");
    let strategy: SplitStrategy = cfg.get_or("split.strategy", "random").parse()?;
    let seed = cfg.get_u64("split.seed", cfg.seeds()?[0])?;
    let views = split(&log, &SplitSpec::new(strategy, seed))?;

    let (spec, base) = match task {
        "rating" => (ModelSpec::rating(family, dim(cfg)?), rating_cfg(cfg, seed)?),
        "observation" => (ModelSpec::observation(family, dim(cfg)?), obs_cfg(cfg, seed)?),
        other => return Err(Error::Config(format!("unknown task '{other}'"))),
    };
    let estimator = match cfg.get_or("estimator", "naive") {
        "naive" => Estimator::Naive,
        "dancer" => {
            let table = fit_observation_method(
                cfg,
                ObsMethod::Model(Family::Tmtf),
                &views.train,
                &views.valid,
                seed,
            )?;
            Estimator::Dancer(Arc::new(table))
        }
        "static-ips" => {
            let table = estimate_counting(CountingKind::Pop, &views.train)?;
            Estimator::StaticIps(Arc::new(table))
        }
        other => return Err(Error::Config(format!("unknown estimator '{other}'"))),
    };

    let (params, report) = train(&spec, &views.train, &views.valid, &estimator, &base)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let ckpt = out.join("checkpoint.csv");
    crate::model::save_checkpoint(
        std::io::BufWriter::new(std::fs::File::create(&ckpt)?),
        &spec,
        &params,
        &log,
    )?;
    let report_path = out.join("training_report.csv");
    report.write_csv(std::io::BufWriter::new(std::fs::File::create(&report_path)?))?;
    Ok(format!(
        "{} {} best epoch {} valid {:.6} -> {}",
        family.as_str(),
        task,
        report.best_epoch,
        report.best_valid,
        ckpt.display()
    ))
}

/// Load a checkpoint and evaluate it on the test partition.
pub fn run_evaluate(cfg: &ExperimentConfig) -> Result<String> {
    let log = ingest_log(cfg)?;
    let strategy: SplitStrategy = cfg.get_or("split.strategy", "random").parse()?;
    let seed = cfg.get_u64("split.seed", cfg.seeds()?[0])?;
    let views = split(&log, &SplitSpec::new(strategy, seed))?;
    let ckpt_path = PathBuf::from(cfg.require("checkpoint")?);
    let file = std::fs::File::open(&ckpt_path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", ckpt_path.display())))?;
    let (spec, params) = crate::model::load_checkpoint(std::io::BufReader::new(file), &log)?;

    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let report_path = out.join("evaluation.csv");
    let mut rows = Vec::new();
    let name = spec.family.as_str().to_string();
    match spec.link {
        Link::Sigmoid => {
            let table = PropensityTable::from_model(spec, params);
            let (nll, ppl) = observation_nll_ppl(&table, &views.test)?;
            rows.push(crate::metrics::MetricRow {
                method: name.clone(),
                split: "test".into(),
                metric: "nll".into(),
                mean: nll,
                stddev: 0.0,
                n_runs: 1,
            });
            rows.push(crate::metrics::MetricRow {
                method: name,
                split: "test".into(),
                metric: "ppl".into(),
                mean: ppl,
                stddev: 0.0,
                n_runs: 1,
            });
        }
        Link::Identity => {
            let suite =
                evaluate_suite(&views.test, |u, i, t| predict(&spec, &params, u, i, t), None)?;
            for (metric, value) in
                [("mse", suite.mse), ("mae", suite.mae), ("acc", suite.acc)]
            {
                rows.push(crate::metrics::MetricRow {
                    method: name.clone(),
                    split: "test".into(),
                    metric: metric.into(),
                    mean: value,
                    stddev: 0.0,
                    n_runs: 1,
                });
            }
        }
    }
    crate::metrics::write_metric_report(
        std::io::BufWriter::new(std::fs::File::create(&report_path)?),
        &rows,
    )?;
    Ok(format!("evaluation -> {}", report_path.display()))
}

/// Generate one world and serialize it under `out/world/`.
pub fn run_simulate(cfg: &ExperimentConfig) -> Result<String> {
    let log = ingest_log(cfg)?;
    let artifacts = prepare_sim_artifacts(cfg, &log)?;
    let seed = cfg.seeds()?[0];
    let world = sample_world(&log, artifacts.ground_truth, artifacts.propensities, seed)?;
    let dir = cfg.out_dir().join("world");
    world.write_dir(&dir)?;
    Ok(format!(
        "world seed {} train {} test {} observed fraction {:.4} -> {}",
        seed,
        world.train.len(),
        world.test.len(),
        world.observed_fraction(),
        dir.display()
    ))
}

/// The exact two-period counterexample expectations.
pub fn run_oracle() -> Result<String> {
    let inst = counterexample_instance();
    let naive = expected_loss(&inst, OracleEstimator::Naive, PointLoss::Mse)?;
    let static_ips = expected_loss(&inst, OracleEstimator::StaticIps, PointLoss::Mse)?;
    let dancer = expected_loss(&inst, OracleEstimator::Dancer, PointLoss::Mse)?;
    let full = expected_loss(&inst, OracleEstimator::Full, PointLoss::Mse)?;
    Ok(format!(
        "two-period instance, p = (0.8, 0.2), point losses (1, 4)\n\
         expected naive loss      {naive:.6}\n\
         expected static-IPS loss {static_ips:.6}\n\
         expected DANCER loss     {dancer:.6}\n\
         full-information loss    {full:.6}"
    ))
}
