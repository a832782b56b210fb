//! The prediction model family.
//!
//! Factorized models score a (user, item, period) cell from embeddings and
//! offsets; counting models read ratios straight off the training partition.
//! The observation task applies a sigmoid link so scores become
//! probabilities; the rating task keeps the identity link and, for MF, TMF
//! and TMTF, adds global, user and item offsets.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{InteractionLog, LogView};
use crate::numeric::{mix_seed, sigmoid};
use crate::{Error, Result};

/// Default embedding dimension.
pub const DEFAULT_DIM: usize = 32;

/// Embedding initialization half-width.
const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Constant,
    Pop,
    TPop,
    Avg,
    TAvg,
    Mf,
    Tmf,
    Ttf,
    TtfPlusPlus,
    Tmtf,
    /// Item/age interaction only: `q_i . a_t`. Used to model observation
    /// probabilities that are independent of the user.
    ItemAge,
}

impl Family {
    pub fn is_counting(self) -> bool {
        matches!(self, Family::Constant | Family::Pop | Family::TPop | Family::Avg | Family::TAvg)
    }

    pub fn uses_user_vec(self) -> bool {
        matches!(self, Family::Mf | Family::Tmf | Family::Ttf | Family::TtfPlusPlus | Family::Tmtf)
    }

    pub fn uses_item_vec(self) -> bool {
        !self.is_counting()
    }

    pub fn uses_age_vec(self) -> bool {
        matches!(self, Family::Ttf | Family::TtfPlusPlus | Family::Tmtf | Family::ItemAge)
    }

    pub fn uses_age_bias(self) -> bool {
        matches!(self, Family::Tmf | Family::Tmtf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Constant => "constant",
            Family::Pop => "pop",
            Family::TPop => "t-pop",
            Family::Avg => "avg",
            Family::TAvg => "t-avg",
            Family::Mf => "mf",
            Family::Tmf => "tmf",
            Family::Ttf => "ttf",
            Family::TtfPlusPlus => "ttf++",
            Family::Tmtf => "tmtf",
            Family::ItemAge => "item-age",
        }
    }

    fn code(self) -> u8 {
        match self {
            Family::Constant => 0,
            Family::Pop => 1,
            Family::TPop => 2,
            Family::Avg => 3,
            Family::TAvg => 4,
            Family::Mf => 5,
            Family::Tmf => 6,
            Family::Ttf => 7,
            Family::TtfPlusPlus => 8,
            Family::Tmtf => 9,
            Family::ItemAge => 10,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Family::Constant,
            1 => Family::Pop,
            2 => Family::TPop,
            3 => Family::Avg,
            4 => Family::TAvg,
            5 => Family::Mf,
            6 => Family::Tmf,
            7 => Family::Ttf,
            8 => Family::TtfPlusPlus,
            9 => Family::Tmtf,
            10 => Family::ItemAge,
            other => return Err(Error::Data(format!("unknown family code {other}"))),
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "constant" => Family::Constant,
            "pop" => Family::Pop,
            "t-pop" | "tpop" => Family::TPop,
            "avg" => Family::Avg,
            "t-avg" | "tavg" => Family::TAvg,
            "mf" => Family::Mf,
            "tmf" => Family::Tmf,
            "ttf" => Family::Ttf,
            "ttf++" | "ttfpp" => Family::TtfPlusPlus,
            "tmtf" => Family::Tmtf,
            "item-age" | "itemage" => Family::ItemAge,
            other => return Err(Error::Config(format!("unknown model family '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Sigmoid,
}

/// A model family plus its output link and embedding dimension.
///
/// Observation-task models use the sigmoid link; rating-task models use the
/// identity link and add the `b + b_u + b_i` offsets for MF, TMF and TMTF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub family: Family,
    pub link: Link,
    pub dim: usize,
}

impl ModelSpec {
    pub fn observation(family: Family, dim: usize) -> Self {
        Self { family, link: Link::Sigmoid, dim }
    }

    pub fn rating(family: Family, dim: usize) -> Self {
        Self { family, link: Link::Identity, dim }
    }

    /// Rating-task variants of MF, TMF and TMTF carry the scalar offsets.
    pub fn uses_offsets(&self) -> bool {
        self.link == Link::Identity
            && matches!(self.family, Family::Mf | Family::Tmf | Family::Tmtf)
    }

    /// Whether the score reads the global offset: every offset-carrying
    /// rating model, plus the trainable constant (a lone global bias).
    pub fn uses_global_bias(&self) -> bool {
        self.uses_offsets() || self.family == Family::Constant
    }

    /// Families with learnable parameters. `Constant` appears on both
    /// sides: as a counting ratio and as a trainable single-parameter
    /// model (`link(b)`), which is what NLL-based estimation fits.
    pub fn is_trainable(&self) -> bool {
        !self.family.is_counting() || self.family == Family::Constant
    }
}

/// Dense parameter block for one factorized model over a log's entity space.
///
/// Entities that never occur in the training partition keep zero embeddings
/// and offsets, so cold-start predictions fall back to the global component.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_periods: usize,
    pub user_vecs: Vec<f64>,
    pub item_vecs: Vec<f64>,
    pub age_vecs: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub age_bias: Vec<f64>,
    pub global_bias: f64,
}

/// Which entities have at least one observation in the training partition.
#[derive(Debug, Clone)]
pub struct ActiveEntities {
    pub users: Vec<bool>,
    pub items: Vec<bool>,
    pub periods: Vec<bool>,
}

impl ActiveEntities {
    pub fn from_view(view: &LogView) -> Self {
        let log = view.log();
        let mut users = vec![false; log.num_users()];
        let mut items = vec![false; log.num_items()];
        let mut periods = vec![false; log.num_periods()];
        for c in view.observed() {
            users[c.user as usize] = true;
            items[c.item as usize] = true;
            periods[c.period as usize - 1] = true;
        }
        Self { users, items, periods }
    }

    pub fn everything(log: &InteractionLog) -> Self {
        Self {
            users: vec![true; log.num_users()],
            items: vec![true; log.num_items()],
            periods: vec![true; log.num_periods()],
        }
    }
}

impl ModelParams {
    /// Zero offsets; embeddings of active entities drawn i.i.d. uniform in
    /// `[-0.01, 0.01]` from per-entity seeds mixed out of the run seed, so
    /// initialization does not depend on iteration order.
    pub fn init(
        spec: &ModelSpec,
        log: &InteractionLog,
        active: &ActiveEntities,
        seed: u64,
    ) -> Self {
        let d = spec.dim;
        let (n_users, n_items, n_periods) =
            (log.num_users(), log.num_items(), log.num_periods());
        let mut params = Self {
            dim: d,
            n_users,
            n_items,
            n_periods,
            user_vecs: vec![0.0; n_users * d],
            item_vecs: vec![0.0; n_items * d],
            age_vecs: vec![0.0; n_periods * d],
            user_bias: vec![0.0; n_users],
            item_bias: vec![0.0; n_items],
            age_bias: vec![0.0; n_periods],
            global_bias: 0.0,
        };
        let dist = Uniform::new_inclusive(-INIT_SCALE, INIT_SCALE);
        let fill = |vecs: &mut [f64], kind: u64, idx: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, kind << 32 | idx as u64));
            for v in vecs[idx * d..(idx + 1) * d].iter_mut() {
                *v = dist.sample(&mut rng);
            }
        };
        if spec.family.uses_user_vec() {
            for (u, &on) in active.users.iter().enumerate() {
                if on {
                    fill(&mut params.user_vecs, 1, u);
                }
            }
        }
        if spec.family.uses_item_vec() {
            for (i, &on) in active.items.iter().enumerate() {
                if on {
                    fill(&mut params.item_vecs, 2, i);
                }
            }
        }
        if spec.family.uses_age_vec() {
            for (t, &on) in active.periods.iter().enumerate() {
                if on {
                    fill(&mut params.age_vecs, 3, t);
                }
            }
        }
        params
    }

    #[inline]
    pub fn user_vec(&self, u: u32) -> &[f64] {
        &self.user_vecs[u as usize * self.dim..(u as usize + 1) * self.dim]
    }

    #[inline]
    pub fn item_vec(&self, i: u32) -> &[f64] {
        &self.item_vecs[i as usize * self.dim..(i as usize + 1) * self.dim]
    }

    #[inline]
    pub fn age_vec(&self, t: u8) -> &[f64] {
        &self.age_vecs[(t as usize - 1) * self.dim..t as usize * self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.user_vecs.iter().all(|v| v.is_finite())
            && self.item_vecs.iter().all(|v| v.is_finite())
            && self.age_vecs.iter().all(|v| v.is_finite())
            && self.user_bias.iter().all(|v| v.is_finite())
            && self.item_bias.iter().all(|v| v.is_finite())
            && self.age_bias.iter().all(|v| v.is_finite())
            && self.global_bias.is_finite()
    }

    /// Squared L2 norm of the regularized parameters: embeddings plus the
    /// user/item/age offsets. The global offset stays unregularized.
    pub fn regularized_norm_sq(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        sq(&self.user_vecs)
            + sq(&self.item_vecs)
            + sq(&self.age_vecs)
            + sq(&self.user_bias)
            + sq(&self.item_bias)
            + sq(&self.age_bias)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pre-link score of a factorized model at one cell.
#[inline]
pub fn score(spec: &ModelSpec, params: &ModelParams, u: u32, i: u32, t: u8) -> f64 {
    debug_assert!(spec.is_trainable(), "counting families use counting_predict");
    let base = match spec.family {
        Family::Constant => 0.0,
        Family::Mf | Family::Tmf => dot(params.user_vec(u), params.item_vec(i)),
        Family::Ttf => {
            let pu = params.user_vec(u);
            let qi = params.item_vec(i);
            let at = params.age_vec(t);
            pu.iter().zip(qi).zip(at).map(|((p, q), a)| p * q * a).sum()
        }
        Family::TtfPlusPlus | Family::Tmtf => {
            let pu = params.user_vec(u);
            let qi = params.item_vec(i);
            let at = params.age_vec(t);
            pu.iter().zip(qi).zip(at).map(|((p, q), a)| p * (q + a)).sum()
        }
        Family::ItemAge => dot(params.item_vec(i), params.age_vec(t)),
        _ => unreachable!("counting family"),
    };
    let mut s = base;
    if spec.family.uses_age_bias() {
        s += params.age_bias[t as usize - 1];
    }
    if spec.uses_offsets() {
        s += params.global_bias + params.user_bias[u as usize] + params.item_bias[i as usize];
    } else if spec.family == Family::Constant {
        s += params.global_bias;
    }
    s
}

/// Model prediction: score passed through the spec's link.
#[inline]
pub fn predict(spec: &ModelSpec, params: &ModelParams, u: u32, i: u32, t: u8) -> f64 {
    let s = score(spec, params, u, i, t);
    match spec.link {
        Link::Identity => s,
        Link::Sigmoid => sigmoid(s),
    }
}

/// Sufficient statistics of a training partition for the counting families.
/// Counts are over the partition's observed cells; denominators come from
/// the parent log's full entity sets.
#[derive(Debug, Clone)]
pub struct CountingStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_periods: usize,
    pub total_observed: u64,
    pub item_count: Vec<u64>,
    pub item_rating_sum: Vec<f64>,
    pub item_age_count: Vec<u64>,
    pub item_age_rating_sum: Vec<f64>,
    pub age_count: Vec<u64>,
    pub global_rating_sum: f64,
}

impl CountingStats {
    pub fn from_view(view: &LogView) -> Self {
        let log = view.log();
        let (n_users, n_items, n_periods) =
            (log.num_users(), log.num_items(), log.num_periods());
        let mut stats = Self {
            n_users,
            n_items,
            n_periods,
            total_observed: 0,
            item_count: vec![0; n_items],
            item_rating_sum: vec![0.0; n_items],
            item_age_count: vec![0; n_items * n_periods],
            item_age_rating_sum: vec![0.0; n_items * n_periods],
            age_count: vec![0; n_periods],
            global_rating_sum: 0.0,
        };
        for c in view.observed() {
            let i = c.item as usize;
            let slot = i * n_periods + c.period as usize - 1;
            stats.total_observed += 1;
            stats.item_count[i] += 1;
            stats.item_rating_sum[i] += c.rating;
            stats.item_age_count[slot] += 1;
            stats.item_age_rating_sum[slot] += c.rating;
            stats.age_count[c.period as usize - 1] += 1;
            stats.global_rating_sum += c.rating;
        }
        stats
    }

    pub fn full_cube(&self) -> u64 {
        self.n_users as u64 * self.n_items as u64 * self.n_periods as u64
    }

    pub fn global_mean_rating(&self) -> f64 {
        if self.total_observed == 0 {
            0.0
        } else {
            self.global_rating_sum / self.total_observed as f64
        }
    }

    fn item_mean(&self, i: usize) -> f64 {
        if self.item_count[i] == 0 {
            self.global_mean_rating()
        } else {
            self.item_rating_sum[i] / self.item_count[i] as f64
        }
    }
}

/// Prediction for the counting families.
///
/// Observation side: Constant is the overall rating fraction over the full
/// cube, Pop the per-item fraction, T-Pop the per-(item, age) fraction.
/// Rating side: Avg is the item's mean observed rating across ages, T-Avg
/// the item's mean at one age. Empty buckets fall back to their static
/// counterpart (T-Pop to Pop, T-Avg to Avg, then to the global mean).
pub fn counting_predict(family: Family, stats: &CountingStats, _u: u32, i: u32, t: u8) -> f64 {
    let i = i as usize;
    let slot = i * stats.n_periods + t as usize - 1;
    match family {
        Family::Constant => stats.total_observed as f64 / stats.full_cube() as f64,
        Family::Pop => {
            stats.item_count[i] as f64 / (stats.n_users as f64 * stats.n_periods as f64)
        }
        Family::TPop => {
            if stats.item_age_count[slot] == 0 {
                counting_predict(Family::Pop, stats, _u, i as u32, t)
            } else {
                stats.item_age_count[slot] as f64 / stats.n_users as f64
            }
        }
        Family::Avg => stats.item_mean(i),
        Family::TAvg => {
            if stats.item_age_count[slot] == 0 {
                stats.item_mean(i)
            } else {
                stats.item_age_rating_sum[slot] / stats.item_age_count[slot] as f64
            }
        }
        other => panic!("{} is not a counting family", other.as_str()),
    }
}

/// A rating predictor: either a counting baseline or a fitted factorization.
#[derive(Debug, Clone)]
pub enum RatingModel {
    Counting { family: Family, stats: Arc<CountingStats> },
    Factor { spec: ModelSpec, params: Arc<ModelParams> },
}

impl RatingModel {
    pub fn counting(family: Family, view: &LogView) -> Self {
        RatingModel::Counting { family, stats: Arc::new(CountingStats::from_view(view)) }
    }

    #[inline]
    pub fn predict(&self, u: u32, i: u32, t: u8) -> f64 {
        match self {
            RatingModel::Counting { family, stats } => counting_predict(*family, stats, u, i, t),
            RatingModel::Factor { spec, params } => predict(spec, params, u, i, t),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RatingModel::Counting { family, .. } => family.as_str(),
            RatingModel::Factor { spec, .. } => spec.family.as_str(),
        }
    }
}

/// Write a checkpoint as `entity_kind,entity_id,component_index,value` rows.
/// Entity ids are the log's raw ids; floats print in shortest round-trip
/// form, so save/load is lossless.
pub fn save_checkpoint<W: Write>(
    writer: W,
    spec: &ModelSpec,
    params: &ModelParams,
    log: &InteractionLog,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["entity_kind", "entity_id", "component_index", "value"])?;
    let mut row = |kind: &str, id: String, comp: usize, value: f64| -> Result<()> {
        w.write_record([kind, &id, &comp.to_string(), &value.to_string()])?;
        Ok(())
    };
    row("spec", "family".into(), 0, f64::from(spec.family.code()))?;
    row("spec", "link".into(), 0, if spec.link == Link::Sigmoid { 1.0 } else { 0.0 })?;
    row("spec", "dim".into(), 0, spec.dim as f64)?;
    let d = params.dim;
    for u in 0..params.n_users {
        let id = log.user_raw_id(u as u32).to_string();
        for k in 0..d {
            row("user_vec", id.clone(), k, params.user_vecs[u * d + k])?;
        }
        row("user_bias", id, 0, params.user_bias[u])?;
    }
    for i in 0..params.n_items {
        let id = log.item_raw_id(i as u32).to_string();
        for k in 0..d {
            row("item_vec", id.clone(), k, params.item_vecs[i * d + k])?;
        }
        row("item_bias", id, 0, params.item_bias[i])?;
    }
    for t in 0..params.n_periods {
        let id = (t + 1).to_string();
        for k in 0..d {
            row("age_vec", id.clone(), k, params.age_vecs[t * d + k])?;
        }
        row("age_bias", id, 0, params.age_bias[t])?;
    }
    row("global_bias", "0".into(), 0, params.global_bias)?;
    w.flush()?;
    Ok(())
}

/// Load a checkpoint against a log with the same entity space.
pub fn load_checkpoint<R: Read>(
    reader: R,
    log: &InteractionLog,
) -> Result<(ModelSpec, ModelParams)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut spec_fields: HashMap<String, f64> = HashMap::new();
    let mut rows: Vec<(String, String, usize, f64)> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let kind = record.get(0).unwrap_or_default().to_string();
        let id = record.get(1).unwrap_or_default().to_string();
        let comp: usize = record
            .get(2)
            .unwrap_or_default()
            .parse()
            .map_err(|e| Error::Data(format!("bad component index: {e}")))?;
        let value: f64 = record
            .get(3)
            .unwrap_or_default()
            .parse()
            .map_err(|e| Error::Data(format!("bad checkpoint value: {e}")))?;
        if kind == "spec" {
            spec_fields.insert(id, value);
        } else {
            rows.push((kind, id, comp, value));
        }
    }
    let family = Family::from_code(
        *spec_fields
            .get("family")
            .ok_or_else(|| Error::Data("checkpoint missing spec,family".into()))? as u8,
    )?;
    let link = if spec_fields.get("link").copied().unwrap_or(0.0) == 1.0 {
        Link::Sigmoid
    } else {
        Link::Identity
    };
    let dim = *spec_fields
        .get("dim")
        .ok_or_else(|| Error::Data("checkpoint missing spec,dim".into()))? as usize;
    let spec = ModelSpec { family, link, dim };

    let mut params = ModelParams {
        dim,
        n_users: log.num_users(),
        n_items: log.num_items(),
        n_periods: log.num_periods(),
        user_vecs: vec![0.0; log.num_users() * dim],
        item_vecs: vec![0.0; log.num_items() * dim],
        age_vecs: vec![0.0; log.num_periods() * dim],
        user_bias: vec![0.0; log.num_users()],
        item_bias: vec![0.0; log.num_items()],
        age_bias: vec![0.0; log.num_periods()],
        global_bias: 0.0,
    };
    for (kind, id, comp, value) in rows {
        let parse_id = |kind: &'static str| -> Result<u32> {
            id.parse::<u32>().map_err(|_| Error::UnknownEntity { kind, id: id.clone() })
        };
        match kind.as_str() {
            "user_vec" | "user_bias" => {
                let raw = parse_id("user")?;
                let u = log
                    .user_dense_id(raw)
                    .ok_or(Error::UnknownEntity { kind: "user", id: id.clone() })?
                    as usize;
                if kind == "user_vec" {
                    params.user_vecs[u * dim + comp] = value;
                } else {
                    params.user_bias[u] = value;
                }
            }
            "item_vec" | "item_bias" => {
                let raw = parse_id("item")?;
                let i = log
                    .item_dense_id(raw)
                    .ok_or(Error::UnknownEntity { kind: "item", id: id.clone() })?
                    as usize;
                if kind == "item_vec" {
                    params.item_vecs[i * dim + comp] = value;
                } else {
                    params.item_bias[i] = value;
                }
            }
            "age_vec" | "age_bias" => {
                let t: usize = parse_id("period")? as usize;
                if t == 0 || t > log.num_periods() {
                    return Err(Error::UnknownEntity { kind: "period", id });
                }
                if kind == "age_vec" {
                    params.age_vecs[(t - 1) * dim + comp] = value;
                } else {
                    params.age_bias[t - 1] = value;
                }
            }
            "global_bias" => params.global_bias = value,
            other => return Err(Error::Data(format!("unknown checkpoint row kind '{other}'"))),
        }
    }
    Ok((spec, params))
}
