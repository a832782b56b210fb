//! Rating-log ingestion, item-age binning, user presence, and per-user
//! train/validation/test splits.
//!
//! A cell is a (user, item, period) triple, where the period is the item-age
//! bin at the moment of interaction. All losses in this crate range over the
//! presence-restricted cell cube: cells whose age-bin time interval overlaps
//! the window between the user's first and last logged rating.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numeric::mix_seed;
use crate::{Error, Result};

/// Calendar year of 365.25 days, in seconds.
pub const SECONDS_PER_YEAR: i64 = 31_557_600;

/// Users with fewer ratings than this keep everything in the train
/// partition; a 7:1:2 split is undefined below five ratings.
pub const MIN_SPLIT_RATINGS: usize = 5;

/// One logged (user, item, rating, timestamp) interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingEvent {
    pub user_id: u32,
    pub item_id: u32,
    pub rating: f64,
    pub timestamp: i64,
}

impl RatingEvent {
    pub fn new(user_id: u32, item_id: u32, rating: f64, timestamp: i64) -> Result<Self> {
        if !on_half_grid(rating) {
            return Err(Error::InvalidInput(format!(
                "rating {rating} is not a multiple of 0.5 in [0.5, 5.0]"
            )));
        }
        if timestamp < 0 {
            return Err(Error::InvalidInput(format!(
                "timestamp {timestamp} is negative"
            )));
        }
        Ok(Self { user_id, item_id, rating, timestamp })
    }
}

fn on_half_grid(rating: f64) -> bool {
    if !(0.5..=5.0).contains(&rating) {
        return false;
    }
    let doubled = rating * 2.0;
    (doubled - doubled.round()).abs() < 1e-9
}

/// Mapping from item-age to a discrete period (1-indexed).
///
/// The standard binning uses lower edges `[0, 1, 3, 5, 8, 11, 15]` years with
/// the last bin unbounded above, so an age of 2.5 years falls in period 2 and
/// anything from 15 years up falls in period 7.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeBinning {
    edges_years: Vec<f64>,
    edges_secs: Vec<i64>,
}

impl AgeBinning {
    pub fn new(edges_years: Vec<f64>) -> Result<Self> {
        if edges_years.is_empty() || edges_years.len() > 16 {
            return Err(Error::InvalidInput(format!(
                "need between 1 and 16 bin edges, got {}",
                edges_years.len()
            )));
        }
        if edges_years[0] != 0.0 {
            return Err(Error::InvalidInput("first bin edge must be 0".into()));
        }
        if edges_years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("bin edges must be strictly increasing".into()));
        }
        let edges_secs = edges_years
            .iter()
            .map(|&e| (e * SECONDS_PER_YEAR as f64).round() as i64)
            .collect();
        Ok(Self { edges_years, edges_secs })
    }

    /// The seven-bin item-age discretization used throughout.
    pub fn standard() -> Self {
        Self::new(vec![0.0, 1.0, 3.0, 5.0, 8.0, 11.0, 15.0]).expect("static edges are valid")
    }

    pub fn num_periods(&self) -> usize {
        self.edges_years.len()
    }

    pub fn edges_years(&self) -> &[f64] {
        &self.edges_years
    }

    /// Largest period whose lower edge does not exceed `age_years`.
    pub fn bin_age_years(&self, age_years: f64) -> Result<u8> {
        if !age_years.is_finite() || age_years < 0.0 {
            return Err(Error::InvalidInput(format!("item age {age_years} is negative")));
        }
        let k = self.edges_years.partition_point(|&e| e <= age_years);
        Ok(k as u8)
    }

    /// Same as [`bin_age_years`](Self::bin_age_years) on integer seconds;
    /// exact at the bin edges.
    pub fn bin_age_secs(&self, age_secs: i64) -> u8 {
        debug_assert!(age_secs >= 0);
        self.edges_secs.partition_point(|&e| e <= age_secs) as u8
    }

    /// Half-open age interval `[start, end)` of a period, in seconds since
    /// item publication. The last period has no upper bound.
    pub fn interval_secs(&self, period: u8) -> (i64, Option<i64>) {
        let idx = period as usize - 1;
        let start = self.edges_secs[idx];
        let end = self.edges_secs.get(idx + 1).copied();
        (start, end)
    }
}

/// First and last logged rating of a user; cells outside this window are
/// excluded from every loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserPresence {
    pub first: i64,
    pub last: i64,
}

/// One observed cell: a rating attached to its (user, item, period) triple.
/// Indices are dense; raw ids live in the parent log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedCell {
    pub user: u32,
    pub item: u32,
    pub period: u8,
    pub rating: f64,
    pub timestamp: i64,
}

impl ObservedCell {
    #[inline]
    fn key(&self) -> (u32, u32, u8) {
        (self.user, self.item, self.period)
    }
}

/// Indexed view of a rating log: dense user/item ids, per-item publication
/// times, per-user presence windows, observed cells, and the bitmask of
/// presence-restricted periods per (user, item) pair.
#[derive(Debug)]
pub struct InteractionLog {
    user_ids: Vec<u32>,
    item_ids: Vec<u32>,
    user_index: HashMap<u32, u32>,
    item_index: HashMap<u32, u32>,
    publication: Vec<i64>,
    presence: Vec<UserPresence>,
    binning: AgeBinning,
    cells: Vec<ObservedCell>,
    presence_bins: Vec<u16>,
    presence_cell_count: u64,
}

impl InteractionLog {
    /// Index a list of rating events. Item publication time is the earliest
    /// rating the item ever received; duplicate ratings within one
    /// (user, item, period) cell keep the latest event.
    pub fn from_events(events: &[RatingEvent], binning: AgeBinning) -> Result<Arc<Self>> {
        if events.is_empty() {
            return Err(Error::EmptyLog);
        }
        let mut user_ids: Vec<u32> = events.iter().map(|e| e.user_id).collect();
        user_ids.sort_unstable();
        user_ids.dedup();
        let mut item_ids: Vec<u32> = events.iter().map(|e| e.item_id).collect();
        item_ids.sort_unstable();
        item_ids.dedup();

        let user_index: HashMap<u32, u32> =
            user_ids.iter().enumerate().map(|(k, &id)| (id, k as u32)).collect();
        let item_index: HashMap<u32, u32> =
            item_ids.iter().enumerate().map(|(k, &id)| (id, k as u32)).collect();

        let mut publication = vec![i64::MAX; item_ids.len()];
        let mut presence = vec![UserPresence { first: i64::MAX, last: i64::MIN }; user_ids.len()];
        for e in events {
            let u = user_index[&e.user_id] as usize;
            let i = item_index[&e.item_id] as usize;
            publication[i] = publication[i].min(e.timestamp);
            presence[u].first = presence[u].first.min(e.timestamp);
            presence[u].last = presence[u].last.max(e.timestamp);
        }

        // Bin each event; resolve duplicates per cell by latest timestamp,
        // then latest input position.
        let mut binned: Vec<(ObservedCell, usize)> = events
            .iter()
            .enumerate()
            .map(|(pos, e)| {
                let u = user_index[&e.user_id];
                let i = item_index[&e.item_id];
                let age = e.timestamp - publication[i as usize];
                let period = binning.bin_age_secs(age);
                (
                    ObservedCell {
                        user: u,
                        item: i,
                        period,
                        rating: e.rating,
                        timestamp: e.timestamp,
                    },
                    pos,
                )
            })
            .collect();
        binned.sort_unstable_by_key(|(c, pos)| (c.user, c.item, c.period, c.timestamp, *pos));
        let mut cells: Vec<ObservedCell> = Vec::with_capacity(binned.len());
        for (cell, _) in binned {
            match cells.last_mut() {
                Some(last) if last.key() == cell.key() => *last = cell,
                _ => cells.push(cell),
            }
        }

        let mut log = Self {
            user_ids,
            item_ids,
            user_index,
            item_index,
            publication,
            presence,
            binning,
            cells,
            presence_bins: Vec::new(),
            presence_cell_count: 0,
        };
        log.build_presence_bins();
        Ok(Arc::new(log))
    }

    fn build_presence_bins(&mut self) {
        let n_users = self.user_ids.len();
        let n_items = self.item_ids.len();
        let periods = self.binning.num_periods() as u8;
        let mut bins = vec![0u16; n_users * n_items];
        let mut count = 0u64;
        for u in 0..n_users {
            let UserPresence { first, last } = self.presence[u];
            let row = u * n_items;
            for (i, &pub_time) in self.publication.iter().enumerate() {
                if pub_time > last {
                    continue;
                }
                let mut mask = 0u16;
                for t in 1..=periods {
                    let (start, end) = self.binning.interval_secs(t);
                    let start_abs = pub_time.saturating_add(start);
                    if start_abs > last {
                        break;
                    }
                    let ends_before_user = match end {
                        Some(e) => pub_time.saturating_add(e) <= first,
                        None => false,
                    };
                    if !ends_before_user {
                        mask |= 1 << (t - 1);
                    }
                }
                if mask != 0 {
                    bins[row + i] = mask;
                    count += u64::from(mask.count_ones());
                }
            }
        }
        self.presence_bins = bins;
        self.presence_cell_count = count;
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_periods(&self) -> usize {
        self.binning.num_periods()
    }

    /// |U| * |I| * |T|, before presence restriction.
    pub fn full_cube_size(&self) -> u64 {
        self.user_ids.len() as u64 * self.item_ids.len() as u64 * self.num_periods() as u64
    }

    pub fn presence_cell_count(&self) -> u64 {
        self.presence_cell_count
    }

    pub fn binning(&self) -> &AgeBinning {
        &self.binning
    }

    pub fn user_raw_id(&self, user: u32) -> u32 {
        self.user_ids[user as usize]
    }

    pub fn item_raw_id(&self, item: u32) -> u32 {
        self.item_ids[item as usize]
    }

    pub fn user_dense_id(&self, raw: u32) -> Option<u32> {
        self.user_index.get(&raw).copied()
    }

    pub fn item_dense_id(&self, raw: u32) -> Option<u32> {
        self.item_index.get(&raw).copied()
    }

    pub fn publication_time(&self, item: u32) -> i64 {
        self.publication[item as usize]
    }

    pub fn presence(&self, user: u32) -> UserPresence {
        self.presence[user as usize]
    }

    /// Bitmask of presence-restricted periods for a (user, item) pair;
    /// bit `t-1` set means period `t` is inside the user's presence.
    #[inline]
    pub fn presence_mask(&self, user: u32, item: u32) -> u16 {
        self.presence_bins[user as usize * self.item_ids.len() + item as usize]
    }

    #[inline]
    pub fn in_presence(&self, user: u32, item: u32, period: u8) -> bool {
        self.presence_mask(user, item) & (1 << (period - 1)) != 0
    }

    /// Item-age period of item `item` at absolute time `at`, if the item
    /// already exists then.
    pub fn period_at(&self, item: u32, at: i64) -> Option<u8> {
        let age = at - self.publication[item as usize];
        if age < 0 {
            None
        } else {
            Some(self.binning.bin_age_secs(age))
        }
    }

    /// All observed cells, sorted by (user, item, period).
    pub fn observed_cells(&self) -> &[ObservedCell] {
        &self.cells
    }

    /// View over every observed cell of the log.
    pub fn full_view(self: &Arc<Self>) -> LogView {
        LogView::new(Arc::clone(self), "full", self.cells.clone())
    }
}

/// Which partition a view represents; carried for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Valid,
    Test,
    Full,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Valid => "valid",
            Partition::Test => "test",
            Partition::Full => "full",
        }
    }
}

/// An immutable set of observed cells over a shared log. Partitions of the
/// same log share the presence cube; only the observed set differs.
#[derive(Debug, Clone)]
pub struct LogView {
    log: Arc<InteractionLog>,
    name: &'static str,
    cells: Arc<[ObservedCell]>,
}

impl LogView {
    pub fn new(log: Arc<InteractionLog>, name: &'static str, mut cells: Vec<ObservedCell>) -> Self {
        cells.sort_unstable_by_key(|c| c.key());
        Self { log, name, cells: cells.into() }
    }

    pub fn log(&self) -> &Arc<InteractionLog> {
        &self.log
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn observed(&self) -> &[ObservedCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Rating at a cell if this view observes it.
    pub fn rating(&self, user: u32, item: u32, period: u8) -> Option<f64> {
        self.cells
            .binary_search_by_key(&(user, item, period), |c| c.key())
            .ok()
            .map(|k| self.cells[k].rating)
    }

    /// Iterate every presence-restricted cell of the log, flagging the ones
    /// this view observes. Cells arrive sorted by (user, item, period).
    pub fn cells(&self) -> CellIter<'_> {
        CellIter::new(self, 0, self.log.num_users() as u32)
    }

    /// Same as [`cells`](Self::cells) restricted to one user.
    pub fn cells_of_user(&self, user: u32) -> CellIter<'_> {
        CellIter::new(self, user, user + 1)
    }
}

/// One presence-restricted cell paired with its observation indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub user: u32,
    pub item: u32,
    pub period: u8,
    pub observed: bool,
    pub rating: Option<f64>,
}

/// Cursor-based enumeration of the presence cube against a sorted cell list.
pub struct CellIter<'a> {
    view: &'a LogView,
    user: u32,
    user_end: u32,
    item: u32,
    mask: u16,
    cursor: usize,
}

impl<'a> CellIter<'a> {
    fn new(view: &'a LogView, user_start: u32, user_end: u32) -> Self {
        let cursor = view
            .cells
            .partition_point(|c| c.user < user_start);
        let mut it = Self { view, user: user_start, user_end, item: 0, mask: 0, cursor };
        if user_start < user_end {
            it.mask = it.view.log.presence_mask(user_start, 0);
        }
        it
    }
}

impl<'a> Iterator for CellIter<'a> {
    type Item = Cell;

    #[inline]
    fn next(&mut self) -> Option<Cell> {
        let log = &self.view.log;
        let n_items = log.num_items() as u32;
        loop {
            if self.user >= self.user_end {
                return None;
            }
            if self.mask == 0 {
                self.item += 1;
                if self.item >= n_items {
                    self.item = 0;
                    self.user += 1;
                    if self.user >= self.user_end {
                        return None;
                    }
                }
                self.mask = log.presence_mask(self.user, self.item);
                continue;
            }
            let bit = self.mask.trailing_zeros() as u8;
            self.mask &= self.mask - 1;
            let period = bit + 1;
            let key = (self.user, self.item, period);
            let cells = &self.view.cells;
            while self.cursor < cells.len() && cells[self.cursor].key() < key {
                self.cursor += 1;
            }
            let (observed, rating) = if self.cursor < cells.len() && cells[self.cursor].key() == key
            {
                (true, Some(cells[self.cursor].rating))
            } else {
                (false, None)
            };
            return Some(Cell { user: self.user, item: self.item, period, observed, rating });
        }
    }
}

/// How to partition a log into train/validation/test views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitStrategy {
    Random,
    TimeBased,
}

impl SplitStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitStrategy::Random => "random",
            SplitStrategy::TimeBased => "time-based",
        }
    }
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitStrategy::Random),
            "time-based" | "time" => Ok(SplitStrategy::TimeBased),
            other => Err(Error::Config(format!("unknown split strategy '{other}'"))),
        }
    }
}

impl SplitSpec {
    pub fn new(strategy: SplitStrategy, seed: u64) -> Self {
        Self { strategy, ratios: (0.7, 0.1, 0.2), seed }
    }

    fn validate(&self) -> Result<()> {
        let (a, b, c) = self.ratios;
        if a < 0.0 || b < 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be nonnegative with a positive test share and sum to 1",
                self.ratios
            )));
        }
        Ok(())
    }
}

/// The three disjoint partitions produced by [`split`].
#[derive(Debug, Clone)]
pub struct SplitViews {
    pub train: LogView,
    pub valid: LogView,
    pub test: LogView,
}

/// Partition the observed cells per user.
///
/// Random strategy: uniform per-user sampling. Time-based: the user's
/// chronologically last `test` share goes to test; train/validation are
/// sampled uniformly from the remainder. Users with fewer than
/// [`MIN_SPLIT_RATINGS`] cells keep everything in train. Test counts round
/// up (`ceil`), validation down (`floor`), so every split user has a
/// nonempty test partition.
pub fn split(log: &Arc<InteractionLog>, spec: &SplitSpec) -> Result<SplitViews> {
    spec.validate()?;
    let cells = log.observed_cells();
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();

    let mut start = 0;
    while start < cells.len() {
        let user = cells[start].user;
        let mut end = start;
        while end < cells.len() && cells[end].user == user {
            end += 1;
        }
        let user_cells = &cells[start..end];
        start = end;

        let n = user_cells.len();
        if n < MIN_SPLIT_RATINGS {
            train.extend_from_slice(user_cells);
            continue;
        }
        let n_test = ((spec.ratios.2 * n as f64).ceil() as usize).min(n);
        let n_valid = (spec.ratios.1 * n as f64).floor() as usize;

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            spec.seed,
            u64::from(log.user_raw_id(user)),
        ));
        let mut order: Vec<&ObservedCell> = user_cells.iter().collect();
        match spec.strategy {
            SplitStrategy::Random => {
                order.shuffle(&mut rng);
            }
            SplitStrategy::TimeBased => {
                order.sort_by_key(|c| (c.timestamp, c.item, c.period));
                // Latest n_test stay at the tail; shuffle only the remainder
                // so validation is a uniform sample of it. The tail then
                // rotates to the front because assignment takes test first.
                let head = n - n_test;
                order[..head].shuffle(&mut rng);
                order.rotate_right(n_test);
            }
        }
        for (k, cell) in order.into_iter().enumerate() {
            if k < n_test {
                test.push(*cell);
            } else if k < n_test + n_valid {
                valid.push(*cell);
            } else {
                train.push(*cell);
            }
        }
    }

    Ok(SplitViews {
        train: LogView::new(Arc::clone(log), "train", train),
        valid: LogView::new(Arc::clone(log), "valid", valid),
        test: LogView::new(Arc::clone(log), "test", test),
    })
}

/// Read a MovieLens-style `ratings.csv` (`userId,movieId,rating,timestamp`).
pub fn read_ratings_csv<R: Read>(reader: R) -> Result<Vec<RatingEvent>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = rdr.headers()?;
        let expect = ["userId", "movieId", "rating", "timestamp"];
        for (k, name) in expect.iter().enumerate() {
            if headers.get(k).map(str::trim) != Some(*name) {
                return Err(Error::Data(format!(
                    "unexpected ratings header {:?}; want userId,movieId,rating,timestamp",
                    headers
                )));
            }
        }
    }
    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let parse = |idx: usize, what: &str| -> Result<&str> {
            record
                .get(idx)
                .ok_or_else(|| Error::Data(format!("missing {what} column in {record:?}")))
        };
        let user: u32 = parse(0, "userId")?
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("bad userId: {e}")))?;
        let item: u32 = parse(1, "movieId")?
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("bad movieId: {e}")))?;
        let rating: f64 = parse(2, "rating")?
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("bad rating: {e}")))?;
        let ts: i64 = parse(3, "timestamp")?
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("bad timestamp: {e}")))?;
        events.push(RatingEvent::new(user, item, rating, ts)?);
    }
    if events.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(events)
}

pub fn read_ratings_csv_path(path: &Path) -> Result<Vec<RatingEvent>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_ratings_csv(std::io::BufReader::new(file))
}

/// Write the split manifest: `userId,movieId,period,partition`.
pub fn write_split_manifest<W: Write>(writer: W, views: &SplitViews) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["userId", "movieId", "period", "partition"])?;
    for (view, name) in [(&views.train, "train"), (&views.valid, "valid"), (&views.test, "test")] {
        let log = view.log();
        for cell in view.observed() {
            w.write_record([
                log.user_raw_id(cell.user).to_string(),
                log.item_raw_id(cell.item).to_string(),
                cell.period.to_string(),
                name.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
