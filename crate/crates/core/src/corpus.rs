//! Behavior-log ingestion, preprocessing, train/test splitting and synthetic
//! corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::Versioned;
use crate::error::{Error, Result};

pub type UserId = u64;
pub type ItemId = u64;
pub type CategoryId = u64;

/// Users with fewer records than this are dropped.
pub const MIN_BEHAVIORS: usize = 10;
/// Sequences are truncated to this many most recent events.
pub const MAX_SEQUENCE_LEN: usize = 69;
/// Number of time windows the user feature is divided into.
pub const NUM_WINDOWS: usize = 10;

/// One line of a raw behavior log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub category_id: CategoryId,
    /// Kept for fidelity with the log format; every type is treated the same.
    pub behavior_type: u64,
    /// Seconds since the epoch.
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: ItemId,
    pub timestamp: u64,
}

/// A user's time-ordered behaviors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user_id: UserId,
    pub events: Vec<Event>,
}

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.events.iter().map(|e| e.item_id)
    }

    /// Events strictly earlier than `timestamp`, most recent `max_len` kept.
    pub fn history_before(&self, timestamp: u64, max_len: usize) -> BehaviorSequence {
        let end = self.events.partition_point(|e| e.timestamp < timestamp);
        let start = end.saturating_sub(max_len);
        BehaviorSequence {
            user_id: self.user_id,
            events: self.events[start..end].to_vec(),
        }
    }
}

/// User behaviors grouped into consecutive time windows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowedFeatures {
    pub windows: Vec<Vec<ItemId>>,
}

impl WindowedFeatures {
    pub fn is_empty(&self) -> bool {
        self.windows.iter().all(Vec::is_empty)
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.windows.iter().flatten().copied()
    }
}

/// A held-out user: known behaviors and the items to be recalled.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestUser {
    pub features: BehaviorSequence,
    pub ground_truth: BTreeSet<ItemId>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub num_records: usize,
}

impl CorpusCounts {
    pub fn from_records(records: &[BehaviorRecord]) -> Self {
        let users: BTreeSet<_> = records.iter().map(|r| r.user_id).collect();
        let items: BTreeSet<_> = records.iter().map(|r| r.item_id).collect();
        let cats: BTreeSet<_> = records.iter().map(|r| r.category_id).collect();
        CorpusCounts {
            num_users: users.len(),
            num_items: items.len(),
            num_categories: cats.len(),
            num_records: records.len(),
        }
    }
}

/// Preprocessed corpus with a train/test user split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub train_users: Vec<BehaviorSequence>,
    pub test_users: Vec<TestUser>,
    pub item_catalog: BTreeMap<ItemId, CategoryId>,
    pub counts: CorpusCounts,
}

impl Versioned for Dataset {
    const KIND: &'static str = "dataset";
    const VERSION: u32 = 1;
    fn version(&self) -> u32 {
        self.version
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub min_behaviors: usize,
    pub max_len: usize,
    pub num_test_users: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            min_behaviors: MIN_BEHAVIORS,
            max_len: MAX_SEQUENCE_LEN,
            num_test_users: 5_000,
            seed: 0,
        }
    }
}

impl Dataset {
    /// Preprocesses `records` and samples `num_test_users` disjoint test users
    /// uniformly without replacement.
    pub fn build(records: &[BehaviorRecord], cfg: &DatasetConfig) -> Result<Dataset> {
        if cfg.max_len < cfg.min_behaviors.max(1) {
            return Err(Error::Config(format!(
                "max_len {} is below min_behaviors {}",
                cfg.max_len, cfg.min_behaviors
            )));
        }
        let item_catalog: BTreeMap<ItemId, CategoryId> = records
            .iter()
            .map(|r| (r.item_id, r.category_id))
            .collect();
        let sequences = preprocess(records, cfg.min_behaviors, cfg.max_len);
        let counts = CorpusCounts {
            num_users: sequences.len(),
            num_items: item_catalog.len(),
            num_categories: item_catalog.values().collect::<BTreeSet<_>>().len(),
            num_records: sequences.values().map(BehaviorSequence::len).sum(),
        };
        let users: Vec<BehaviorSequence> = sequences.into_values().collect();
        let num_test = cfg.num_test_users.min(users.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let test_idx: BTreeSet<usize> = index::sample(&mut rng, users.len(), num_test)
            .into_iter()
            .collect();

        let mut train_users = Vec::with_capacity(users.len() - num_test);
        let mut test_users = Vec::with_capacity(num_test);
        for (i, seq) in users.into_iter().enumerate() {
            if test_idx.contains(&i) {
                let (features, ground_truth) = split_test_user(&seq)?;
                test_users.push(TestUser {
                    features,
                    ground_truth,
                });
            } else {
                train_users.push(seq);
            }
        }
        Ok(Dataset {
            version: Self::VERSION,
            train_users,
            test_users,
            item_catalog,
            counts,
        })
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.item_catalog.keys().copied().collect()
    }

    pub fn items_with_categories(&self) -> Vec<(ItemId, CategoryId)> {
        self.item_catalog.iter().map(|(&i, &c)| (i, c)).collect()
    }
}

/// Reads a `user_id,item_id,category_id,behavior_type,timestamp` log.
pub fn load_behavior_log(path: &Path, has_header: bool) -> Result<Vec<BehaviorRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_behavior_log(BufReader::new(file), has_header).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_behavior_log<R: BufRead>(reader: R, has_header: bool) -> Result<Vec<BehaviorRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<behavior log>", e))?;
        if has_header && line_no == 1 {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(line, line_no)?);
    }
    Ok(records)
}

fn parse_record(line: &str, line_no: usize) -> Result<BehaviorRecord> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 5 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 5 fields, found {}", fields.len()),
        });
    }
    const NAMES: [&str; 5] = [
        "user_id",
        "item_id",
        "category_id",
        "behavior_type",
        "timestamp",
    ];
    let mut values = [0u64; 5];
    for (k, field) in fields.iter().enumerate() {
        values[k] = field.parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("field {} is not a non-negative integer: {field:?}", NAMES[k]),
        })?;
    }
    Ok(BehaviorRecord {
        user_id: values[0],
        item_id: values[1],
        category_id: values[2],
        behavior_type: values[3],
        timestamp: values[4],
    })
}

/// Groups records per user, drops users with fewer than `min_behaviors`
/// records, sorts by time (stable on ties) and keeps the `max_len` most recent
/// events.
pub fn preprocess(
    records: &[BehaviorRecord],
    min_behaviors: usize,
    max_len: usize,
) -> BTreeMap<UserId, BehaviorSequence> {
    let mut grouped: BTreeMap<UserId, Vec<Event>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.user_id).or_default().push(Event {
            item_id: r.item_id,
            timestamp: r.timestamp,
        });
    }
    grouped
        .into_iter()
        .filter(|(_, events)| events.len() >= min_behaviors)
        .map(|(user_id, mut events)| {
            events.sort_by_key(|e| e.timestamp);
            if events.len() > max_len {
                events.drain(..events.len() - max_len);
            }
            (user_id, BehaviorSequence { user_id, events })
        })
        .collect()
}

/// First ⌈m/2⌉ events become features; the items of the rest are the truth.
pub fn split_test_user(seq: &BehaviorSequence) -> Result<(BehaviorSequence, BTreeSet<ItemId>)> {
    let m = seq.len();
    if m < 2 {
        return Err(Error::Unsplittable(m));
    }
    let cut = m.div_ceil(2);
    let features = BehaviorSequence {
        user_id: seq.user_id,
        events: seq.events[..cut].to_vec(),
    };
    let truth = seq.events[cut..].iter().map(|e| e.item_id).collect();
    Ok((features, truth))
}

/// Splits the sequence into `n` contiguous windows by event order. Window
/// sizes differ by at most one; smaller windows come first.
pub fn time_windows(seq: &BehaviorSequence, n: usize) -> WindowedFeatures {
    let items: Vec<ItemId> = seq.items().collect();
    window_items(&items, n)
}

pub(crate) fn window_items(items: &[ItemId], n: usize) -> WindowedFeatures {
    assert!(n >= 1, "at least one window is required");
    let base = items.len() / n;
    let extra = items.len() % n;
    let mut windows = Vec::with_capacity(n);
    let mut pos = 0;
    for w in 0..n {
        let size = base + usize::from(w >= n - extra);
        windows.push(items[pos..pos + size].to_vec());
        pos += size;
    }
    WindowedFeatures { windows }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_items: usize,
    pub num_users: usize,
    pub num_clusters: usize,
    pub events_per_user: usize,
    /// Probability that an event is drawn from the user's home cluster.
    pub home_affinity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_items: 1024,
            num_users: 500,
            num_clusters: 32,
            events_per_user: 20,
            home_affinity: 0.8,
            seed: 0,
        }
    }
}

const SYNTHETIC_EPOCH: u64 = 1_500_000_000;
const SYNTHETIC_SPACING: u64 = 60;

/// Clustered synthetic behavior log. Items are shuffled into `num_clusters`
/// equal-size clusters (the cluster is the category). Each user has a home
/// cluster and draws each event from it with probability `home_affinity`,
/// otherwise uniformly from the whole corpus. Events are 60 s apart.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<BehaviorRecord>> {
    if cfg.num_items == 0 || cfg.num_clusters == 0 || cfg.num_clusters > cfg.num_items {
        return Err(Error::Config(format!(
            "need 1 <= num_clusters <= num_items, got {} clusters for {} items",
            cfg.num_clusters, cfg.num_items
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let order = index::sample(&mut rng, cfg.num_items, cfg.num_items).into_vec();
    let mut category = vec![0u64; cfg.num_items];
    let mut members: Vec<Vec<ItemId>> = vec![Vec::new(); cfg.num_clusters];
    for (rank, &item) in order.iter().enumerate() {
        let c = rank * cfg.num_clusters / cfg.num_items;
        category[item] = c as u64;
        members[c].push(item as u64);
    }
    for m in &mut members {
        m.sort_unstable();
    }

    let mut records = Vec::with_capacity(cfg.num_users * cfg.events_per_user);
    for user in 0..cfg.num_users as u64 {
        let home = rng.random_range(0..cfg.num_clusters);
        let start = SYNTHETIC_EPOCH + user * 86_400;
        for j in 0..cfg.events_per_user as u64 {
            let item = if rng.random_bool(cfg.home_affinity) {
                members[home][rng.random_range(0..members[home].len())]
            } else {
                rng.random_range(0..cfg.num_items as u64)
            };
            records.push(BehaviorRecord {
                user_id: user,
                item_id: item,
                category_id: category[item as usize],
                behavior_type: 0,
                timestamp: start + j * SYNTHETIC_SPACING,
            });
        }
    }
    Ok(records)
}
