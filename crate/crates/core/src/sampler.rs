//! Level-wise positive and negative samples.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{time_windows, BehaviorSequence, Dataset, MAX_SEQUENCE_LEN, NUM_WINDOWS};
use crate::error::{Error, Result};
use crate::features::{ItemTracer, UserFeatures};
use crate::nn::SampleSpec;
use crate::tree::{NodeId, Tree};

const AMAZON: [usize; 22] = [
    0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 17, 19, 22, 30, 55, 100,
];
const USER_BEHAVIOR: [usize; 23] = [
    0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 17, 19, 22, 25, 30, 76, 200,
];

/// Negatives per positive for each level, and the first sampled level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioTable {
    pub x: Vec<usize>,
    pub start_level: usize,
}

impl RatioTable {
    pub fn new(x: Vec<usize>, start_level: usize) -> Result<Self> {
        if start_level >= x.len() {
            return Err(Error::Config(format!(
                "start level {start_level} is past the last table entry ({})",
                x.len() - 1
            )));
        }
        Ok(RatioTable { x, start_level })
    }

    pub fn amazon() -> Self {
        RatioTable {
            x: AMAZON.to_vec(),
            start_level: 7,
        }
    }

    pub fn userbehavior() -> Self {
        RatioTable {
            x: USER_BEHAVIOR.to_vec(),
            start_level: 7,
        }
    }

    pub fn builtin() -> BTreeMap<&'static str, RatioTable> {
        BTreeMap::from([("amazon", Self::amazon()), ("userbehavior", Self::userbehavior())])
    }

    pub fn max_level(&self) -> usize {
        self.x.len() - 1
    }

    /// The first `max_level + 1` entries, for a shallower tree.
    pub fn truncated(&self, max_level: usize) -> Result<Self> {
        if max_level > self.max_level() {
            return Err(Error::Level {
                requested: max_level,
                limit: self.max_level(),
            });
        }
        RatioTable::new(self.x[..=max_level].to_vec(), self.start_level.min(max_level))
    }

    /// Fails unless the table has exactly one entry per level of `tree`.
    pub fn check_tree(&self, tree: &Tree) -> Result<()> {
        if self.max_level() != tree.max_level() {
            return Err(Error::Config(format!(
                "ratio table covers levels 0..={}, tree has 0..={}",
                self.max_level(),
                tree.max_level()
            )));
        }
        Ok(())
    }

    /// Samples generated per (user, target) pair: `Σ (1 + x[l])` over the
    /// sampled levels, before any exhaustion of small levels.
    pub fn expansion(&self) -> usize {
        self.x[self.start_level..].iter().map(|x| 1 + x).sum()
    }
}

/// Positive samples along `path` (one node per level, root first) from
/// `start_level` down to the leaf. Each keeps the path as its context.
pub fn positives(path: &[NodeId], start_level: usize) -> Vec<SampleSpec> {
    (start_level..path.len())
        .map(|l| SampleSpec {
            node: path[l],
            parent: l.checked_sub(1).map(|p| path[p]),
            grandparent: l.checked_sub(2).map(|g| path[g]),
            label: true,
        })
        .collect()
}

/// Up to `x` distinct nodes of `level` other than `positive`, uniformly
/// without replacement.
pub fn negatives(tree: &Tree, level: usize, positive: NodeId, x: usize, rng: &mut impl Rng) -> Vec<NodeId> {
    let width = tree.level_width(level);
    if width <= 1 || x == 0 {
        return Vec::new();
    }
    let skip = positive.position();
    let count = x.min(width - 1);
    index::sample(rng, width - 1, count)
        .into_iter()
        .map(|i| NodeId::from_level_position(level, if i >= skip { i + 1 } else { i }))
        .collect()
}

/// A training example: a user and the position of the target event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrainPair {
    pub user: usize,
    pub target: usize,
}

/// Every (user, target) pair with at least one earlier event. With
/// `max_targets` set, only each user's latest targets are kept.
pub fn training_pairs(dataset: &Dataset, max_targets: Option<usize>) -> Vec<TrainPair> {
    let mut pairs = Vec::new();
    for (u, seq) in dataset.train_users.iter().enumerate() {
        let first = seq.events.first().map(|e| e.timestamp);
        let mut targets: Vec<usize> = (1..seq.len())
            .filter(|&j| Some(seq.events[j].timestamp) != first)
            .collect();
        if let Some(k) = max_targets {
            targets.drain(..targets.len().saturating_sub(k));
        }
        pairs.extend(targets.into_iter().map(|target| TrainPair { user: u, target }));
    }
    pairs
}

/// Features of `seq` strictly before event `target`, or `None` when there
/// are none.
pub fn pair_features(seq: &BehaviorSequence, target: usize, tracer: &(impl ItemTracer + ?Sized)) -> Result<Option<UserFeatures>> {
    let history = seq.history_before(seq.events[target].timestamp, MAX_SEQUENCE_LEN);
    if history.is_empty() {
        return Ok(None);
    }
    UserFeatures::trace(&time_windows(&history, NUM_WINDOWS), tracer).map(Some)
}

/// Positives along `path` and their sampled negatives, level by level.
/// Negatives take their binary parents as context.
pub fn expand(tree: &Tree, path: &[NodeId], table: &RatioTable, rng: &mut impl Rng) -> Vec<SampleSpec> {
    let mut out = Vec::with_capacity(table.expansion());
    for pos in positives(path, table.start_level) {
        let level = pos.node.level();
        out.push(pos);
        let x = table.x.get(level).copied().unwrap_or(0);
        out.extend(
            negatives(tree, level, pos.node, x, rng)
                .into_iter()
                .map(|n| SampleSpec::binary(n, false)),
        );
    }
    out
}

/// One pair's features and samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSamples {
    pub pair: TrainPair,
    pub features: UserFeatures,
    pub samples: Vec<SampleSpec>,
}

/// Samples for a slice of pairs with binary-tree positives. Pairs whose
/// target has no earlier behavior are skipped. `rng_for` supplies the
/// stream of each pair.
pub fn make_batch<R: Rng>(
    dataset: &Dataset,
    pairs: &[TrainPair],
    tree: &Tree,
    table: &RatioTable,
    mut rng_for: impl FnMut(&TrainPair) -> R,
) -> Result<Vec<PairSamples>> {
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let seq = &dataset.train_users[pair.user];
        let Some(features) = pair_features(seq, pair.target, tree)? else {
            continue;
        };
        let path = tree.binary_path(seq.events[pair.target].item_id)?;
        let samples = expand(tree, &path, table, &mut rng_for(pair));
        out.push(PairSamples {
            pair: *pair,
            features,
            samples,
        });
    }
    Ok(out)
}
