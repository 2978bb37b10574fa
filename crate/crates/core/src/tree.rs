//! Complete binary tree index over the item corpus.
//!
//! Nodes use the implicit heap layout: the root is node 0 and node `n` has
//! children `2n+1` and `2n+2`. All items sit on the last level, packed to the
//! left, so a tree over `N` items has `max_level = ⌈log2 N⌉`. Nodes whose
//! subtree contains no item do not exist.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Versioned};
use crate::corpus::{BehaviorSequence, CategoryId, Dataset, ItemId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Level in the implicit layout (root is level 0).
    pub fn level(self) -> usize {
        (u64::from(self.0) + 1).ilog2() as usize
    }

    /// Position of the node within its level.
    pub fn position(self) -> usize {
        self.index() + 1 - (1usize << self.level())
    }

    pub fn from_level_position(level: usize, position: usize) -> NodeId {
        NodeId(((1usize << level) - 1 + position) as u32)
    }

    pub fn is_root(self) -> bool {
        self.0 == 0
    }

    /// Parent in the implicit layout, `None` for the root.
    pub fn parent(self) -> Option<NodeId> {
        (!self.is_root()).then(|| NodeId((self.0 - 1) / 2))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// `⌈log2 n⌉`, the leaf level of a tree over `n` items.
pub fn max_level_for(num_items: usize) -> usize {
    if num_items <= 1 {
        0
    } else {
        (num_items - 1).ilog2() as usize + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tree {
    max_level: usize,
    /// Item at each leaf position, left to right.
    leaf_items: Vec<ItemId>,
    leaf_of: HashMap<ItemId, NodeId>,
}

impl Tree {
    /// Places `order[i]` on the i-th leaf.
    pub fn from_leaf_order(order: Vec<ItemId>) -> Result<Tree> {
        if order.is_empty() {
            return Err(Error::Empty("tree needs at least one item"));
        }
        let max_level = max_level_for(order.len());
        let mut leaf_of = HashMap::with_capacity(order.len());
        for (pos, &item) in order.iter().enumerate() {
            if leaf_of
                .insert(item, NodeId::from_level_position(max_level, pos))
                .is_some()
            {
                return Err(Error::DuplicateItem(item));
            }
        }
        Ok(Tree {
            max_level,
            leaf_items: order,
            leaf_of,
        })
    }

    pub fn num_items(&self) -> usize {
        self.leaf_items.len()
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    /// Size of the node id space, including nodes without items.
    pub fn num_node_ids(&self) -> usize {
        (1usize << (self.max_level + 1)) - 1
    }

    /// Items in leaf order.
    pub fn leaf_items(&self) -> &[ItemId] {
        &self.leaf_items
    }

    pub fn leaf_of(&self, item: ItemId) -> Option<NodeId> {
        self.leaf_of.get(&item).copied()
    }

    pub fn item_of(&self, node: NodeId) -> Option<ItemId> {
        if node.level() != self.max_level {
            return None;
        }
        self.leaf_items.get(node.position()).copied()
    }

    pub fn contains_item(&self, item: ItemId) -> bool {
        self.leaf_of.contains_key(&item)
    }

    /// Number of existing nodes on `level`.
    pub fn level_width(&self, level: usize) -> usize {
        if level > self.max_level {
            return 0;
        }
        let span = 1usize << (self.max_level - level);
        self.num_items().div_ceil(span)
    }

    /// True when the node's subtree holds at least one item.
    pub fn contains(&self, node: NodeId) -> bool {
        let level = node.level();
        level <= self.max_level && node.position() < self.level_width(level)
    }

    /// Nodes on `level` that lead to at least one item, in id order.
    pub fn level_nodes(&self, level: usize) -> Vec<NodeId> {
        (0..self.level_width(level))
            .map(|p| NodeId::from_level_position(level, p))
            .collect()
    }

    pub fn parent(&self, node: NodeId) -> Result<NodeId> {
        if !self.contains(node) {
            return Err(Error::UnknownNode(node));
        }
        node.parent().ok_or(Error::Root(node))
    }

    /// Existing children of `node` (none for leaves).
    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        if !self.contains(node) || node.level() == self.max_level {
            return Vec::new();
        }
        [2 * node.0 + 1, 2 * node.0 + 2]
            .into_iter()
            .map(NodeId)
            .filter(|&c| self.contains(c))
            .collect()
    }

    /// The ancestor of `node` on `level`; `ancestor(n, level(n)) == n`.
    pub fn ancestor(&self, node: NodeId, level: usize) -> Result<NodeId> {
        let own = node.level();
        if level > own {
            return Err(Error::Level {
                requested: level,
                limit: own,
            });
        }
        let shifted = (u64::from(node.0) + 1) >> (own - level);
        Ok(NodeId((shifted - 1) as u32))
    }

    /// Ancestor on `level` of the leaf holding `item`.
    pub fn item_ancestor(&self, item: ItemId, level: usize) -> Result<NodeId> {
        let leaf = self.leaf_of(item).ok_or(Error::UnknownItem(item))?;
        self.ancestor(leaf, level)
    }

    /// Root-to-leaf chain for `item`, one node per level.
    pub fn binary_path(&self, item: ItemId) -> Result<Vec<NodeId>> {
        let leaf = self.leaf_of(item).ok_or(Error::UnknownItem(item))?;
        (0..=self.max_level)
            .map(|l| self.ancestor(leaf, l))
            .collect()
    }

    /// Traces every behaved item up to `level`, preserving order and repeats.
    pub fn hierarchical_sequence(&self, seq: &BehaviorSequence, level: usize) -> Result<Vec<NodeId>> {
        if level > self.max_level {
            return Err(Error::Level {
                requested: level,
                limit: self.max_level,
            });
        }
        seq.items()
            .map(|item| self.item_ancestor(item, level))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(&TreeFile::from(self), path)
    }

    pub fn load(path: &Path) -> Result<Tree> {
        artifact::read_json::<TreeFile>(path)?.try_into()
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        artifact::to_json_bytes(&TreeFile::from(self), TreeFile::KIND)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Tree> {
        artifact::from_json_bytes::<TreeFile>(bytes)?.try_into()
    }
}

/// On-disk form: `{version, num_items, max_level, leaf_of: [[item, node], ...]}`.
#[derive(Serialize, Deserialize)]
struct TreeFile {
    version: u32,
    num_items: usize,
    max_level: usize,
    leaf_of: Vec<(ItemId, NodeId)>,
}

impl Versioned for TreeFile {
    const KIND: &'static str = "tree";
    const VERSION: u32 = 1;
    fn version(&self) -> u32 {
        self.version
    }
}

impl From<&Tree> for TreeFile {
    fn from(tree: &Tree) -> Self {
        TreeFile {
            version: Self::VERSION,
            num_items: tree.num_items(),
            max_level: tree.max_level,
            leaf_of: tree
                .leaf_items
                .iter()
                .enumerate()
                .map(|(p, &item)| (item, NodeId::from_level_position(tree.max_level, p)))
                .collect(),
        }
    }
}

impl TryFrom<TreeFile> for Tree {
    type Error = Error;

    fn try_from(file: TreeFile) -> Result<Tree> {
        if file.leaf_of.len() != file.num_items || max_level_for(file.num_items) != file.max_level {
            return Err(Error::Inconsistent(format!(
                "tree file declares {} items at max level {} but lists {} leaves",
                file.num_items,
                file.max_level,
                file.leaf_of.len()
            )));
        }
        let mut order = vec![None; file.num_items];
        for (item, node) in file.leaf_of {
            if node.level() != file.max_level || node.position() >= file.num_items {
                return Err(Error::Inconsistent(format!("{node} is not a leaf slot")));
            }
            if order[node.position()].replace(item).is_some() {
                return Err(Error::Inconsistent(format!("{node} assigned twice")));
            }
        }
        Tree::from_leaf_order(order.into_iter().map(Option::unwrap).collect())
    }
}

fn check_distinct(items: impl IntoIterator<Item = ItemId>) -> Result<()> {
    let mut seen = HashSet::new();
    for item in items {
        if !seen.insert(item) {
            return Err(Error::DuplicateItem(item));
        }
    }
    Ok(())
}

/// Random leaf assignment from a seeded shuffle.
pub fn build_random_tree(items: &[ItemId], seed: u64) -> Result<Tree> {
    check_distinct(items.iter().copied())?;
    let mut order = items.to_vec();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tree::from_leaf_order(order)
}

/// Leaves ordered by `(category, item)` so each category is contiguous.
pub fn build_category_tree(items: &[(ItemId, CategoryId)], _seed: u64) -> Result<Tree> {
    check_distinct(items.iter().map(|&(i, _)| i))?;
    let mut sorted = items.to_vec();
    sorted.sort_unstable_by_key(|&(item, cat)| (cat, item));
    Tree::from_leaf_order(sorted.into_iter().map(|(i, _)| i).collect())
}

/// Which builder produces the leaf order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeKind {
    Random,
    Category,
    Clustered,
}

impl std::str::FromStr for TreeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(TreeKind::Random),
            "category" => Ok(TreeKind::Category),
            "clustered" => Ok(TreeKind::Clustered),
            other => Err(Error::Config(format!(
                "unknown tree kind {other:?} (expected random, category or clustered)"
            ))),
        }
    }
}

impl std::fmt::Display for TreeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TreeKind::Random => "random",
            TreeKind::Category => "category",
            TreeKind::Clustered => "clustered",
        })
    }
}

/// Dimension of the behavior vectors fed to the clustered builder.
pub const ITEM_VECTOR_DIM: usize = 16;

/// Unit-length item vectors: the sum of a seeded Gaussian vector per user
/// who behaved on the item, so items sharing users point the same way.
pub fn behavior_vectors(dataset: &Dataset, dim: usize, seed: u64) -> BTreeMap<ItemId, Vec<f64>> {
    let mut out: BTreeMap<ItemId, Vec<f64>> = dataset
        .item_catalog
        .keys()
        .map(|&i| (i, vec![0.0; dim]))
        .collect();
    let seqs = dataset
        .train_users
        .iter()
        .chain(dataset.test_users.iter().map(|t| &t.features));
    for seq in seqs {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::artifact::derive_seed(&[seed, seq.user_id]));
        let r: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let items: BTreeSet<ItemId> = seq.items().collect();
        for item in items {
            if let Some(v) = out.get_mut(&item) {
                v.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
            }
        }
    }
    for v in out.values_mut() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
    out
}

/// Builds a tree of `kind` over the dataset's catalog.
pub fn build_tree(kind: TreeKind, dataset: &Dataset, seed: u64) -> Result<Tree> {
    match kind {
        TreeKind::Random => build_random_tree(&dataset.items(), seed),
        TreeKind::Category => build_category_tree(&dataset.items_with_categories(), seed),
        TreeKind::Clustered => build_clustered_tree(&behavior_vectors(dataset, ITEM_VECTOR_DIM, seed), seed),
    }
}

/// Iteration cap for each balanced 2-means split.
pub const KMEANS_MAX_ITERS: usize = 50;

/// Recursive balanced 2-means. Each split sends exactly as many items left as
/// the left subtree of the complete layout can hold, so clusters become
/// sibling subtrees.
pub fn build_clustered_tree(vectors: &BTreeMap<ItemId, Vec<f64>>, seed: u64) -> Result<Tree> {
    if vectors.is_empty() {
        return Err(Error::Empty("clustered tree needs at least one item vector"));
    }
    let dim = vectors.values().next().map_or(0, Vec::len);
    if let Some((item, v)) = vectors.iter().find(|(_, v)| v.len() != dim) {
        return Err(Error::Inconsistent(format!(
            "item {item} has a {}-dim vector, expected {dim}",
            v.len()
        )));
    }
    let n = vectors.len();
    let max_level = max_level_for(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<(ItemId, &[f64])> = vectors.iter().map(|(&i, v)| (i, v.as_slice())).collect();
    let mut order = Vec::with_capacity(n);
    split_recursive(points, max_level, &mut rng, &mut order);
    Tree::from_leaf_order(order)
}

fn split_recursive(
    points: Vec<(ItemId, &[f64])>,
    levels_below: usize,
    rng: &mut ChaCha8Rng,
    order: &mut Vec<ItemId>,
) {
    if points.len() <= 1 || levels_below == 0 {
        order.extend(points.iter().map(|&(i, _)| i));
        return;
    }
    let half = 1usize << (levels_below - 1);
    let left_size = half.min(points.len());
    let (left, right) = balanced_two_means(points, left_size, rng);
    split_recursive(left, levels_below - 1, rng, order);
    split_recursive(right, levels_below - 1, rng, order);
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(points: &[(ItemId, &[f64])]) -> Vec<f64> {
    let dim = points.first().map_or(0, |p| p.1.len());
    let mut c = vec![0.0; dim];
    for (_, v) in points {
        for (acc, x) in c.iter_mut().zip(v.iter()) {
            *acc += x;
        }
    }
    let n = points.len().max(1) as f64;
    c.iter_mut().for_each(|x| *x /= n);
    c
}

/// Splits into `(left_size, rest)` by ordering points on their distance
/// margin between the two centroids; ties go by item id.
fn balanced_two_means<'a>(
    mut points: Vec<(ItemId, &'a [f64])>,
    left_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<(ItemId, &'a [f64])>, Vec<(ItemId, &'a [f64])>) {
    if left_size >= points.len() {
        return (points, Vec::new());
    }
    points.sort_unstable_by_key(|&(i, _)| i);
    let seeds = index::sample(rng, points.len(), 2);
    let mut c0 = points[seeds.index(0)].1.to_vec();
    let mut c1 = points[seeds.index(1)].1.to_vec();
    let mut assignment: Vec<ItemId> = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut keyed: Vec<(f64, ItemId, &[f64])> = points
            .iter()
            .map(|&(i, v)| (sq_dist(v, &c0) - sq_dist(v, &c1), i, v))
            .collect();
        keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        points = keyed.into_iter().map(|(_, i, v)| (i, v)).collect();
        let new_assignment: Vec<ItemId> = points[..left_size].iter().map(|p| p.0).collect();
        if new_assignment == assignment {
            break;
        }
        assignment = new_assignment;
        c0 = centroid(&points[..left_size]);
        c1 = centroid(&points[left_size..]);
    }
    let right = points.split_off(left_size);
    (points, right)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Event;

    #[test]
    fn level_arithmetic() {
        assert_eq!(max_level_for(1), 0);
        assert_eq!(max_level_for(2), 1);
        assert_eq!(max_level_for(3), 2);
        assert_eq!(max_level_for(1024), 10);
        assert_eq!(max_level_for(1025), 11);
        assert_eq!(max_level_for(1_477_922), 21);
        assert_eq!(max_level_for(4_162_024), 22);
    }

    #[test]
    fn singleton_tree_is_its_own_root() {
        let t = build_random_tree(&[9], 1).unwrap();
        assert_eq!(t.max_level(), 0);
        assert_eq!(t.leaf_of(9), Some(NodeId::ROOT));
        assert!(t.children(NodeId::ROOT).is_empty());
        assert!(matches!(t.parent(NodeId::ROOT), Err(Error::Root(_))));
    }

    #[test]
    fn duplicates_rejected() {
        assert!(matches!(
            build_random_tree(&[1, 2, 1], 0),
            Err(Error::DuplicateItem(1))
        ));
        assert!(build_category_tree(&[(1, 0), (1, 1)], 0).is_err());
    }

    #[test]
    fn category_order() {
        let t = build_category_tree(&[(1, 1), (2, 0), (3, 0)], 0).unwrap();
        assert_eq!(t.leaf_items(), &[2, 3, 1]);
        let t = build_category_tree(&[(5, 3), (2, 3), (9, 3)], 0).unwrap();
        assert_eq!(t.leaf_items(), &[2, 5, 9]);
        let t = build_category_tree(&[(5, 1), (2, 0)], 0).unwrap();
        assert_eq!(t.max_level(), 1);
        assert_eq!(t.leaf_items(), &[2, 5]);
    }

    #[test]
    fn ancestors_in_implicit_layout() {
        let t = build_random_tree(&(0..16).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!(NodeId(14).level(), 3);
        assert_eq!(t.ancestor(NodeId(14), 2).unwrap(), NodeId(6));
        assert_eq!(t.ancestor(NodeId(14), 0).unwrap(), NodeId::ROOT);
        assert_eq!(t.ancestor(NodeId::ROOT, 0).unwrap(), NodeId::ROOT);
        assert_eq!(t.ancestor(NodeId(14), 3).unwrap(), NodeId(14));
        assert!(t.ancestor(NodeId(2), 3).is_err());
    }

    #[test]
    fn navigation_skips_empty_subtrees() {
        // 5 items: leaves at level 3 positions 0..5.
        let t = build_random_tree(&(0..5).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!(t.max_level(), 3);
        assert_eq!(t.level_nodes(1), vec![NodeId(1), NodeId(2)]);
        assert_eq!(t.level_nodes(2), vec![NodeId(3), NodeId(4), NodeId(5)]);
        assert_eq!(t.children(NodeId(5)), vec![NodeId(11)]);
        assert_eq!(t.children(NodeId(2)), vec![NodeId(5)]);
        assert!(!t.contains(NodeId(6)));
        assert!(t.children(NodeId(7)).is_empty());
        for node in t.level_nodes(2) {
            for c in t.children(node) {
                assert_eq!(t.parent(c).unwrap(), node);
            }
        }
    }

    #[test]
    fn level_nine_has_512_nodes() {
        let t = build_random_tree(&(0..1024).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!(t.level_nodes(9).len(), 512);
        let t = build_random_tree(&(0..2047).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!(t.level_nodes(9).len(), 512);
        // Left-packed leaves leave the right end of a level empty.
        let t = build_random_tree(&(0..1500).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!(t.level_nodes(9).len(), 375);
    }

    #[test]
    fn hierarchical_sequence_traces() {
        let t = build_category_tree(&(0..8).map(|i| (i, 0)).collect::<Vec<_>>(), 0).unwrap();
        let seq = BehaviorSequence {
            user_id: 0,
            events: [0u64, 1, 5, 0]
                .iter()
                .map(|&item_id| Event {
                    item_id,
                    timestamp: 0,
                })
                .collect(),
        };
        let leaves = t.hierarchical_sequence(&seq, 3).unwrap();
        assert_eq!(leaves, vec![NodeId(7), NodeId(8), NodeId(12), NodeId(7)]);
        assert_eq!(t.hierarchical_sequence(&seq, 0).unwrap(), vec![NodeId::ROOT; 4]);
        let l2 = t.hierarchical_sequence(&seq, 2).unwrap();
        assert_eq!(l2[0], l2[1]);
        let bad = BehaviorSequence {
            user_id: 0,
            events: vec![Event {
                item_id: 99,
                timestamp: 0,
            }],
        };
        assert!(matches!(
            t.hierarchical_sequence(&bad, 1),
            Err(Error::UnknownItem(99))
        ));
    }

    /// Smallest within-cluster sum of squares over all balanced splits.
    fn brute_force_best_split(points: &[(ItemId, Vec<f64>)], left: usize) -> Vec<ItemId> {
        let n = points.len();
        let mut best = (f64::INFINITY, Vec::new());
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != left {
                continue;
            }
            let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|&i| mask & (1 << i) != 0);
            let sse = |idx: &[usize]| {
                let pts: Vec<(ItemId, &[f64])> =
                    idx.iter().map(|&i| (points[i].0, points[i].1.as_slice())).collect();
                let c = centroid(&pts);
                pts.iter().map(|p| sq_dist(p.1, &c)).sum::<f64>()
            };
            let cost = sse(&a) + sse(&b);
            if cost < best.0 - 1e-12 {
                let mut ids: Vec<_> = a.iter().map(|&i| points[i].0).collect();
                ids.sort_unstable();
                best = (cost, ids);
            }
        }
        best.1
    }

    #[test]
    fn clustered_tree_separates_line_clusters() {
        let pts = vec![
            (0u64, vec![0.0]),
            (1, vec![1.0]),
            (2, vec![10.0]),
            (3, vec![11.0]),
        ];
        let best = brute_force_best_split(&pts, 2);
        let best_other: Vec<ItemId> = (0..4).filter(|i| !best.contains(i)).collect();
        let vectors: BTreeMap<_, _> = pts.into_iter().collect();
        for seed in 0..20 {
            let t = build_clustered_tree(&vectors, seed).unwrap();
            let mut left: Vec<_> = t.leaf_items()[..2].to_vec();
            left.sort_unstable();
            assert!(left == best || left == best_other, "seed {seed}: {left:?}");
            assert_eq!(t.item_ancestor(0, 1).unwrap(), t.item_ancestor(1, 1).unwrap());
            assert_eq!(t.item_ancestor(2, 1).unwrap(), t.item_ancestor(3, 1).unwrap());
        }
    }

    #[test]
    fn clustered_tree_edge_cases() {
        assert!(build_clustered_tree(&BTreeMap::new(), 0).is_err());
        let one: BTreeMap<_, _> = [(4u64, vec![1.0, 2.0])].into_iter().collect();
        let t = build_clustered_tree(&one, 0).unwrap();
        assert_eq!(t.leaf_of(4), Some(NodeId::ROOT));
        let same: BTreeMap<_, _> = [(1u64, vec![0.5]), (2, vec![0.5])].into_iter().collect();
        assert_eq!(
            build_clustered_tree(&same, 3).unwrap(),
            build_clustered_tree(&same, 3).unwrap()
        );
        let ragged: BTreeMap<_, _> = [(1u64, vec![0.5]), (2, vec![0.5, 1.0])].into_iter().collect();
        assert!(build_clustered_tree(&ragged, 0).is_err());
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let items: Vec<u64> = (0..37).collect();
        let trees = [
            build_random_tree(&items, 3).unwrap(),
            build_category_tree(&items.iter().map(|&i| (i, i % 4)).collect::<Vec<_>>(), 3)
                .unwrap(),
            build_clustered_tree(
                &items.iter().map(|&i| (i, vec![i as f64 % 7.0, i as f64])).collect(),
                3,
            )
            .unwrap(),
        ];
        for t in &trees {
            let bytes = t.to_json_bytes().unwrap();
            assert_eq!(&Tree::from_json_bytes(&bytes).unwrap(), t);
        }
        let bumped = String::from_utf8(trees[0].to_json_bytes().unwrap())
            .unwrap()
            .replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(
            Tree::from_json_bytes(bumped.as_bytes()),
            Err(Error::Version { found: 2, .. })
        ));
    }
}
