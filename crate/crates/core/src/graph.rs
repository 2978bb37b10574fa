//! Level-wise co-occurrence graph over tree nodes.
//!
//! For every level from the leaves up to `start_level`, each behavior sequence
//! is traced to that level and every pair of positions whose timestamps are at
//! most `t_minutes` apart adds 1 to the weight of the undirected edge between
//! the two traced nodes. Each node then keeps its `min(k_max, K)` heaviest
//! neighbors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Versioned};
use crate::corpus::BehaviorSequence;
use crate::error::{Error, Result};
use crate::tree::{NodeId, Tree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Maximum time gap between two co-occurring behaviors, in minutes.
    #[serde(rename = "t")]
    pub t_minutes: u64,
    /// Neighbors kept per node.
    #[serde(rename = "k")]
    pub k_max: usize,
    /// Highest (closest to the root) level that gets a graph.
    pub start_level: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            t_minutes: 30,
            k_max: 5,
            start_level: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Neighbor {
    pub node: NodeId,
    pub weight: u64,
}

impl Serialize for NeighborList {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|n| (n.node, n.weight)))
    }
}

impl<'de> Deserialize<'de> for NeighborList {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<(NodeId, u64)>::deserialize(d)?;
        Ok(NeighborList(
            pairs
                .into_iter()
                .map(|(node, weight)| Neighbor { node, weight })
                .collect(),
        ))
    }
}

/// Pruned neighbors of one node, heaviest first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NeighborList(pub Vec<Neighbor>);

/// Unordered node pair `(low, high)` mapped to its co-occurrence count.
pub type WeightMap = BTreeMap<(NodeId, NodeId), u64>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierGraph {
    version: u32,
    params: GraphParams,
    levels: BTreeMap<usize, BTreeMap<NodeId, NeighborList>>,
}

impl Versioned for HierGraph {
    const KIND: &'static str = "graph";
    const VERSION: u32 = 1;
    fn version(&self) -> u32 {
        self.version
    }
}

impl HierGraph {
    /// A graph without edges; every neighbor query returns an empty list.
    pub fn empty(params: GraphParams) -> Self {
        HierGraph {
            version: Self::VERSION,
            params,
            levels: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> GraphParams {
        self.params
    }

    /// Pruned neighbor list of `node`, empty when it has no edges.
    pub fn neighbors(&self, node: NodeId) -> &[Neighbor] {
        self.levels
            .get(&node.level())
            .and_then(|lvl| lvl.get(&node))
            .map_or(&[], |l| l.0.as_slice())
    }

    pub fn neighbor_ids(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.neighbors(node).iter().map(|n| n.node)
    }

    pub fn levels(&self) -> impl Iterator<Item = usize> + '_ {
        self.levels.keys().copied()
    }

    /// Nodes of `level` with at least one neighbor, with their lists.
    pub fn level_adjacency(&self, level: usize) -> impl Iterator<Item = (NodeId, &[Neighbor])> {
        self.levels
            .get(&level)
            .into_iter()
            .flat_map(|m| m.iter().map(|(&n, l)| (n, l.0.as_slice())))
    }

    /// Undirected edges kept by at least one endpoint on `level`.
    pub fn edges(&self, level: usize) -> BTreeSet<(NodeId, NodeId)> {
        self.level_adjacency(level)
            .flat_map(|(u, list)| list.iter().map(move |n| (u.min(n.node), u.max(n.node))))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.values().all(BTreeMap::is_empty)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<HierGraph> {
        artifact::read_json(path)
    }
}

/// Builds the hierarchical graph for levels `max_level` down to
/// `params.start_level`.
pub fn build_graph(
    tree: &Tree,
    sequences: &[BehaviorSequence],
    params: GraphParams,
) -> Result<HierGraph> {
    if params.start_level > tree.max_level() {
        return Err(Error::Level {
            requested: params.start_level,
            limit: tree.max_level(),
        });
    }
    let mut graph = HierGraph::empty(params);
    for level in (params.start_level..=tree.max_level()).rev() {
        let weights = count_cooccurrence(tree, sequences, params.t_minutes, level)?;
        let pruned = prune(&weights, params.k_max);
        if !pruned.is_empty() {
            graph.levels.insert(level, pruned);
        }
    }
    Ok(graph)
}

/// Counting phase of the builder: co-occurrence weights on `level` before
/// pruning. Relies on sequences being sorted by time.
pub fn count_cooccurrence(
    tree: &Tree,
    sequences: &[BehaviorSequence],
    t_minutes: u64,
    level: usize,
) -> Result<WeightMap> {
    let gap = t_minutes * 60;
    let traced: Vec<Vec<(NodeId, u64)>> = sequences
        .iter()
        .map(|seq| {
            seq.events
                .iter()
                .map(|e| Ok((tree.item_ancestor(e.item_id, level)?, e.timestamp)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let merged = traced
        .par_iter()
        .fold(HashMap::new, |mut acc: HashMap<(NodeId, NodeId), u64>, seq| {
            for (i, &(u, tu)) in seq.iter().enumerate() {
                for &(v, tv) in &seq[i + 1..] {
                    if tv.abs_diff(tu) > gap {
                        break;
                    }
                    if u != v {
                        *acc.entry((u.min(v), u.max(v))).or_insert(0) += 1;
                    }
                }
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, w) in b {
                *a.entry(k).or_insert(0) += w;
            }
            a
        });
    Ok(merged.into_iter().collect())
}

/// Direct O(m²) pair counting over every position pair, without pruning.
/// Used to check [`count_cooccurrence`].
pub fn brute_force_cooccurrence(
    tree: &Tree,
    sequences: &[BehaviorSequence],
    t_minutes: u64,
    level: usize,
) -> Result<WeightMap> {
    let mut weights = WeightMap::new();
    for seq in sequences {
        let m = seq.events.len();
        for i in 0..m {
            for j in 0..m {
                if i >= j {
                    continue;
                }
                let (a, b) = (&seq.events[i], &seq.events[j]);
                let u = tree.item_ancestor(a.item_id, level)?;
                let v = tree.item_ancestor(b.item_id, level)?;
                let close = a.timestamp.abs_diff(b.timestamp) <= t_minutes * 60;
                if close && u != v {
                    *weights.entry((u.min(v), u.max(v))).or_default() += 1;
                }
            }
        }
    }
    Ok(weights)
}

/// Keeps, for every node, its `min(k_max, K)` heaviest neighbors ordered by
/// weight descending then node id ascending.
fn prune(weights: &WeightMap, k_max: usize) -> BTreeMap<NodeId, NeighborList> {
    let mut candidates: BTreeMap<NodeId, Vec<Neighbor>> = BTreeMap::new();
    for (&(u, v), &weight) in weights {
        candidates
            .entry(u)
            .or_default()
            .push(Neighbor { node: v, weight });
        candidates
            .entry(v)
            .or_default()
            .push(Neighbor { node: u, weight });
    }
    candidates
        .into_iter()
        .filter_map(|(node, mut list)| {
            list.sort_unstable_by(|a, b| b.weight.cmp(&a.weight).then(a.node.cmp(&b.node)));
            list.truncate(k_max);
            (!list.is_empty()).then_some((node, NeighborList(list)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Event;
    use crate::tree::build_category_tree;

    fn seq(events: &[(u64, u64)]) -> BehaviorSequence {
        BehaviorSequence {
            user_id: 0,
            events: events
                .iter()
                .map(|&(item_id, timestamp)| Event { item_id, timestamp })
                .collect(),
        }
    }

    fn tree(n: u64) -> Tree {
        build_category_tree(&(0..n).map(|i| (i, 0)).collect::<Vec<_>>(), 0).unwrap()
    }

    fn params(start_level: usize) -> GraphParams {
        GraphParams {
            start_level,
            ..Default::default()
        }
    }

    #[test]
    fn close_pair_makes_an_edge() {
        let t = tree(8);
        let g = build_graph(&t, &[seq(&[(1, 0), (2, 60)])], params(3)).unwrap();
        let a = t.leaf_of(1).unwrap();
        let b = t.leaf_of(2).unwrap();
        assert_eq!(g.neighbors(a), &[Neighbor { node: b, weight: 1 }]);
        assert_eq!(g.neighbors(b), &[Neighbor { node: a, weight: 1 }]);
    }

    #[test]
    fn distant_pair_makes_no_edge() {
        let t = tree(8);
        let g = build_graph(&t, &[seq(&[(1, 0), (2, 3600)])], params(3)).unwrap();
        assert!(g.is_empty());
        assert!(g.neighbors(t.leaf_of(1).unwrap()).is_empty());
    }

    #[test]
    fn pruning_keeps_heaviest_five() {
        let t = tree(16);
        // Item 0 co-occurs with items 1..=8; item k appears k times.
        let mut events = Vec::new();
        for k in 1..=8u64 {
            for _ in 0..k {
                events.push((0, 0));
                events.push((k, 0));
            }
        }
        let sequences: Vec<_> = events.chunks(2).map(seq).collect();
        let g = build_graph(&t, &sequences, params(4)).unwrap();
        let hub = g.neighbors(t.leaf_of(0).unwrap());
        let kept: Vec<u64> = hub.iter().map(|n| t.item_of(n.node).unwrap()).collect();
        assert_eq!(kept, vec![8, 7, 6, 5, 4]);
        assert_eq!(hub[0].weight, 8);
        // Asymmetric: item 1 still keeps the hub even though the hub dropped it.
        assert_eq!(g.neighbors(t.leaf_of(1).unwrap()).len(), 1);
        assert!(g
            .edges(4)
            .contains(&(t.leaf_of(0).unwrap(), t.leaf_of(1).unwrap())));
    }

    #[test]
    fn ties_break_by_node_id() {
        let t = tree(8);
        let sequences = vec![seq(&[(3, 0), (1, 0), (2, 0)])];
        let g = build_graph(
            &t,
            &sequences,
            GraphParams {
                k_max: 1,
                ..params(3)
            },
        )
        .unwrap();
        assert_eq!(g.neighbors(t.leaf_of(3).unwrap())[0].node, t.leaf_of(1).unwrap());
    }

    #[test]
    fn levels_above_start_are_empty() {
        let t = tree(16);
        let s = vec![seq(&[(0, 0), (15, 10), (7, 20)])];
        let g = build_graph(&t, &s, params(2)).unwrap();
        assert!(g.levels().all(|l| l >= 2));
        assert!(g.level_adjacency(1).next().is_none());
        assert!(g.level_adjacency(2).next().is_some());
        assert!(build_graph(&t, &s, params(5)).is_err());
    }

    #[test]
    fn brute_force_degenerate_inputs() {
        let t = tree(8);
        assert!(brute_force_cooccurrence(&t, &[], 30, 3).unwrap().is_empty());
        assert!(brute_force_cooccurrence(&t, &[seq(&[(1, 0)])], 30, 3)
            .unwrap()
            .is_empty());
        let s = [seq(&[(1, 0), (2, 100), (1, 200)])];
        assert_eq!(
            brute_force_cooccurrence(&t, &s, 30, 3).unwrap(),
            count_cooccurrence(&t, &s, 30, 3).unwrap()
        );
    }

    #[test]
    fn json_round_trip() {
        let t = tree(16);
        let s = vec![
            seq(&[(0, 0), (5, 60), (9, 120), (0, 180)]),
            seq(&[(3, 0), (5, 30), (12, 1000)]),
        ];
        let g = build_graph(&t, &s, params(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        g.save(&p).unwrap();
        assert_eq!(HierGraph::load(&p).unwrap(), g);
    }
}
