//! Multipath tree index: graph-derived extra parents on top of the binary
//! tree, and per-sample path selection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, Versioned};
use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::features::{ItemTracer, UserFeatures};
use crate::graph::HierGraph;
use crate::nn::Scorer;
use crate::tree::{NodeId, Tree};

pub const DEFAULT_MAX_EXTRA_PARENTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct MultipathTree {
    base: Tree,
    max_extra_parents: usize,
    extra_parents: BTreeMap<NodeId, Vec<NodeId>>,
    graph_children: BTreeMap<NodeId, Vec<NodeId>>,
}

/// A root-to-leaf chain for one item, one node per level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemPath {
    pub item_id: ItemId,
    pub nodes: Vec<NodeId>,
}

/// For every neighbor `v` of a node `n`, `pa(n)` becomes a candidate extra
/// parent of `v` weighted by the edge `(n, v)`. Each node keeps its
/// `max_extra_parents` heaviest candidates, ties to the smaller id.
pub fn build_multipath(tree: &Tree, graph: &HierGraph, max_extra_parents: usize) -> Result<MultipathTree> {
    let mut candidates: BTreeMap<NodeId, BTreeMap<NodeId, u64>> = BTreeMap::new();
    for level in graph.levels() {
        if level == 0 {
            continue;
        }
        for (n, nbrs) in graph.level_adjacency(level) {
            if !tree.contains(n) {
                return Err(Error::UnknownNode(n));
            }
            let p = tree.parent(n)?;
            for nb in nbrs {
                if nb.node.level() != level || !tree.contains(nb.node) {
                    return Err(Error::Inconsistent(format!(
                        "graph neighbor {} of {n} is not a level-{level} node of the tree",
                        nb.node
                    )));
                }
                if nb.node.parent() == Some(p) {
                    continue;
                }
                let w = candidates.entry(nb.node).or_default().entry(p).or_insert(0);
                *w = (*w).max(nb.weight);
            }
        }
    }
    let mut extra_parents = BTreeMap::new();
    for (v, cands) in candidates {
        let mut ranked: Vec<(NodeId, u64)> = cands.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(max_extra_parents);
        if !ranked.is_empty() {
            extra_parents.insert(v, ranked.into_iter().map(|(p, _)| p).collect());
        }
    }
    Ok(MultipathTree::from_parts(tree.clone(), max_extra_parents, extra_parents))
}

impl MultipathTree {
    fn from_parts(base: Tree, max_extra_parents: usize, extra_parents: BTreeMap<NodeId, Vec<NodeId>>) -> Self {
        let mut graph_children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (&child, parents) in &extra_parents {
            for &p in parents {
                graph_children.entry(p).or_default().push(child);
            }
        }
        // Children were visited in id order, so each list is sorted.
        MultipathTree {
            base,
            max_extra_parents,
            extra_parents,
            graph_children,
        }
    }

    /// The binary tree without extra edges.
    pub fn binary(tree: &Tree) -> Self {
        Self::from_parts(tree.clone(), DEFAULT_MAX_EXTRA_PARENTS, BTreeMap::new())
    }

    pub fn tree(&self) -> &Tree {
        &self.base
    }

    pub fn max_extra_parents(&self) -> usize {
        self.max_extra_parents
    }

    pub fn extra_parents(&self, node: NodeId) -> &[NodeId] {
        self.extra_parents.get(&node).map_or(&[], Vec::as_slice)
    }

    /// Children reachable only through extra edges, in id order.
    pub fn graph_children(&self, node: NodeId) -> &[NodeId] {
        self.graph_children.get(&node).map_or(&[], Vec::as_slice)
    }

    /// Original children followed by graph-children.
    pub fn all_children(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = self.base.children(node);
        out.extend_from_slice(self.graph_children(node));
        out
    }

    /// Original parent first, then extra parents.
    pub fn parents(&self, node: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = node.parent().into_iter().collect();
        out.extend_from_slice(self.extra_parents(node));
        out
    }

    pub fn num_extra_edges(&self) -> usize {
        self.extra_parents.values().map(Vec::len).sum()
    }

    pub fn is_binary(&self) -> bool {
        self.extra_parents.is_empty()
    }

    /// Mean number of graph-children over nodes that have at least one;
    /// 0 when there are none.
    pub fn avg_graph_children(&self) -> f64 {
        if self.graph_children.is_empty() {
            return 0.0;
        }
        self.num_extra_edges() as f64 / self.graph_children.len() as f64
    }

    /// Whether consecutive nodes of `path` are linked by an original or
    /// extra edge and the path ends at the item's leaf.
    pub fn is_valid_path(&self, path: &ItemPath) -> bool {
        let n = &path.nodes;
        n.len() == self.base.max_level() + 1
            && n.first() == Some(&NodeId::ROOT)
            && self.base.leaf_of(path.item_id) == n.last().copied()
            && n.windows(2)
                .all(|w| w[1].parent() == Some(w[0]) || self.extra_parents(w[1]).contains(&w[0]))
    }

    /// Greedy upward walk from the item's leaf: at each step the parent
    /// with the highest `p̂(n|u)` wins, ties going to the original parent
    /// and then to the smaller id. Candidates are scored in their binary
    /// context.
    pub fn best_path(&self, scorer: &Scorer, user: &UserFeatures, item: ItemId) -> Result<ItemPath> {
        let leaf = self.base.leaf_of(item).ok_or(Error::UnknownItem(item))?;
        let mut nodes = vec![leaf];
        let mut cur = leaf;
        while let Some(orig) = cur.parent() {
            let extras = self.extra_parents(cur);
            let mut best = orig;
            if !extras.is_empty() {
                let mut best_score = scorer.score_uncached(user, orig);
                for &p in extras {
                    let s = scorer.score_uncached(user, p);
                    if s > best_score || (s == best_score && best != orig && p < best) {
                        best = p;
                        best_score = s;
                    }
                }
            }
            nodes.push(best);
            cur = best;
        }
        nodes.reverse();
        Ok(ItemPath { item_id: item, nodes })
    }

    pub fn binary_path(&self, item: ItemId) -> Result<ItemPath> {
        Ok(ItemPath {
            item_id: item,
            nodes: self.base.binary_path(item)?,
        })
    }

    /// The most common of `paths` observed for `item`. Ties and unseen
    /// items fall back to the binary chain.
    pub fn most_frequent_path(&self, paths: &[ItemPath], item: ItemId) -> Result<ItemPath> {
        let mut counts: BTreeMap<&ItemPath, usize> = BTreeMap::new();
        for p in paths.iter().filter(|p| p.item_id == item) {
            *counts.entry(p).or_insert(0) += 1;
        }
        let binary = self.binary_path(item)?;
        let Some(&top) = counts.values().max() else {
            return Ok(binary);
        };
        let mut winners = counts.iter().filter(|(_, &c)| c == top);
        let (first, _) = winners.next().expect("at least one winner");
        if winners.next().is_some() {
            return Ok(binary);
        }
        Ok((*first).clone())
    }

    /// Most frequent path of every item, keyed by item.
    pub fn path_table(&self, paths: &[ItemPath]) -> Result<PathTable> {
        let mut by_item: HashMap<ItemId, Vec<ItemPath>> = HashMap::new();
        for p in paths {
            by_item.entry(p.item_id).or_default().push(p.clone());
        }
        let mut table = HashMap::with_capacity(self.base.num_items());
        for &item in self.base.leaf_items() {
            let observed = by_item.get(&item).map_or(&[][..], Vec::as_slice);
            table.insert(item, self.most_frequent_path(observed, item)?.nodes);
        }
        Ok(PathTable {
            max_level: self.base.max_level(),
            paths: table,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(&self.to_file()?, path)
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        artifact::to_json_bytes(&self.to_file()?, MultipathFile::KIND)
    }

    fn to_file(&self) -> Result<MultipathFile> {
        Ok(MultipathFile {
            version: MultipathFile::VERSION,
            tree_sha256: artifact::sha256_hex(&self.base.to_json_bytes()?),
            max_extra_parents: self.max_extra_parents,
            extra_parents: self.extra_parents.iter().map(|(k, v)| (*k, v.clone())).collect(),
        })
    }

    /// Loads the extra-parent table and attaches it to `tree`, which must be
    /// the tree it was built on.
    pub fn load(path: &Path, tree: &Tree) -> Result<Self> {
        let file: MultipathFile = artifact::read_json(path)?;
        Self::from_file(file, tree)
    }

    pub fn from_json_bytes(bytes: &[u8], tree: &Tree) -> Result<Self> {
        Self::from_file(artifact::from_json_bytes(bytes)?, tree)
    }

    fn from_file(file: MultipathFile, tree: &Tree) -> Result<Self> {
        if file.tree_sha256 != artifact::sha256_hex(&tree.to_json_bytes()?) {
            return Err(Error::Inconsistent("multipath index was built on a different tree".into()));
        }
        let mut extra_parents = BTreeMap::new();
        for (node, parents) in file.extra_parents {
            for &p in &parents {
                if !tree.contains(node) || !tree.contains(p) || p.level() + 1 != node.level() || node.parent() == Some(p) {
                    return Err(Error::Inconsistent(format!("invalid extra parent {p} of {node}")));
                }
            }
            extra_parents.insert(node, parents);
        }
        Ok(Self::from_parts(tree.clone(), file.max_extra_parents, extra_parents))
    }
}

#[derive(Serialize, Deserialize)]
struct MultipathFile {
    version: u32,
    tree_sha256: String,
    max_extra_parents: usize,
    extra_parents: Vec<(NodeId, Vec<NodeId>)>,
}

impl Versioned for MultipathFile {
    const KIND: &'static str = "multipath";
    const VERSION: u32 = 1;
    fn version(&self) -> u32 {
        self.version
    }
}

/// One chosen path per item, used to trace behaviors on a multipath index.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTable {
    max_level: usize,
    paths: HashMap<ItemId, Vec<NodeId>>,
}

impl PathTable {
    pub fn path(&self, item: ItemId) -> Option<&[NodeId]> {
        self.paths.get(&item).map(Vec::as_slice)
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut paths: Vec<ItemPath> = self
            .paths
            .iter()
            .map(|(&item_id, nodes)| ItemPath {
                item_id,
                nodes: nodes.clone(),
            })
            .collect();
        paths.sort();
        let file = PathTableFile {
            version: PathTableFile::VERSION,
            max_level: self.max_level,
            paths,
        };
        artifact::to_json_bytes(&file, PathTableFile::KIND)
    }

    /// Reads a table and checks every path against `mtree`.
    pub fn from_json_bytes(bytes: &[u8], mtree: &MultipathTree) -> Result<PathTable> {
        let file: PathTableFile = artifact::from_json_bytes(bytes)?;
        if file.max_level != mtree.tree().max_level() {
            return Err(Error::Inconsistent("path table was built for a different tree".into()));
        }
        let mut paths = HashMap::with_capacity(file.paths.len());
        for p in file.paths {
            if !mtree.is_valid_path(&p) {
                return Err(Error::Inconsistent(format!("invalid path for item {}", p.item_id)));
            }
            paths.insert(p.item_id, p.nodes);
        }
        Ok(PathTable {
            max_level: file.max_level,
            paths,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PathTableFile {
    version: u32,
    max_level: usize,
    paths: Vec<ItemPath>,
}

impl Versioned for PathTableFile {
    const KIND: &'static str = "paths";
    const VERSION: u32 = 1;
    fn version(&self) -> u32 {
        self.version
    }
}

impl ItemTracer for PathTable {
    fn max_level(&self) -> usize {
        self.max_level
    }

    fn trace(&self, item: ItemId, level: usize) -> Result<NodeId> {
        let path = self.paths.get(&item).ok_or(Error::UnknownItem(item))?;
        path.get(level).copied().ok_or(Error::Level {
            requested: level,
            limit: self.max_level,
        })
    }
}
