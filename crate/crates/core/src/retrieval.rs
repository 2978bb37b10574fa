//! Layer-wise beam search over the binary or multipath index, and the
//! exhaustive scoring oracle.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::features::UserFeatures;
use crate::multipath::MultipathTree;
use crate::nn::{ParentRepr, Scorer};
use crate::tree::{NodeId, Tree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub start_level: usize,
    pub beam_width: usize,
    pub multipath_quota: usize,
    pub final_k: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            start_level: 9,
            beam_width: 200,
            multipath_quota: 400,
            final_k: 200,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.multipath_quota == 0 || self.final_k == 0 {
            return Err(Error::Config("beam_width, multipath_quota and final_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Items with their leaf scores, best first.
    pub items: Vec<(ItemId, f64)>,
}

impl RetrievalResult {
    pub fn item_ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|&(i, _)| i).collect()
    }
}

/// A scored node and the path it was reached through.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub node: NodeId,
    pub parent: Option<NodeId>,
    pub grandparent: Option<NodeId>,
    pub score: f64,
}

/// Every candidate scored on each level, in scoring order.
pub type BeamTrace = Vec<Vec<Candidate>>;

/// Descending score, then ascending node id.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.node.cmp(&b.node))
}

fn top(mut cands: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    cands.sort_by(rank);
    cands.truncate(k);
    cands
}

struct Beam<'s, 'a> {
    scorer: &'s Scorer<'a>,
    user: &'s UserFeatures,
}

impl Beam<'_, '_> {
    /// Representations of `nodes` as parents, each reached through the
    /// node listed with it. `prev` holds representations of those.
    fn parent_reprs(
        &self,
        nodes: impl IntoIterator<Item = (NodeId, Option<NodeId>)>,
        prev: &HashMap<NodeId, ParentRepr>,
    ) -> HashMap<NodeId, ParentRepr> {
        let cfg = self.scorer.model.config();
        let mut out = HashMap::new();
        if !cfg.needs_parent() {
            return out;
        }
        let mut grand_cache: HashMap<NodeId, Vec<f64>> = HashMap::new();
        for (node, via) in nodes {
            if out.contains_key(&node) {
                continue;
            }
            let grand_v = match via {
                Some(g) if cfg.needs_grandparent() => Some(match prev.get(&g) {
                    Some(r) => r.v.clone(),
                    None => grand_cache
                        .entry(g)
                        .or_insert_with(|| self.scorer.repr(self.user, g))
                        .clone(),
                }),
                _ => None,
            };
            out.insert(node, self.scorer.parent_repr(self.user, node, grand_v.as_deref()));
        }
        out
    }

    fn run(
        &self,
        tree: &Tree,
        cfg: &BeamConfig,
        width: usize,
        children: impl Fn(NodeId) -> Vec<NodeId>,
    ) -> Result<(RetrievalResult, BeamTrace)> {
        cfg.validate()?;
        let l_max = tree.max_level();
        let s = cfg.start_level;
        if s > l_max {
            return Err(Error::Level {
                requested: s,
                limit: l_max,
            });
        }
        let mut trace = BeamTrace::new();

        // Start level: every node, each under its binary parent.
        let start_nodes = tree.level_nodes(s);
        let parents = self.parent_reprs(
            start_nodes
                .iter()
                .filter_map(|n| n.parent())
                .map(|p| (p, p.parent())),
            &HashMap::new(),
        );
        let scored: Vec<Candidate> = start_nodes
            .iter()
            .map(|&n| {
                let parent = n.parent();
                Candidate {
                    node: n,
                    parent,
                    grandparent: parent.and_then(NodeId::parent),
                    score: self
                        .scorer
                        .score_with_parent(self.user, n, parent.and_then(|p| parents.get(&p))),
                }
            })
            .collect();
        trace.push(scored.clone());
        let mut beam = top(scored, if s == l_max { cfg.final_k } else { width });
        let mut prev = parents;

        for level in s + 1..=l_max {
            let reprs = self.parent_reprs(beam.iter().map(|c| (c.node, c.parent)), &prev);
            let mut seen = HashSet::new();
            let mut scored = Vec::new();
            for b in &beam {
                for child in children(b.node) {
                    if !seen.insert(child) {
                        continue;
                    }
                    scored.push(Candidate {
                        node: child,
                        parent: Some(b.node),
                        grandparent: b.parent,
                        score: self.scorer.score_with_parent(self.user, child, reprs.get(&b.node)),
                    });
                }
            }
            debug_assert!(scored.iter().all(|c| c.node.level() == level));
            trace.push(scored.clone());
            beam = top(scored, if level == l_max { cfg.final_k } else { width });
            prev = reprs;
        }

        let items = beam
            .iter()
            .map(|c| {
                let item = tree.item_of(c.node).ok_or(Error::UnknownNode(c.node))?;
                Ok((item, c.score))
            })
            .collect::<Result<_>>()?;
        Ok((RetrievalResult { items }, trace))
    }
}

/// Binary-tree beam search: score every node of the start level, then
/// keep the best `beam_width` nodes per level and expand their children,
/// sharing each parent's representation among its children.
pub fn beam_search(scorer: &Scorer, tree: &Tree, user: &UserFeatures, cfg: &BeamConfig) -> Result<RetrievalResult> {
    beam_search_traced(scorer, tree, user, cfg).map(|(r, _)| r)
}

pub fn beam_search_traced(
    scorer: &Scorer,
    tree: &Tree,
    user: &UserFeatures,
    cfg: &BeamConfig,
) -> Result<(RetrievalResult, BeamTrace)> {
    Beam { scorer, user }.run(tree, cfg, cfg.beam_width, |n| tree.children(n))
}

/// Multipath beam search: beam nodes propose their original children and
/// their graph-children; a node proposed twice keeps the first proposer
/// in beam order. Non-leaf levels keep `multipath_quota` nodes.
pub fn beam_search_multipath(
    scorer: &Scorer,
    mtree: &MultipathTree,
    user: &UserFeatures,
    cfg: &BeamConfig,
) -> Result<RetrievalResult> {
    beam_search_multipath_traced(scorer, mtree, user, cfg).map(|(r, _)| r)
}

pub fn beam_search_multipath_traced(
    scorer: &Scorer,
    mtree: &MultipathTree,
    user: &UserFeatures,
    cfg: &BeamConfig,
) -> Result<(RetrievalResult, BeamTrace)> {
    Beam { scorer, user }.run(mtree.tree(), cfg, cfg.multipath_quota, |n| mtree.all_children(n))
}

/// Scores every leaf with its full binary parent chain recomputed and
/// returns the best `k`.
pub fn exhaustive_retrieval(scorer: &Scorer, tree: &Tree, user: &UserFeatures, k: usize) -> Result<RetrievalResult> {
    let leaves = tree.level_nodes(tree.max_level());
    let scored: Vec<Candidate> = leaves
        .iter()
        .map(|&n| Candidate {
            node: n,
            parent: n.parent(),
            grandparent: n.parent().and_then(NodeId::parent),
            score: scorer.score_uncached(user, n),
        })
        .collect();
    let items = top(scored, k)
        .into_iter()
        .map(|c| Ok((tree.item_of(c.node).ok_or(Error::UnknownNode(c.node))?, c.score)))
        .collect::<Result<_>>()?;
    Ok(RetrievalResult { items })
}

/// Fraction of `truth` items whose level-`level` ancestor ranks within the
/// top `beam_width` of all nodes on that level, scored cache-free.
pub fn heap_consistency_report(
    scorer: &Scorer,
    tree: &Tree,
    user: &UserFeatures,
    truth: &[ItemId],
    level: usize,
    beam_width: usize,
) -> Result<f64> {
    if level > tree.max_level() {
        return Err(Error::Level {
            requested: level,
            limit: tree.max_level(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("ground truth"));
    }
    let scored: Vec<Candidate> = tree
        .level_nodes(level)
        .into_iter()
        .map(|n| Candidate {
            node: n,
            parent: n.parent(),
            grandparent: None,
            score: scorer.score_uncached(user, n),
        })
        .collect();
    let kept: HashSet<NodeId> = top(scored, beam_width).into_iter().map(|c| c.node).collect();
    let mut hits = 0usize;
    for &item in truth {
        if kept.contains(&tree.item_ancestor(item, level)?) {
            hits += 1;
        }
    }
    Ok(hits as f64 / truth.len() as f64)
}

/// Retrieval for many users in parallel; output order follows `users`.
pub fn retrieve_all(
    scorer: &Scorer,
    index: &RetrievalIndex,
    users: &[UserFeatures],
    cfg: &BeamConfig,
    workers: usize,
) -> Result<Vec<RetrievalResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| {
        users
            .par_iter()
            .map(|u| match index {
                RetrievalIndex::Binary(t) => beam_search(scorer, t, u, cfg),
                RetrievalIndex::Multipath(m) => beam_search_multipath(scorer, m, u, cfg),
            })
            .collect()
    })
}

pub enum RetrievalIndex<'a> {
    Binary(&'a Tree),
    Multipath(&'a MultipathTree),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WindowedFeatures;
    use crate::graph::{build_graph, GraphParams, HierGraph};
    use crate::multipath::build_multipath;
    use crate::nn::{Model, ModelConfig};
    use crate::tree::build_random_tree;

    fn user(t: &Tree, items: &[u64]) -> UserFeatures {
        let mut windows = vec![Vec::new(); 10];
        for (i, &it) in items.iter().enumerate() {
            windows[i % 10].push(it);
        }
        UserFeatures::trace(&WindowedFeatures { windows }, t).unwrap()
    }

    fn setup(n: u64, cfg: ModelConfig) -> (Tree, Model, HierGraph) {
        let t = build_random_tree(&(0..n).collect::<Vec<_>>(), 1).unwrap();
        let m = Model::new(cfg, t.num_node_ids(), 3).unwrap();
        (t, m, HierGraph::empty(GraphParams::default()))
    }

    #[test]
    fn full_width_beam_equals_exhaustive() {
        for mp in [false, true] {
            let (t, m, g) = setup(
                100,
                ModelConfig {
                    use_multipath_pf: mp,
                    ..Default::default()
                },
            );
            let s = Scorer::new(&m, &g);
            let u = user(&t, &[3, 50, 77]);
            let cfg = BeamConfig {
                start_level: 2,
                beam_width: 128,
                multipath_quota: 128,
                final_k: 30,
            };
            let beam = beam_search(&s, &t, &u, &cfg).unwrap();
            let ex = exhaustive_retrieval(&s, &t, &u, 30).unwrap();
            assert_eq!(beam, ex);
            let (_, trace) = beam_search_traced(&s, &t, &u, &cfg).unwrap();
            for c in trace.iter().flatten() {
                assert_eq!(c.score.to_bits(), s.score_uncached(&u, c.node).to_bits());
            }
        }
    }

    #[test]
    fn leaf_start_is_single_round() {
        let (t, m, g) = setup(512, ModelConfig::default());
        let s = Scorer::new(&m, &g);
        let u = user(&t, &[1, 2]);
        let cfg = BeamConfig {
            start_level: 9,
            final_k: 10,
            ..Default::default()
        };
        let (r, trace) = beam_search_traced(&s, &t, &u, &cfg).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace[0].len(), 512);
        assert_eq!(r, exhaustive_retrieval(&s, &t, &u, 10).unwrap());
        let bad = BeamConfig {
            start_level: 10,
            ..cfg
        };
        assert!(beam_search(&s, &t, &u, &bad).is_err());
    }

    #[test]
    fn results_are_sorted_and_distinct() {
        let (t, m, g) = setup(300, ModelConfig::default());
        let s = Scorer::new(&m, &g);
        let u = user(&t, &[5, 6, 7, 8]);
        let r = beam_search(
            &s,
            &t,
            &u,
            &BeamConfig {
                start_level: 4,
                beam_width: 8,
                final_k: 12,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.items.len(), 12);
        assert!(r.items.windows(2).all(|w| w[0].1 >= w[1].1));
        let ids: HashSet<_> = r.item_ids().into_iter().collect();
        assert_eq!(ids.len(), 12);
        let ex = exhaustive_retrieval(&s, &t, &u, 1000).unwrap();
        assert_eq!(ex.items.len(), 300);
    }

    #[test]
    fn degenerate_multipath_matches_binary() {
        for mp in [false, true] {
            let (t, m, g) = setup(
                200,
                ModelConfig {
                    use_multipath_pf: mp,
                    ..Default::default()
                },
            );
            let s = Scorer::new(&m, &g);
            let mt = MultipathTree::binary(&t);
            let u = user(&t, &[10, 20, 30]);
            let cfg = BeamConfig {
                start_level: 3,
                beam_width: 6,
                multipath_quota: 6,
                final_k: 9,
            };
            assert_eq!(
                beam_search_multipath(&s, &mt, &u, &cfg).unwrap(),
                beam_search(&s, &t, &u, &cfg).unwrap()
            );
        }
    }

    #[test]
    fn multipath_scores_each_node_once_and_caches_match_paths() {
        let t = build_random_tree(&(0..64).collect::<Vec<_>>(), 2).unwrap();
        let seqs: Vec<_> = (0..20u64)
            .map(|u| crate::corpus::BehaviorSequence {
                user_id: u,
                events: (0..6)
                    .map(|k| crate::corpus::Event {
                        item_id: (u * 7 + k * 11) % 64,
                        timestamp: k,
                    })
                    .collect(),
            })
            .collect();
        let g = build_graph(&t, &seqs, GraphParams { start_level: 2, ..Default::default() }).unwrap();
        let mt = build_multipath(&t, &g, 3).unwrap();
        assert!(!mt.is_binary());
        let m = Model::new(
            ModelConfig {
                use_multipath_pf: true,
                ..Default::default()
            },
            t.num_node_ids(),
            5,
        )
        .unwrap();
        let s = Scorer::new(&m, &g);
        let u = user(&t, &[1, 9, 33]);
        let cfg = BeamConfig {
            start_level: 2,
            beam_width: 3,
            multipath_quota: 3,
            final_k: 5,
        };
        let (_, trace) = beam_search_multipath_traced(&s, &mt, &u, &cfg).unwrap();
        let max_gc = (0..t.num_node_ids() as u32).map(|i| mt.graph_children(NodeId(i)).len()).max().unwrap();
        for level in &trace[1..] {
            let ids: HashSet<_> = level.iter().map(|c| c.node).collect();
            assert_eq!(ids.len(), level.len());
            assert!(level.len() <= 3 * (2 + max_gc));
        }
        for c in trace.iter().flatten() {
            let cold = s.score_on_path(&u, c.node, c.parent, c.grandparent);
            assert_eq!(c.score.to_bits(), cold.to_bits());
        }
    }

    #[test]
    fn heap_consistency_bounds() {
        let (t, m, g) = setup(64, ModelConfig::default());
        let s = Scorer::new(&m, &g);
        let u = user(&t, &[1, 2, 3]);
        assert_eq!(heap_consistency_report(&s, &t, &u, &[5, 9], 0, 1).unwrap(), 1.0);
        assert_eq!(heap_consistency_report(&s, &t, &u, &[5, 9], 4, 16).unwrap(), 1.0);
        let f = heap_consistency_report(&s, &t, &u, &(0..64).collect::<Vec<_>>(), 6, 16).unwrap();
        assert_eq!(f, 0.25);
    }
}
