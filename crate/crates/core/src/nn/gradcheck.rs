//! Central-difference check of the analytic gradients.

use std::collections::BTreeSet;

use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{Gradients, SampleSpec};
use super::forward::{record_signs, Scorer};
use super::{Model, ParamGroup};
use crate::error::{Error, Result};
use crate::features::UserFeatures;
use crate::graph::HierGraph;
use crate::tree::NodeId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Parameters drawn from each of the seven groups.
    pub per_group: usize,
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            per_group: 20,
            tolerance: 1e-5,
            scale_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub group: ParamGroup,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Parameters skipped because a perturbation crossed a PReLU kink.
    pub excluded: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.rel_error <= self.tolerance)
    }

    pub fn groups_covered(&self) -> BTreeSet<ParamGroup> {
        self.entries.iter().map(|e| e.group).collect()
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).count()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub(crate) fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

fn batch_loss(scorer: &Scorer, batch: &[(UserFeatures, SampleSpec)]) -> f64 {
    batch.iter().map(|(u, s)| scorer.sample_loss(u, s)).sum()
}

/// Nodes whose embeddings the batch reads.
fn referenced_nodes(graph: &HierGraph, batch: &[(UserFeatures, SampleSpec)]) -> BTreeSet<NodeId> {
    let mut nodes = BTreeSet::new();
    for (user, spec) in batch {
        for n in [Some(spec.node), spec.parent, spec.grandparent].into_iter().flatten() {
            nodes.insert(n);
            for w in user.level(n.level()) {
                nodes.extend(w.iter().copied());
            }
        }
    }
    let direct: Vec<NodeId> = nodes.iter().copied().collect();
    for n in direct {
        nodes.extend(graph.neighbor_ids(n));
    }
    nodes
}

/// Compares analytic gradients of the summed batch loss with central
/// differences at `h = 1e-6·max(1, |θ|)`. Samples whose `+h` and `−h`
/// evaluations take different PReLU branches are excluded and counted.
pub fn grad_check(
    model: &Model,
    graph: &HierGraph,
    batch: &[(UserFeatures, SampleSpec)],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient-check batch"));
    }
    let mut grads = Gradients::zeros(model.num_params());
    {
        let scorer = Scorer::new(model, graph);
        for (u, s) in batch {
            scorer.accumulate_gradients(u, s, &mut grads);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = model.config().embed_dim;
    let mut picks = Vec::new();
    for (group, range) in model.group_ranges() {
        if range.is_empty() {
            continue;
        }
        if group == ParamGroup::Embedding {
            // Mostly rows the batch touches, plus one untouched row if any.
            let touched: Vec<NodeId> = referenced_nodes(graph, batch).into_iter().collect();
            for _ in 0..cfg.per_group.saturating_sub(1) {
                let n = *touched.choose(&mut rng).expect("batch touches a node");
                picks.push(n.index() * d + index::sample(&mut rng, d, 1).index(0));
            }
            if let Some(n) = (0..model.num_nodes()).find(|&i| !touched.contains(&NodeId(i as u32))) {
                picks.push(n * d);
            }
        } else {
            let k = cfg.per_group.min(range.len());
            picks.extend(index::sample(&mut rng, range.len(), k).into_iter().map(|i| range.start + i));
        }
    }

    let mut work = model.clone();
    let mut entries = Vec::new();
    let mut excluded = 0;
    for idx in picks {
        let theta = model.params()[idx];
        let h = 1e-6 * theta.abs().max(1.0);
        work.params_mut()[idx] = theta + h;
        let (plus, s_plus) = record_signs(|| batch_loss(&Scorer::new(&work, graph), batch));
        work.params_mut()[idx] = theta - h;
        let (minus, s_minus) = record_signs(|| batch_loss(&Scorer::new(&work, graph), batch));
        work.params_mut()[idx] = theta;
        if s_plus != s_minus {
            excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.values[idx];
        entries.push(GradCheckEntry {
            index: idx,
            group: model.param_group(idx),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, cfg.scale_floor),
        });
    }
    Ok(GradCheckReport {
        entries,
        excluded,
        tolerance: cfg.tolerance,
    })
}
