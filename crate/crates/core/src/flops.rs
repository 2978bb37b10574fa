//! Per-sample multiply counts of prediction, analytic and instrumented.
//!
//! Only weight multiplies of dense layers are counted. Bias additions,
//! element-wise products inside fusion inputs and activations are left out.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::features::UserFeatures;
use crate::multipath::MultipathTree;
use crate::nn::kernels::{multiply_count, reset_multiply_count};
use crate::nn::{ModelConfig, Scorer};
use crate::tree::NodeId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub gc: u64,
    /// One entry per backbone layer.
    pub layers: Vec<u64>,
    pub head: u64,
    pub pf_increment: u64,
    /// Depends on the average graph-children count `k`.
    pub multipath_increment: f64,
    pub avg_k: f64,
    pub use_pf: bool,
    pub use_multipath_pf: bool,
}

impl CostBreakdown {
    /// Cost without parent fusion.
    pub fn baseline(&self) -> u64 {
        self.gc + self.layers.iter().sum::<u64>() + self.head
    }

    pub fn with_pf(&self) -> u64 {
        self.baseline() + self.pf_increment
    }

    pub fn with_multipath(&self) -> f64 {
        self.with_pf() as f64 + self.multipath_increment
    }

    /// Total for the configured flags.
    pub fn total(&self) -> f64 {
        let mut t = self.baseline() as f64;
        if self.use_pf {
            t += self.pf_increment as f64;
        }
        if self.use_multipath_pf {
            t += self.multipath_increment;
        }
        t
    }
}

/// Analytic multiply count for `config` with `group_len` fusion groups and
/// `avg_k` graph-children per parent.
pub fn count(config: &ModelConfig, group_len: usize, avg_k: f64) -> CostBreakdown {
    let mut gc = 0u64;
    let mut input = config.gc_input_dim();
    for &h in &config.gc_hidden {
        gc += (input * h) as u64;
        input = h;
    }
    gc *= group_len as u64;
    let mut layers = Vec::new();
    let mut input = group_len * config.gc_hidden.last().copied().unwrap_or(0);
    for &h in &config.backbone {
        layers.push((input * h) as u64);
        input = h;
    }
    let d = config.embed_dim as u64;
    let r = config.repr_dim() as u64;
    let head = d * 2;
    let fusion = 3 * d * d;
    CostBreakdown {
        gc,
        layers,
        head,
        pf_increment: 3 * r * r,
        multipath_increment: fusion as f64 * (avg_k + 2.0) + head as f64 * avg_k,
        avg_k,
        use_pf: config.use_pf,
        use_multipath_pf: config.use_multipath_pf,
    }
}

/// Increase over `base` in tenths of a percent, rounded half up.
pub fn increase_tenths(total: f64, base: u64) -> i64 {
    let diff = total - base as f64;
    ((2000.0 * diff + base as f64) / (2.0 * base as f64)).floor() as i64
}

pub fn format_percent(tenths: i64) -> String {
    let sign = if tenths < 0 { "-" } else { "+" };
    let t = tenths.abs();
    if t == 0 {
        return "+0%".into();
    }
    format!("{sign}{}.{}%", t / 10, t % 10)
}

fn format_count(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{}", x as i64)
    } else {
        format!("{x:.1}")
    }
}

/// The three-column cost table: baseline, with parent fusion, with
/// multipath.
pub fn format_table(c: &CostBreakdown) -> String {
    let mut rows: Vec<[String; 4]> = Vec::new();
    rows.push(["Component".into(), "Baseline".into(), "+PF".into(), "+Multipath".into()]);
    rows.push(["GC Layer".into(), c.gc.to_string(), String::new(), String::new()]);
    for (i, l) in c.layers.iter().enumerate() {
        rows.push([format!("Layer{}", i + 1), l.to_string(), String::new(), String::new()]);
    }
    rows.push(["Softmax Layer".into(), c.head.to_string(), String::new(), String::new()]);
    rows.push(["+PF Layer".into(), String::new(), format!("+{}", c.pf_increment), String::new()]);
    rows.push([
        "+Multipath".into(),
        String::new(),
        String::new(),
        format!("+{}", format_count(c.multipath_increment)),
    ]);
    let base = c.baseline();
    rows.push([
        "Total".into(),
        base.to_string(),
        c.with_pf().to_string(),
        format!("{} (avg_k={})", format_count(c.with_multipath()), format_count(c.avg_k)),
    ]);
    rows.push([
        "Increase".into(),
        "+0%".into(),
        format_percent(increase_tenths(c.with_pf() as f64, base)),
        format_percent(increase_tenths(c.with_multipath(), base)),
    ]);
    let widths: Vec<usize> = (0..4).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (cell, w))| if j == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// Mean graph-children count over nodes that have any, overall and per
/// level of the parent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AvgK {
    pub overall: f64,
    pub per_level: BTreeMap<usize, f64>,
}

pub fn measure_avg_k(mtree: &MultipathTree) -> AvgK {
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let tree = mtree.tree();
    for level in 0..tree.max_level() {
        for node in tree.level_nodes(level) {
            let k = mtree.graph_children(node).len();
            if k > 0 {
                let e = per.entry(level).or_insert((0, 0));
                e.0 += k;
                e.1 += 1;
            }
        }
    }
    let (edges, nodes) = per.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    AvgK {
        overall: if nodes == 0 { 0.0 } else { edges as f64 / nodes as f64 },
        per_level: per.into_iter().map(|(l, (e, n))| (l, e as f64 / n as f64)).collect(),
    }
}

/// Multiplies performed on this thread by the prediction work the table
/// charges to one sample: scoring `node` in full under the model's
/// graph-convolution and parent-fusion flags and, with multipath parent
/// fusion on, fusing each of the `original` and `graph` children with the
/// node's fused representation and applying the head to the graph
/// children. The representation of `node`'s parent is computed beforehand
/// and not counted, as it is shared by the whole level.
pub fn empirical_multiply_counter(
    scorer: &Scorer,
    user: &UserFeatures,
    node: NodeId,
    original: &[NodeId],
    graph: &[NodeId],
) -> u64 {
    let cfg = scorer.model.config();
    let parent_v = if cfg.use_pf {
        node.parent().map(|p| scorer.repr(user, p))
    } else {
        None
    };
    reset_multiply_count();
    let v = scorer.repr(user, node);
    let vf = scorer.parent_fusion(&v, parent_v.as_deref());
    scorer.head_logits(&vf);
    if cfg.use_multipath_pf {
        for &c in original {
            scorer.multipath_parent_fusion(scorer.model.embedding(c), &vf);
        }
        for &c in graph {
            let h = scorer.multipath_parent_fusion(scorer.model.embedding(c), &vf);
            scorer.head_logits(&h);
        }
    }
    multiply_count()
}

/// Multiplies of one beam expansion as the search performs it: the
/// parent-side representation of `node` followed by scoring every child.
pub fn expansion_multiply_count(scorer: &Scorer, user: &UserFeatures, node: NodeId, children: &[NodeId]) -> u64 {
    let cfg = scorer.model.config();
    let grand_v = if cfg.needs_grandparent() {
        node.parent().map(|p| scorer.repr(user, p))
    } else {
        None
    };
    reset_multiply_count();
    let repr = scorer.parent_repr(user, node, grand_v.as_deref());
    for &c in children {
        scorer.score_with_parent(user, c, Some(&repr));
    }
    multiply_count()
}
