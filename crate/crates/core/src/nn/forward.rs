use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::kernels::{affine, axpy, fusion_input, prelu, softmax2};
use super::{Dense, Model};
use crate::features::UserFeatures;
use crate::graph::HierGraph;
use crate::tree::NodeId;

thread_local! {
    static SIGNS: RefCell<Option<Vec<bool>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns the sign pattern (`z > 0`) of every PReLU
/// pre-activation it evaluated on this thread, in evaluation order.
pub(crate) fn record_signs<T>(f: impl FnOnce() -> T) -> (T, Vec<bool>) {
    SIGNS.with(|s| *s.borrow_mut() = Some(Vec::new()));
    let out = f();
    let signs = SIGNS.with(|s| s.borrow_mut().take()).unwrap_or_default();
    (out, signs)
}

/// Input and pre-activation of one dense layer, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub(crate) struct LayerTape {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
}

/// Intermediates of one `v(n)` evaluation.
#[derive(Clone, Debug)]
pub(crate) struct ReprTape {
    pub node: NodeId,
    /// Group vectors; the last one is the target's graph embedding `τ`.
    pub groups: Vec<Vec<f64>>,
    pub gc: Vec<Vec<LayerTape>>,
    pub backbone: Vec<LayerTape>,
}

impl ReprTape {
    pub fn tau(&self) -> &[f64] {
        self.groups.last().expect("target group")
    }
}

/// What a child needs from the node that proposed it: the parent's backbone
/// output `v(pa)` and fused representation `v_f(pa)`. Fields the model's
/// flags do not use are left empty.
#[derive(Clone, Debug, PartialEq)]
pub struct ParentRepr {
    pub node: NodeId,
    pub v: Vec<f64>,
    pub vf: Vec<f64>,
}

/// `PReLU(W·Concat(a, a⊙b, b) + bias)` for a row-major `W`.
pub fn fusion_unit(w: &[f64], bias: &[f64], slope: f64, a: &[f64], b: &[f64]) -> Vec<f64> {
    let x = fusion_input(a, b);
    let mut out = vec![0.0; bias.len()];
    affine(w, bias, &x, &mut out);
    out.iter_mut().for_each(|z| *z = prelu(*z, slope));
    out
}

/// A model bound to the graph it reads neighbors from.
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub graph: &'a HierGraph,
    parent_evals: AtomicUsize,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, graph: &'a HierGraph) -> Self {
        Scorer {
            model,
            graph,
            parent_evals: AtomicUsize::new(0),
        }
    }

    /// Number of [`Scorer::parent_repr`] evaluations so far.
    pub fn parent_evaluations(&self) -> usize {
        self.parent_evals.load(Ordering::Relaxed)
    }

    fn d(&self) -> usize {
        self.model.config.embed_dim
    }

    pub(crate) fn dense(&self, d: &Dense, x: &[f64], tape: Option<&mut Vec<LayerTape>>) -> Vec<f64> {
        let p = &self.model.params;
        let mut pre = vec![0.0; d.rows];
        affine(&p[d.w..d.b], &p[d.b..d.b + d.rows], x, &mut pre);
        let out = match d.slope {
            Some(s) => {
                SIGNS.with(|rec| {
                    if let Some(v) = rec.borrow_mut().as_mut() {
                        v.extend(pre.iter().map(|&z| z > 0.0));
                    }
                });
                pre.iter().map(|&z| prelu(z, p[s])).collect()
            }
            None => pre.clone(),
        };
        if let Some(t) = tape {
            t.push(LayerTape {
                input: x.to_vec(),
                pre,
            });
        }
        out
    }

    fn mlp(&self, layers: &[Dense], x: Vec<f64>, mut tape: Option<&mut Vec<LayerTape>>) -> Vec<f64> {
        layers
            .iter()
            .fold(x, |h, d| self.dense(d, &h, tape.as_deref_mut()))
    }

    /// `Concat(Emb(n), Avg(Emb(Neigh(n))))`; the neighbor half is zero when
    /// the node has no neighbors or graph convolution is off.
    pub fn graph_embedding(&self, node: NodeId) -> Vec<f64> {
        let d = self.d();
        let mut ge = vec![0.0; 2 * d];
        ge[..d].copy_from_slice(self.model.embedding(node));
        if self.model.config.use_gc {
            let nbrs = self.graph.neighbors(node);
            if !nbrs.is_empty() {
                let w = 1.0 / nbrs.len() as f64;
                for n in nbrs {
                    axpy(w, self.model.embedding(n.node), &mut ge[d..]);
                }
            }
        }
        ge
    }

    fn window_average(&self, members: &[NodeId]) -> Vec<f64> {
        let mut avg = vec![0.0; 2 * self.d()];
        if members.is_empty() {
            return avg;
        }
        let w = 1.0 / members.len() as f64;
        for &m in members {
            axpy(w, &self.graph_embedding(m), &mut avg);
        }
        avg
    }

    /// Graph-convolution stage: fuses each window group and the target with
    /// the target and concatenates the group outputs.
    pub fn gc_stage(&self, windows: &[Vec<NodeId>], target: NodeId) -> Vec<f64> {
        self.gc_stage_taped(windows, target, None)
    }

    fn gc_stage_taped(
        &self,
        windows: &[Vec<NodeId>],
        target: NodeId,
        mut tape: Option<&mut ReprTape>,
    ) -> Vec<f64> {
        let layout = &self.model.layout;
        assert_eq!(
            windows.len(),
            self.model.config.num_windows,
            "user features have the wrong number of windows"
        );
        let tau = self.graph_embedding(target);
        let mut groups: Vec<Vec<f64>> = windows.iter().map(|w| self.window_average(w)).collect();
        groups.push(tau.clone());
        let mut out = Vec::with_capacity(self.model.config.backbone_input_dim());
        for g in &groups {
            let mut layer_tape = tape.as_ref().map(|_| Vec::new());
            let h = self.mlp(&layout.gc, fusion_input(g, &tau), layer_tape.as_mut());
            out.extend_from_slice(&h);
            if let (Some(t), Some(lt)) = (tape.as_deref_mut(), layer_tape) {
                t.gc.push(lt);
            }
        }
        if let Some(t) = tape {
            t.groups = groups;
        }
        out
    }

    pub fn backbone(&self, x: &[f64]) -> Vec<f64> {
        self.mlp(&self.model.layout.backbone, x.to_vec(), None)
    }

    /// Backbone output `v(n)` for the user's features on `node`'s level.
    pub fn repr(&self, user: &UserFeatures, node: NodeId) -> Vec<f64> {
        let x = self.gc_stage(user.level(node.level()), node);
        self.backbone(&x)
    }

    pub(crate) fn repr_taped(&self, user: &UserFeatures, node: NodeId) -> (Vec<f64>, ReprTape) {
        let mut tape = ReprTape {
            node,
            groups: Vec::new(),
            gc: Vec::new(),
            backbone: Vec::new(),
        };
        let x = self.gc_stage_taped(user.level(node.level()), node, Some(&mut tape));
        let v = self.mlp(&self.model.layout.backbone, x, Some(&mut tape.backbone));
        (v, tape)
    }

    pub(crate) fn fusion(
        &self,
        d: &Dense,
        a: &[f64],
        b: &[f64],
        tape: Option<&mut Vec<LayerTape>>,
    ) -> Vec<f64> {
        self.dense(d, &fusion_input(a, b), tape)
    }

    /// `v_f(n)`: parent fusion when enabled, otherwise `v(n)` itself. A
    /// missing parent (the root) is the zero vector.
    pub fn parent_fusion(&self, v: &[f64], v_parent: Option<&[f64]>) -> Vec<f64> {
        if !self.model.config.use_pf {
            return v.to_vec();
        }
        let zero = vec![0.0; v.len()];
        self.fusion(&self.model.layout.pf, v, v_parent.unwrap_or(&zero), None)
    }

    /// `ṽ_f(n)` from the node embedding and the parent's fused representation.
    pub fn multipath_parent_fusion(&self, h: &[f64], vf_parent: &[f64]) -> Vec<f64> {
        self.fusion(&self.model.layout.mpf, h, vf_parent, None)
    }

    pub fn head_logits(&self, z: &[f64]) -> [f64; 2] {
        let out = self.dense(&self.model.layout.head, z, None);
        [out[0], out[1]]
    }

    /// Parent-side computation for `node`, done once and shared by all of
    /// its children. `grand_v` is `v` of the node that proposed `node`.
    pub fn parent_repr(&self, user: &UserFeatures, node: NodeId, grand_v: Option<&[f64]>) -> ParentRepr {
        self.parent_evals.fetch_add(1, Ordering::Relaxed);
        let cfg = &self.model.config;
        let v = if cfg.needs_parent() {
            self.repr(user, node)
        } else {
            Vec::new()
        };
        let vf = if cfg.use_multipath_pf {
            self.parent_fusion(&v, grand_v)
        } else {
            Vec::new()
        };
        ParentRepr { node, v, vf }
    }

    /// `p̂(node|u)` given the parent representation (`None` at the root).
    pub fn score_with_parent(&self, user: &UserFeatures, node: NodeId, parent: Option<&ParentRepr>) -> f64 {
        softmax2(self.logits_with_parent(user, node, parent))[1]
    }

    pub fn logits_with_parent(
        &self,
        user: &UserFeatures,
        node: NodeId,
        parent: Option<&ParentRepr>,
    ) -> [f64; 2] {
        let cfg = &self.model.config;
        let z = if cfg.use_multipath_pf {
            let zero = vec![0.0; self.d()];
            let vf = parent.map_or(zero.as_slice(), |p| p.vf.as_slice());
            self.multipath_parent_fusion(self.model.embedding(node), vf)
        } else {
            let v = self.repr(user, node);
            self.parent_fusion(&v, parent.map(|p| p.v.as_slice()))
        };
        self.head_logits(&z)
    }

    /// Parent representation of `parent` along the chain `grandparent → parent`,
    /// computed from scratch.
    pub fn parent_repr_uncached(
        &self,
        user: &UserFeatures,
        parent: NodeId,
        grandparent: Option<NodeId>,
    ) -> ParentRepr {
        let grand_v = if self.model.config.needs_grandparent() {
            grandparent.map(|g| self.repr(user, g))
        } else {
            None
        };
        self.parent_repr(user, parent, grand_v.as_deref())
    }

    /// `p̂(node|u)` with parents taken from the binary tree and every
    /// representation recomputed.
    pub fn score_uncached(&self, user: &UserFeatures, node: NodeId) -> f64 {
        let parent = node.parent();
        self.score_on_path(user, node, parent, parent.and_then(NodeId::parent))
    }

    /// `p̂(node|u)` when reached through `parent`, itself reached through
    /// `grandparent`; nothing is cached.
    pub fn score_on_path(
        &self,
        user: &UserFeatures,
        node: NodeId,
        parent: Option<NodeId>,
        grandparent: Option<NodeId>,
    ) -> f64 {
        let repr = if self.model.config.needs_parent() {
            parent.map(|p| self.parent_repr_uncached(user, p, grandparent))
        } else {
            None
        };
        self.score_with_parent(user, node, repr.as_ref())
    }
}
