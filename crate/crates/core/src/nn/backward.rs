use serde::{Deserialize, Serialize};

use super::forward::{LayerTape, ReprTape, Scorer};
use super::kernels::{axpy, softmax2, softplus};
use super::Dense;
use crate::features::UserFeatures;
use crate::tree::NodeId;

/// One labelled node together with the path it was reached through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub node: NodeId,
    pub parent: Option<NodeId>,
    pub grandparent: Option<NodeId>,
    pub label: bool,
}

impl SampleSpec {
    /// A sample whose context follows the binary tree.
    pub fn binary(node: NodeId, label: bool) -> Self {
        let parent = node.parent();
        SampleSpec {
            node,
            parent,
            grandparent: parent.and_then(NodeId::parent),
            label,
        }
    }
}

/// Dense gradient with the same layout as the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients {
            values: vec![0.0; len],
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        axpy(1.0, &other.values, &mut self.values);
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|g| *g *= s);
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// `-log p̂(label)` from the two logits.
pub(crate) fn cross_entropy(logits: [f64; 2], label: bool) -> f64 {
    let (pos, neg) = if label {
        (logits[1], logits[0])
    } else {
        (logits[0], logits[1])
    };
    softplus(neg - pos)
}

impl Scorer<'_> {
    /// Cross-entropy of one sample.
    pub fn sample_loss(&self, user: &UserFeatures, spec: &SampleSpec) -> f64 {
        let parent = if self.model.config.needs_parent() {
            spec.parent
                .map(|p| self.parent_repr_uncached(user, p, spec.grandparent))
        } else {
            None
        };
        cross_entropy(self.logits_with_parent(user, spec.node, parent.as_ref()), spec.label)
    }

    /// Adds the gradient of one sample's cross-entropy to `grads` and
    /// returns the loss.
    pub fn accumulate_gradients(&self, user: &UserFeatures, spec: &SampleSpec, grads: &mut Gradients) -> f64 {
        let cfg = &self.model.config;
        let layout = &self.model.layout;
        let g = &mut grads.values;

        let parent = if cfg.needs_parent() { spec.parent } else { None };
        let parent_tape = parent.map(|p| self.repr_taped(user, p));

        let mut head_tape = Vec::new();
        let logits;
        if cfg.use_multipath_pf {
            let grand = if cfg.use_pf && parent.is_some() {
                spec.grandparent.map(|gp| self.repr_taped(user, gp))
            } else {
                None
            };
            let mut pf_tape = Vec::new();
            let vf_parent = match &parent_tape {
                Some((vp, _)) if cfg.use_pf => {
                    let zero = vec![0.0; vp.len()];
                    let vg = grand.as_ref().map_or(zero.as_slice(), |(v, _)| v.as_slice());
                    self.fusion(&layout.pf, vp, vg, Some(&mut pf_tape))
                }
                Some((vp, _)) => vp.clone(),
                None => vec![0.0; cfg.repr_dim()],
            };
            let mut mpf_tape = Vec::new();
            let z = self.fusion(&layout.mpf, self.model.embedding(spec.node), &vf_parent, Some(&mut mpf_tape));
            let out = self.dense(&layout.head, &z, Some(&mut head_tape));
            logits = [out[0], out[1]];
            let dz = self.head_backward(&head_tape[0], logits, spec.label, g);

            let dx = dense_backward(self.model.params(), &layout.mpf, &mpf_tape[0], &dz, g);
            let (demb, dvf) = split_fusion_grad(&dx, self.model.embedding(spec.node), &vf_parent);
            axpy(1.0, &demb, &mut g[layout.embedding(spec.node.index())]);
            if let Some((vp, ptape)) = &parent_tape {
                let dvp = if cfg.use_pf {
                    let dx = dense_backward(self.model.params(), &layout.pf, &pf_tape[0], &dvf, g);
                    let zero = vec![0.0; vp.len()];
                    let vg = grand.as_ref().map_or(zero.as_slice(), |(v, _)| v.as_slice());
                    let (dvp, dvg) = split_fusion_grad(&dx, vp, vg);
                    if let Some((_, gtape)) = &grand {
                        self.repr_backward(user, gtape, &dvg, g);
                    }
                    dvp
                } else {
                    dvf
                };
                self.repr_backward(user, ptape, &dvp, g);
            }
        } else {
            let (v, ntape) = self.repr_taped(user, spec.node);
            let mut pf_tape = Vec::new();
            let zero = vec![0.0; v.len()];
            let v_pa = parent_tape.as_ref().map_or(zero.as_slice(), |(vp, _)| vp.as_slice());
            let z = if cfg.use_pf {
                self.fusion(&layout.pf, &v, v_pa, Some(&mut pf_tape))
            } else {
                v.clone()
            };
            let out = self.dense(&layout.head, &z, Some(&mut head_tape));
            logits = [out[0], out[1]];
            let dz = self.head_backward(&head_tape[0], logits, spec.label, g);
            let dv = if cfg.use_pf {
                let dx = dense_backward(self.model.params(), &layout.pf, &pf_tape[0], &dz, g);
                let (dv, dvp) = split_fusion_grad(&dx, &v, v_pa);
                if let Some((_, ptape)) = &parent_tape {
                    self.repr_backward(user, ptape, &dvp, g);
                }
                dv
            } else {
                dz
            };
            self.repr_backward(user, &ntape, &dv, g);
        }
        cross_entropy(logits, spec.label)
    }

    fn head_backward(&self, tape: &LayerTape, logits: [f64; 2], label: bool, g: &mut [f64]) -> Vec<f64> {
        let p = softmax2(logits);
        let dlogits = [p[0] - f64::from(!label), p[1] - f64::from(label)];
        dense_backward(self.model.params(), &self.model.layout.head, tape, &dlogits, g)
    }

    /// Backpropagates `dv` through the backbone, the graph-convolution
    /// stage and the embeddings it read.
    fn repr_backward(&self, user: &UserFeatures, tape: &ReprTape, dv: &[f64], g: &mut [f64]) {
        let layout = &self.model.layout;
        let params = self.model.params();
        let mut dx = dv.to_vec();
        for (d, t) in layout.backbone.iter().zip(&tape.backbone).rev() {
            dx = dense_backward(params, d, t, &dx, g);
        }

        let out_dim = self.model.config.gc_hidden.last().copied().unwrap();
        let tau = tape.tau();
        let mut dtau = vec![0.0; tau.len()];
        let windows = user.level(tape.node.level());
        let last = tape.groups.len() - 1;
        for (k, (grp, gtape)) in tape.groups.iter().zip(&tape.gc).enumerate() {
            let mut dh = dx[k * out_dim..(k + 1) * out_dim].to_vec();
            for (d, t) in layout.gc.iter().zip(gtape).rev() {
                dh = dense_backward(params, d, t, &dh, g);
            }
            let (dg, dt) = split_fusion_grad(&dh, grp, tau);
            axpy(1.0, &dt, &mut dtau);
            if k == last {
                axpy(1.0, &dg, &mut dtau);
            } else if !windows[k].is_empty() {
                let w = 1.0 / windows[k].len() as f64;
                for &m in &windows[k] {
                    self.graph_embedding_backward(m, w, &dg, g);
                }
            }
        }
        self.graph_embedding_backward(tape.node, 1.0, &dtau, g);
    }

    fn graph_embedding_backward(&self, node: NodeId, scale: f64, dge: &[f64], g: &mut [f64]) {
        let layout = &self.model.layout;
        let d = self.model.config.embed_dim;
        axpy(scale, &dge[..d], &mut g[layout.embedding(node.index())]);
        if self.model.config.use_gc {
            let nbrs = self.graph.neighbors(node);
            if !nbrs.is_empty() {
                let w = scale / nbrs.len() as f64;
                for n in nbrs {
                    axpy(w, &dge[d..], &mut g[layout.embedding(n.node.index())]);
                }
            }
        }
    }
}

/// Accumulates weight, bias and slope gradients of one layer into `g` and
/// returns the gradient with respect to its input.
fn dense_backward(params: &[f64], d: &Dense, tape: &LayerTape, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
    let mut dz = dy.to_vec();
    if let Some(s) = d.slope {
        let slope = params[s];
        let mut ds = 0.0;
        for (dzi, &z) in dz.iter_mut().zip(&tape.pre) {
            if z <= 0.0 {
                ds += *dzi * z;
                *dzi *= slope;
            }
        }
        g[s] += ds;
    }
    let cols = d.cols;
    let mut dx = vec![0.0; cols];
    for (i, &dzi) in dz.iter().enumerate() {
        if dzi == 0.0 {
            continue;
        }
        let row = d.w + i * cols;
        axpy(dzi, &tape.input, &mut g[row..row + cols]);
        axpy(dzi, &params[row..row + cols], &mut dx);
        g[d.b + i] += dzi;
    }
    dx
}

/// Splits the gradient of `Concat(a, a⊙b, b)` into gradients for `a` and `b`.
fn split_fusion_grad(dx: &[f64], a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    debug_assert_eq!(dx.len(), 3 * n);
    let da = (0..n).map(|i| dx[i] + dx[n + i] * b[i]).collect();
    let db = (0..n).map(|i| dx[2 * n + i] + dx[n + i] * a[i]).collect();
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_matches_softmax() {
        for logits in [[0.3, -1.2], [5.0, 5.0], [-40.0, 3.0]] {
            let p = softmax2(logits);
            assert!((cross_entropy(logits, true) + p[1].ln()).abs() < 1e-12);
            assert!((cross_entropy(logits, false) + p[0].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_split_is_adjoint() {
        let a = [0.5, -2.0];
        let b = [3.0, 0.25];
        let dx = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (da, db) = split_fusion_grad(&dx, &a, &b);
        assert_eq!(da, vec![1.0 + 3.0 * 3.0, 2.0 + 4.0 * 0.25]);
        assert_eq!(db, vec![5.0 + 3.0 * 0.5, 6.0 - 4.0 * 2.0]);
    }

    #[test]
    fn binary_spec_follows_parents() {
        let s = SampleSpec::binary(NodeId(9), true);
        assert_eq!(s.parent, Some(NodeId(4)));
        assert_eq!(s.grandparent, Some(NodeId(1)));
        let r = SampleSpec::binary(NodeId(1), false);
        assert_eq!(r.grandparent, None);
    }
}
