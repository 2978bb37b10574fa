//! The context-aware node preference scorer.
//!
//! A node `n` on level `l` is scored for a user in four stages:
//!
//! 1. **Graph convolution.** Each node's graph embedding is its own embedding
//!    concatenated with the mean embedding of its graph neighbors. The user's
//!    behaviors (traced to level `l`) are averaged per time window, and each
//!    window vector `g` as well as the target's own graph embedding is fused
//!    with the target `τ` through `Concat(g, g⊙τ, τ)` and a shared two-layer
//!    MLP.
//! 2. **Backbone.** The concatenated group outputs pass through a PReLU MLP,
//!    giving the node representation `v(n)`.
//! 3. **Parent fusion.** `v_f(n) = PReLU(W·Concat(v(n), v(n)⊙v(pa), v(pa)) + b)`.
//!    The multipath variant fuses the raw node embedding with the parent's
//!    *fused* representation instead, so children never run the backbone.
//! 4. **Head.** A 2-way softmax whose second coordinate is `p̂(n|u)`.

mod backward;
mod checkpoint;
mod forward;
mod gradcheck;
pub mod kernels;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{Gradients, SampleSpec};
pub use checkpoint::{Checkpoint, OptimizerState, TrainProgress};
pub use forward::{fusion_unit, ParentRepr, Scorer};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use optim::{Adam, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub gc_hidden: Vec<usize>,
    pub backbone: Vec<usize>,
    pub group_len: usize,
    pub num_windows: usize,
    pub use_gc: bool,
    pub use_pf: bool,
    pub use_multipath_pf: bool,
    pub prelu_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 24,
            gc_hidden: vec![72, 24],
            backbone: vec![128, 64, 24],
            group_len: 11,
            num_windows: 10,
            use_gc: true,
            use_pf: true,
            use_multipath_pf: false,
            prelu_init: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim == 0 || self.gc_hidden.is_empty() || self.backbone.is_empty() {
            return fail("embed_dim, gc_hidden and backbone must be non-empty");
        }
        if self.gc_hidden.iter().chain(&self.backbone).any(|&d| d == 0) {
            return fail("layer widths must be positive");
        }
        if self.group_len != self.num_windows + 1 {
            return fail("group_len must equal num_windows + 1");
        }
        if *self.backbone.last().unwrap() != self.embed_dim {
            return fail("backbone output width must equal embed_dim");
        }
        if self.prelu_init <= 0.0 {
            return fail("prelu_init must be positive");
        }
        Ok(())
    }

    /// Width of a graph embedding: node half plus neighbor half.
    pub fn graph_embed_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn gc_input_dim(&self) -> usize {
        3 * self.graph_embed_dim()
    }

    pub fn backbone_input_dim(&self) -> usize {
        self.group_len * self.gc_hidden.last().unwrap()
    }

    pub fn repr_dim(&self) -> usize {
        *self.backbone.last().unwrap()
    }

    /// Whether scoring a node needs anything computed on its parent.
    pub fn needs_parent(&self) -> bool {
        self.use_pf || self.use_multipath_pf
    }

    /// Whether the parent's fused representation needs the grandparent.
    pub fn needs_grandparent(&self) -> bool {
        self.use_pf && self.use_multipath_pf
    }
}

/// Parameter groups, used for reporting and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Embedding,
    GcFusion,
    Backbone,
    ParentFusion,
    MultipathFusion,
    Head,
    PreluSlope,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Embedding,
        ParamGroup::GcFusion,
        ParamGroup::Backbone,
        ParamGroup::ParentFusion,
        ParamGroup::MultipathFusion,
        ParamGroup::Head,
        ParamGroup::PreluSlope,
    ];
}

/// One affine layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: usize,
    pub b: usize,
    /// Index of the PReLU slope, `None` for a linear layer.
    pub slope: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub embed_dim: usize,
    pub num_nodes: usize,
    pub gc: Vec<Dense>,
    pub backbone: Vec<Dense>,
    pub pf: Dense,
    pub mpf: Dense,
    pub head: Dense,
    /// `(group, start, end)` ranges covering the whole vector.
    pub groups: Vec<(ParamGroup, usize, usize)>,
    pub len: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig, num_nodes: usize) -> Layout {
        let mut offset = num_nodes * cfg.embed_dim;
        let mut groups = vec![(ParamGroup::Embedding, 0, offset)];
        let mut slopes = 0usize;
        let mut dense = |rows: usize, cols: usize, act: bool, offset: &mut usize| {
            let d = Dense {
                rows,
                cols,
                w: *offset,
                b: *offset + rows * cols,
                slope: act.then(|| {
                    slopes += 1;
                    slopes - 1
                }),
            };
            *offset += rows * cols + rows;
            d
        };

        let start = offset;
        let mut gc = Vec::new();
        let mut input = cfg.gc_input_dim();
        for &h in &cfg.gc_hidden {
            gc.push(dense(h, input, true, &mut offset));
            input = h;
        }
        groups.push((ParamGroup::GcFusion, start, offset));

        let start = offset;
        let mut backbone = Vec::new();
        let mut input = cfg.backbone_input_dim();
        for &h in &cfg.backbone {
            backbone.push(dense(h, input, true, &mut offset));
            input = h;
        }
        groups.push((ParamGroup::Backbone, start, offset));

        let r = cfg.repr_dim();
        let start = offset;
        let pf = dense(r, 3 * r, true, &mut offset);
        groups.push((ParamGroup::ParentFusion, start, offset));
        let start = offset;
        let mpf = dense(cfg.embed_dim, 3 * cfg.embed_dim, true, &mut offset);
        groups.push((ParamGroup::MultipathFusion, start, offset));
        let start = offset;
        let head = dense(2, cfg.embed_dim, false, &mut offset);
        groups.push((ParamGroup::Head, start, offset));

        // Slopes live in one block at the end.
        let slope_base = offset;
        let mut fix = |d: &mut Dense| {
            if let Some(s) = d.slope.as_mut() {
                *s += slope_base;
            }
        };
        let mut gc = gc;
        let mut backbone = backbone;
        let (mut pf, mut mpf) = (pf, mpf);
        gc.iter_mut().for_each(&mut fix);
        backbone.iter_mut().for_each(&mut fix);
        fix(&mut pf);
        fix(&mut mpf);
        groups.push((ParamGroup::PreluSlope, slope_base, slope_base + slopes));

        Layout {
            embed_dim: cfg.embed_dim,
            num_nodes,
            gc,
            backbone,
            pf,
            mpf,
            head,
            groups,
            len: slope_base + slopes,
        }
    }

    pub fn embedding(&self, node: usize) -> std::ops::Range<usize> {
        node * self.embed_dim..(node + 1) * self.embed_dim
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        self.groups
            .iter()
            .find(|&&(_, s, e)| (s..e).contains(&index))
            .map(|&(g, _, _)| g)
            .expect("index inside the parameter vector")
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.gc
            .iter()
            .chain(&self.backbone)
            .chain([&self.pf, &self.mpf, &self.head])
    }
}

/// Parameters of the scorer, stored as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    seed: u64,
}

impl Model {
    /// Fresh model with embeddings for `num_nodes` node ids. Embeddings are
    /// uniform in ±1/√d, weights He-normal, biases zero and PReLU slopes at
    /// `prelu_init`.
    pub fn new(config: ModelConfig, num_nodes: usize, seed: u64) -> Result<Model> {
        config.validate()?;
        let layout = Layout::new(&config, num_nodes);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.embed_dim as f64).sqrt();
        for p in &mut params[..num_nodes * config.embed_dim] {
            *p = rng.random_range(-bound..bound);
        }
        for d in layout.layers() {
            let normal = Normal::new(0.0, (2.0 / d.cols as f64).sqrt()).expect("positive std");
            for p in &mut params[d.w..d.w + d.rows * d.cols] {
                *p = normal.sample(&mut rng);
            }
            if let Some(s) = d.slope {
                params[s] = config.prelu_init;
            }
        }
        Ok(Model {
            config,
            layout,
            params,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_nodes(&self) -> usize {
        self.layout.num_nodes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_group(&self, index: usize) -> ParamGroup {
        self.layout.group_of(index)
    }

    /// Flat index range of each parameter group.
    pub fn group_ranges(&self) -> impl Iterator<Item = (ParamGroup, std::ops::Range<usize>)> + '_ {
        self.layout.groups.iter().map(|&(g, s, e)| (g, s..e))
    }

    /// Toggles the architecture flags. Parameters are shared across flag
    /// settings, so this only changes which layers are used.
    pub fn set_flags(&mut self, use_gc: bool, use_pf: bool, use_multipath_pf: bool) {
        self.config.use_gc = use_gc;
        self.config.use_pf = use_pf;
        self.config.use_multipath_pf = use_multipath_pf;
    }

    pub fn embedding(&self, node: crate::tree::NodeId) -> &[f64] {
        &self.params[self.layout.embedding(node.index())]
    }

    #[cfg(test)]
    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Named parameter arrays with their shapes, in storage order.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, std::ops::Range<usize>)> {
        let mut out = vec![(
            "embedding".to_string(),
            vec![self.layout.num_nodes, self.layout.embed_dim],
            0..self.layout.num_nodes * self.layout.embed_dim,
        )];
        let mut push = |name: String, d: &Dense| {
            out.push((format!("{name}.weight"), vec![d.rows, d.cols], d.w..d.b));
            out.push((format!("{name}.bias"), vec![d.rows], d.b..d.b + d.rows));
        };
        for (i, d) in self.layout.gc.iter().enumerate() {
            push(format!("gc.{i}"), d);
        }
        for (i, d) in self.layout.backbone.iter().enumerate() {
            push(format!("backbone.{i}"), d);
        }
        push("parent_fusion".into(), &self.layout.pf);
        push("multipath_fusion".into(), &self.layout.mpf);
        push("head".into(), &self.layout.head);
        let slopes = self
            .layout
            .groups
            .iter()
            .find(|g| g.0 == ParamGroup::PreluSlope)
            .map(|&(_, s, e)| s..e)
            .unwrap();
        out.push(("prelu_slopes".into(), vec![slopes.len()], slopes));
        out
    }

    /// Rebuilds a model from a config and a full parameter vector.
    pub fn from_params(config: ModelConfig, num_nodes: usize, seed: u64, params: Vec<f64>) -> Result<Model> {
        config.validate()?;
        let layout = Layout::new(&config, num_nodes);
        if params.len() != layout.len {
            return Err(Error::Inconsistent(format!(
                "expected {} parameters, found {}",
                layout.len,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Inconsistent("non-finite parameter".into()));
        }
        Ok(Model {
            config,
            layout,
            params,
            seed,
        })
    }
}
