//! Mini-batch training of the scorer on level-wise samples, and finetuning
//! on multipath training paths.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::derive_seed;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::features::ItemTracer;
use crate::graph::HierGraph;
use crate::multipath::{ItemPath, MultipathTree, PathTable};
use crate::nn::{Adam, Checkpoint, Gradients, LrSchedule, Model, OptimizerState, Scorer, TrainProgress};
use crate::sampler::{expand, pair_features, training_pairs, RatioTable, TrainPair};
use crate::tree::{NodeId, Tree};

/// Pairs whose gradients are summed together before the ordered reduction.
/// Fixed so that results do not depend on the number of workers.
const CHUNK_PAIRS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// (user, target) pairs per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub seed: u64,
    pub ratios: RatioTable,
    /// Keep only each user's latest targets.
    pub max_targets_per_user: Option<usize>,
    /// Stop after this many optimizer steps in total.
    pub max_iterations: Option<u64>,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 5,
            base_lr: 1e-3,
            decay: 0.9,
            decay_every: 2000,
            seed: 0,
            ratios: RatioTable::amazon(),
            max_targets_per_user: None,
            max_iterations: None,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Batch 20,000 and decay every 20,000 iterations over 15 epochs.
    pub fn amazon_preset() -> Self {
        TrainConfig {
            batch_size: 20_000,
            epochs: 15,
            decay_every: 20_000,
            ratios: RatioTable::amazon(),
            ..Default::default()
        }
    }

    /// Batch 30,000 and decay every 100,000 iterations over 4 epochs.
    pub fn userbehavior_preset() -> Self {
        TrainConfig {
            batch_size: 30_000,
            epochs: 4,
            decay_every: 100_000,
            ratios: RatioTable::userbehavior(),
            ..Default::default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.base_lr,
            decay_rate: self.decay,
            decay_every: self.decay_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.workers == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size, workers and decay_every must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean sample loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub iterations: u64,
    pub samples: u64,
    /// Pairs skipped for lack of earlier behavior.
    pub skipped_pairs: u64,
    pub wall_time_secs: f64,
    pub checkpoints: Vec<PathBuf>,
    /// Set when training stopped at `max_iterations` inside an epoch.
    pub interrupted: bool,
}

/// Optimizer state carried between runs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    pub progress: TrainProgress,
}

impl TrainState {
    pub fn fresh(model: &Model) -> Self {
        TrainState {
            adam: Adam::new(model.num_params()),
            progress: TrainProgress::default(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let adam = c
            .optimizer
            .as_ref()
            .map(|o| o.adam.clone())
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        Ok(TrainState {
            adam,
            progress: c.progress.clone(),
        })
    }

    pub fn checkpoint(&self, model: &Model, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::new(
            model,
            Some(OptimizerState {
                adam: self.adam.clone(),
                schedule: cfg.schedule(),
            }),
            self.progress.clone(),
            serde_json::to_value(cfg).expect("config serializes"),
        )
    }
}

/// Receives the checkpoint after every epoch and returns where it was
/// stored.
pub type EpochSink<'a> = dyn FnMut(&Checkpoint) -> Result<PathBuf> + 'a;

/// Stores each epoch's checkpoint as `epoch-NNN.json` in `dir`.
pub fn save_to_dir(dir: &Path) -> impl FnMut(&Checkpoint) -> Result<PathBuf> + '_ {
    move |c| {
        let path = dir.join(format!("epoch-{:03}.json", c.progress.epoch));
        c.save(&path)?;
        Ok(path)
    }
}

/// Where positives and behavior features come from.
#[derive(Clone, Copy)]
pub enum PathMode<'a> {
    Binary,
    Multipath {
        table: &'a PathTable,
        paths: &'a HashMap<TrainPair, Vec<NodeId>>,
    },
}

pub struct TrainInputs<'a> {
    pub tree: &'a Tree,
    pub graph: &'a HierGraph,
    pub dataset: &'a Dataset,
    pub mode: PathMode<'a>,
}

/// Trains from scratch on the binary tree.
pub fn train(model: &mut Model, tree: &Tree, graph: &HierGraph, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut state = TrainState::fresh(model);
    let inputs = TrainInputs {
        tree,
        graph,
        dataset,
        mode: PathMode::Binary,
    };
    run(model, &mut state, &inputs, cfg, None)
}

fn shuffled_pairs(pairs: &[TrainPair], seed: u64, epoch: usize) -> Vec<TrainPair> {
    let mut order = pairs.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 1, epoch as u64])));
    order
}

/// Runs (or resumes) training until `cfg.epochs` epochs are complete or
/// `cfg.max_iterations` is reached. `on_epoch` receives a checkpoint after
/// every completed epoch.
pub fn run(
    model: &mut Model,
    state: &mut TrainState,
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut EpochSink>,
) -> Result<TrainReport> {
    cfg.validate()?;
    cfg.ratios.check_tree(inputs.tree)?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let pairs = match inputs.mode {
        PathMode::Binary => training_pairs(inputs.dataset, cfg.max_targets_per_user),
        PathMode::Multipath { paths, .. } => {
            let mut p: Vec<TrainPair> = training_pairs(inputs.dataset, cfg.max_targets_per_user)
                .into_iter()
                .filter(|p| paths.contains_key(p))
                .collect();
            p.sort_by_key(|p| (p.user, p.target));
            p
        }
    };
    let schedule = cfg.schedule();
    let mut report = TrainReport {
        epoch_losses: state.progress.epoch_losses.clone(),
        iterations: state.progress.iteration,
        ..Default::default()
    };
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);

    while state.progress.epoch < cfg.epochs {
        let epoch = state.progress.epoch;
        let order = shuffled_pairs(&pairs, cfg.seed, epoch);
        while state.progress.step_in_epoch < steps_per_epoch {
            if cfg.max_iterations.is_some_and(|m| state.progress.iteration >= m) {
                report.interrupted = true;
                report.wall_time_secs = start.elapsed().as_secs_f64();
                return Ok(report);
            }
            let step = state.progress.step_in_epoch;
            let batch = &order[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(order.len())];
            let chunks: Vec<&[TrainPair]> = batch.chunks(CHUNK_PAIRS).collect();
            let model_ref: &Model = model;
            let results: Vec<Result<ChunkResult>> = pool.install(|| {
                chunks
                    .par_iter()
                    .map(|chunk| chunk_gradients(model_ref, inputs, cfg, epoch, chunk))
                    .collect()
            });
            let mut grads = Gradients::zeros(model.num_params());
            let mut loss = 0.0;
            let mut count = 0u64;
            for r in results {
                let r = r?;
                grads.add(&r.grads);
                loss += r.loss;
                count += r.samples;
                report.skipped_pairs += r.skipped;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    iteration: state.progress.iteration,
                    loss,
                });
            }
            if count > 0 {
                grads.scale(1.0 / count as f64);
                let lr = schedule.at(state.progress.iteration);
                state.adam.step(model.params_mut(), &grads.values, lr);
                if model.params().iter().any(|p| !p.is_finite()) {
                    return Err(Error::Diverged {
                        iteration: state.progress.iteration,
                        loss: f64::NAN,
                    });
                }
            }
            state.progress.iteration += 1;
            state.progress.step_in_epoch += 1;
            state.progress.partial_loss += loss;
            state.progress.partial_samples += count;
            report.samples += count;
            report.iterations = state.progress.iteration;
        }
        let mean = if state.progress.partial_samples > 0 {
            state.progress.partial_loss / state.progress.partial_samples as f64
        } else {
            0.0
        };
        log::info!("epoch {} mean loss {mean:.6}", epoch + 1);
        state.progress.epoch_losses.push(mean);
        report.epoch_losses.push(mean);
        state.progress.epoch += 1;
        state.progress.step_in_epoch = 0;
        state.progress.partial_loss = 0.0;
        state.progress.partial_samples = 0;
        if let Some(sink) = on_epoch.as_deref_mut() {
            report.checkpoints.push(sink(&state.checkpoint(model, cfg))?);
        }
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

struct ChunkResult {
    grads: Gradients,
    loss: f64,
    samples: u64,
    skipped: u64,
}

fn chunk_gradients(model: &Model, inputs: &TrainInputs, cfg: &TrainConfig, epoch: usize, chunk: &[TrainPair]) -> Result<ChunkResult> {
    let scorer = Scorer::new(model, inputs.graph);
    let mut out = ChunkResult {
        grads: Gradients::zeros(model.num_params()),
        loss: 0.0,
        samples: 0,
        skipped: 0,
    };
    for pair in chunk {
        let seq = &inputs.dataset.train_users[pair.user];
        let tracer: &dyn ItemTracer = match inputs.mode {
            PathMode::Binary => inputs.tree,
            PathMode::Multipath { table, .. } => table,
        };
        let Some(features) = pair_features(seq, pair.target, tracer)? else {
            out.skipped += 1;
            continue;
        };
        let path = match inputs.mode {
            PathMode::Binary => inputs.tree.binary_path(seq.events[pair.target].item_id)?,
            PathMode::Multipath { paths, .. } => paths[pair].clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            cfg.seed,
            2,
            epoch as u64,
            pair.user as u64,
            pair.target as u64,
        ]));
        for spec in expand(inputs.tree, &path, &cfg.ratios, &mut rng) {
            out.loss += scorer.accumulate_gradients(&features, &spec, &mut out.grads);
            out.samples += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// Switch the model to multipath parent fusion after paths are chosen.
    pub enable_multipath_pf: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            train: TrainConfig {
                epochs: 4,
                ..Default::default()
            },
            enable_multipath_pf: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub report: TrainReport,
    pub paths: Vec<ItemPath>,
    pub table: PathTable,
}

/// Chooses a best path for every training pair with the model as given,
/// derives each item's most frequent path for behavior features, then
/// trains on the chosen paths.
pub fn finetune_multipath(
    model: &mut Model,
    mtree: &MultipathTree,
    graph: &HierGraph,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let tree = mtree.tree();
    let pairs = training_pairs(dataset, cfg.train.max_targets_per_user);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?;
    let frozen = model.clone();
    let chosen: Vec<Result<Option<(TrainPair, ItemPath)>>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|pair| {
                let scorer = Scorer::new(&frozen, graph);
                let seq = &dataset.train_users[pair.user];
                let Some(features) = pair_features(seq, pair.target, tree)? else {
                    return Ok(None);
                };
                let p = mtree.best_path(&scorer, &features, seq.events[pair.target].item_id)?;
                Ok(Some((*pair, p)))
            })
            .collect()
    });
    let mut paths = Vec::new();
    let mut by_pair = HashMap::new();
    for c in chosen {
        if let Some((pair, p)) = c? {
            by_pair.insert(pair, p.nodes.clone());
            paths.push(p);
        }
    }
    let table = mtree.path_table(&paths)?;
    let changed = paths.iter().filter(|p| p.nodes != tree.binary_path(p.item_id).unwrap_or_default()).count();
    log::info!("{} of {} training paths leave the binary chain", changed, paths.len());

    if cfg.enable_multipath_pf {
        let c = model.config().clone();
        model.set_flags(c.use_gc, c.use_pf, true);
    }
    let mut state = TrainState::fresh(model);
    let inputs = TrainInputs {
        tree,
        graph,
        dataset,
        mode: PathMode::Multipath {
            table: &table,
            paths: &by_pair,
        },
    };
    let report = run(model, &mut state, &inputs, &cfg.train, None)?;
    Ok(FinetuneOutcome { report, paths, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, DatasetConfig, SyntheticConfig};
    use crate::graph::{build_graph, GraphParams};
    use crate::nn::{ModelConfig, SampleSpec};
    use crate::sampler::make_batch;
    use crate::tree::build_category_tree;

    pub(crate) fn small_world() -> (Dataset, Tree, HierGraph) {
        let records = generate_synthetic(&SyntheticConfig {
            num_items: 64,
            num_users: 30,
            num_clusters: 4,
            events_per_user: 12,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let ds = Dataset::build(
            &records,
            &DatasetConfig {
                num_test_users: 5,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let tree = build_category_tree(&ds.items_with_categories(), 0).unwrap();
        let graph = build_graph(
            &tree,
            &ds.train_users,
            GraphParams {
                start_level: 3,
                ..Default::default()
            },
        )
        .unwrap();
        (ds, tree, graph)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 2,
            base_lr: 3e-3,
            seed: 9,
            ratios: RatioTable::new(vec![0, 1, 1, 2, 2, 3, 3], 3).unwrap(),
            max_targets_per_user: Some(4),
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (ds, tree, graph) = small_world();
        let mut m = Model::new(ModelConfig::default(), tree.num_node_ids(), 1).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        let r = train(&mut m, &tree, &graph, &ds, &cfg).unwrap();
        assert_eq!(m, before);
        assert!(r.epoch_losses.is_empty());
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn single_positive_loss_is_negative_log_score() {
        let (ds, tree, graph) = small_world();
        let m = Model::new(ModelConfig::default(), tree.num_node_ids(), 1).unwrap();
        let s = Scorer::new(&m, &graph);
        let seq = &ds.train_users[0];
        let f = pair_features(seq, 3, &tree).unwrap().unwrap();
        let leaf = tree.leaf_of(seq.events[3].item_id).unwrap();
        let spec = SampleSpec::binary(leaf, true);
        let mut g = Gradients::zeros(m.num_params());
        let loss = s.accumulate_gradients(&f, &spec, &mut g);
        let p = s.score_uncached(&f, leaf);
        assert!((loss + p.ln()).abs() < 1e-12);
        assert_eq!(loss, s.sample_loss(&f, &spec));
    }

    #[test]
    fn zero_ratios_report_mean_positive_loss() {
        let (ds, tree, graph) = small_world();
        let mut m = Model::new(ModelConfig::default(), tree.num_node_ids(), 1).unwrap();
        let initial = m.clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 100_000,
            ratios: RatioTable::new(vec![0; 7], 3).unwrap(),
            ..small_cfg()
        };
        let r = train(&mut m, &tree, &graph, &ds, &cfg).unwrap();
        // Independent recomputation over the traced positives.
        let s = Scorer::new(&initial, &graph);
        let pairs = training_pairs(&ds, cfg.max_targets_per_user);
        let batch = make_batch(&ds, &pairs, &tree, &cfg.ratios, |_| ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for b in &batch {
            for spec in &b.samples {
                assert!(spec.label);
                total -= s.score_uncached(&b.features, spec.node).ln();
                n += 1;
            }
        }
        assert!((r.epoch_losses[0] - total / n as f64).abs() < 1e-9);
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let (ds, tree, graph) = small_world();
        let m = Model::new(ModelConfig::default(), tree.num_node_ids(), 2).unwrap();
        let pairs = training_pairs(&ds, Some(2));
        let cfg = small_cfg();
        let batch = make_batch(&ds, &pairs[..6], &tree, &cfg.ratios, |p| ChaCha8Rng::seed_from_u64(p.user as u64)).unwrap();
        let loss_of = |m: &Model| {
            let s = Scorer::new(m, &graph);
            batch.iter().flat_map(|b| b.samples.iter().map(move |x| (b, x))).map(|(b, x)| s.sample_loss(&b.features, x)).sum::<f64>()
        };
        let mut g = Gradients::zeros(m.num_params());
        {
            let s = Scorer::new(&m, &graph);
            for b in &batch {
                for x in &b.samples {
                    s.accumulate_gradients(&b.features, x, &mut g);
                }
            }
        }
        let mut stepped = m.clone();
        for (p, d) in stepped.params_mut().iter_mut().zip(&g.values) {
            *p -= 1e-5 * d;
        }
        assert!(loss_of(&stepped) < loss_of(&m));
    }

    #[test]
    fn deterministic_and_worker_independent() {
        let (ds, tree, graph) = small_world();
        let run_with = |workers| {
            let mut m = Model::new(ModelConfig::default(), tree.num_node_ids(), 4).unwrap();
            let r = train(&mut m, &tree, &graph, &ds, &TrainConfig { workers, ..small_cfg() }).unwrap();
            (m, r.epoch_losses)
        };
        let (a, la) = run_with(1);
        let (b, lb) = run_with(1);
        let (c, lc) = run_with(3);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a, c);
        assert_eq!(la, lc);
    }

    #[test]
    fn resume_reproduces_trajectory() {
        let (ds, tree, graph) = small_world();
        let cfg = small_cfg();
        let mut full = Model::new(ModelConfig::default(), tree.num_node_ids(), 4).unwrap();
        let full_report = train(&mut full, &tree, &graph, &ds, &cfg).unwrap();

        let mut part = Model::new(ModelConfig::default(), tree.num_node_ids(), 4).unwrap();
        let mut state = TrainState::fresh(&part);
        let inputs = TrainInputs {
            tree: &tree,
            graph: &graph,
            dataset: &ds,
            mode: PathMode::Binary,
        };
        let stop = full_report.iterations / 2 + 1;
        let r = run(&mut part, &mut state, &inputs, &TrainConfig { max_iterations: Some(stop), ..cfg.clone() }, None).unwrap();
        assert!(r.interrupted);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.json");
        state.checkpoint(&part, &cfg).save(&path).unwrap();

        let c = Checkpoint::load(&path).unwrap();
        let mut resumed = c.model().unwrap();
        let mut state = TrainState::from_checkpoint(&c).unwrap();
        let mut sink = save_to_dir(dir.path());
        let r = run(&mut resumed, &mut state, &inputs, &cfg, Some(&mut sink)).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(r.epoch_losses, full_report.epoch_losses);
        let last = r.checkpoints.last().unwrap();
        assert!(last.ends_with(format!("epoch-{:03}.json", cfg.epochs)));
        assert_eq!(Checkpoint::load(last).unwrap().model().unwrap(), full);
    }

    #[test]
    fn degenerate_finetune_matches_training() {
        let (ds, tree, graph) = small_world();
        let cfg = small_cfg();
        let pre = Model::new(ModelConfig::default(), tree.num_node_ids(), 6).unwrap();
        let mut a = pre.clone();
        train(&mut a, &tree, &graph, &ds, &cfg).unwrap();
        let mut b = pre.clone();
        let out = finetune_multipath(
            &mut b,
            &MultipathTree::binary(&tree),
            &graph,
            &ds,
            &FinetuneConfig {
                train: cfg,
                enable_multipath_pf: false,
            },
        )
        .unwrap();
        assert!(out.paths.iter().all(|p| p.nodes == tree.binary_path(p.item_id).unwrap()));
        assert_eq!(a, b);
    }
}
