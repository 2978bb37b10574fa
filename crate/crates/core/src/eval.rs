//! Candidate-set metrics, the Item-CF baseline and the ablation runner.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::derive_seed;
use crate::corpus::{BehaviorSequence, Dataset, ItemId, NUM_WINDOWS};
use crate::error::{Error, Result};
use crate::features::{ItemTracer, UserFeatures};
use crate::graph::{build_graph, GraphParams, HierGraph};
use crate::multipath::{build_multipath, MultipathTree, DEFAULT_MAX_EXTRA_PARENTS};
use crate::nn::{Model, ModelConfig, Scorer};
use crate::retrieval::{retrieve_all, BeamConfig, RetrievalIndex, RetrievalResult};
use crate::trainer::{finetune_multipath, train, FinetuneConfig, TrainConfig};
use crate::tree::{build_tree, Tree, TreeKind};

/// Metrics of one user, kept as integer counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub hits: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl UserMetrics {
    pub fn precision(&self) -> f64 {
        ratio(self.hits, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.hits, self.truth)
    }

    /// Zero when precision and recall are both zero.
    pub fn f_measure(&self) -> f64 {
        if self.hits == 0 {
            return 0.0;
        }
        // 2PR/(P+R) with P = h/m and R = h/t reduces to 2h/(m+t).
        ratio(2 * self.hits, self.predicted + self.truth)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores `predicted` against `truth`. Repeated predictions count once.
pub fn metrics(predicted: &[ItemId], truth: &BTreeSet<ItemId>) -> UserMetrics {
    let set: BTreeSet<ItemId> = predicted.iter().copied().collect();
    UserMetrics {
        hits: set.intersection(truth).count(),
        predicted: set.len(),
        truth: truth.len(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// Users averaged over.
    pub users: usize,
    /// Users left out because their ground truth is empty.
    pub skipped_users: usize,
    pub per_user: Vec<UserMetrics>,
}

/// Order-independent mean: the values are sorted before summing.
fn mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// User-averaged metrics of `predictions[i]` against `truths[i]`.
pub fn evaluate(predictions: &[Vec<ItemId>], truths: &[&BTreeSet<ItemId>]) -> Result<MetricsReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Inconsistent(format!(
            "{} predictions for {} users",
            predictions.len(),
            truths.len()
        )));
    }
    let mut per_user = Vec::with_capacity(predictions.len());
    let mut skipped = 0;
    for (p, t) in predictions.iter().zip(truths) {
        if t.is_empty() {
            skipped += 1;
        } else {
            per_user.push(metrics(p, t));
        }
    }
    Ok(MetricsReport {
        precision: mean(per_user.iter().map(UserMetrics::precision).collect()),
        recall: mean(per_user.iter().map(UserMetrics::recall).collect()),
        f_measure: mean(per_user.iter().map(UserMetrics::f_measure).collect()),
        users: per_user.len(),
        skipped_users: skipped,
        per_user,
    })
}

/// Evaluates against the dataset's test users, in order.
pub fn evaluate_dataset(predictions: &[Vec<ItemId>], dataset: &Dataset) -> Result<MetricsReport> {
    let truths: Vec<&BTreeSet<ItemId>> = dataset.test_users.iter().map(|u| &u.ground_truth).collect();
    evaluate(predictions, &truths)
}

/// Features of every test user traced with `tracer`.
pub fn test_features(dataset: &Dataset, tracer: &(impl ItemTracer + ?Sized)) -> Result<Vec<UserFeatures>> {
    dataset
        .test_users
        .iter()
        .map(|u| UserFeatures::from_sequence(&u.features, NUM_WINDOWS, tracer))
        .collect()
}

pub fn format_report(label: &str, r: &MetricsReport) -> String {
    format!(
        "{label}: precision {:.2}%  recall {:.2}%  f-measure {:.2}%  ({} users, {} skipped)",
        100.0 * r.precision,
        100.0 * r.recall,
        100.0 * r.f_measure,
        r.users,
        r.skipped_users
    )
}

/// `k` items drawn uniformly without replacement, skipping the history.
pub fn random_retrieve(items: &[ItemId], history: &BehaviorSequence, k: usize, seed: u64) -> Vec<ItemId> {
    let behaved: BTreeSet<ItemId> = history.items().collect();
    let pool: Vec<ItemId> = items.iter().copied().filter(|i| !behaved.contains(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.choose_multiple(&mut rng, k.min(pool.len())).copied().collect()
}

/// Item-to-item cosine similarities over binary user incidence, truncated
/// to the top `n_neighbors` of each item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemCFModel {
    pub n_neighbors: usize,
    /// Descending similarity, ties by ascending item id.
    pub neighbors: BTreeMap<ItemId, Vec<(ItemId, f64)>>,
}

pub fn itemcf_fit(sequences: &[BehaviorSequence], n_neighbors: usize) -> ItemCFModel {
    let mut users_of: HashMap<ItemId, usize> = HashMap::new();
    let mut co: HashMap<(ItemId, ItemId), usize> = HashMap::new();
    for seq in sequences {
        let items: Vec<ItemId> = seq.items().collect::<BTreeSet<_>>().into_iter().collect();
        for (i, &a) in items.iter().enumerate() {
            *users_of.entry(a).or_insert(0) += 1;
            for &b in &items[i + 1..] {
                *co.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    let mut lists: BTreeMap<ItemId, Vec<(ItemId, f64)>> = users_of.keys().map(|&i| (i, Vec::new())).collect();
    for (&(a, b), &c) in &co {
        let sim = c as f64 / ((users_of[&a] * users_of[&b]) as f64).sqrt();
        lists.get_mut(&a).expect("seen item").push((b, sim));
        lists.get_mut(&b).expect("seen item").push((a, sim));
    }
    for l in lists.values_mut() {
        l.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        l.truncate(n_neighbors);
    }
    ItemCFModel {
        n_neighbors,
        neighbors: lists,
    }
}

/// Top `k` unbehaved items by summed similarity to the user's behaviors.
pub fn itemcf_retrieve(model: &ItemCFModel, history: &BehaviorSequence, k: usize) -> RetrievalResult {
    let behaved: BTreeSet<ItemId> = history.items().collect();
    let mut scores: BTreeMap<ItemId, f64> = BTreeMap::new();
    for b in &behaved {
        for &(c, s) in model.neighbors.get(b).map_or(&[][..], Vec::as_slice) {
            if !behaved.contains(&c) {
                *scores.entry(c).or_insert(0.0) += s;
            }
        }
    }
    let mut items: Vec<(ItemId, f64)> = scores.into_iter().collect();
    items.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    items.truncate(k);
    RetrievalResult { items }
}

/// A model row of the ablation table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub use_gc: bool,
    pub use_pf: bool,
}

impl AblationRow {
    fn new(label: &str, use_gc: bool, use_pf: bool) -> Self {
        AblationRow {
            label: label.into(),
            use_gc,
            use_pf,
        }
    }

    /// DNN and DNN-PF, then the context-aware variants.
    pub fn standard() -> Vec<AblationRow> {
        vec![
            Self::new("DNN", false, false),
            Self::new("DNN-PF", false, true),
            Self::new("ConTDM-GC", true, false),
            Self::new("ConTDM-PF", false, true),
            Self::new("ConTDM", true, true),
        ]
    }
}

pub const ABLATION_COLUMNS: [&str; 3] = ["Baseline", "4k", "multipath"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub rows: Vec<AblationRow>,
    /// Dimensions and initialisation shared by every row.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    pub graph: GraphParams,
    pub max_extra_parents: usize,
    /// The baseline column uses `beam_width`; the doubled-quota and
    /// multipath columns use `multipath_quota`.
    pub beam: BeamConfig,
    pub seed: u64,
    pub workers: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            rows: AblationRow::standard(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune_epochs: 1,
            graph: GraphParams::default(),
            max_extra_parents: DEFAULT_MAX_EXTRA_PARENTS,
            beam: BeamConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub row: String,
    pub column: String,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub tree_kind: TreeKind,
    pub metric_at: usize,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, row: &str, column: &str) -> Option<&MetricsReport> {
        self.cells.iter().find(|c| c.row == row && c.column == column).map(|c| &c.report)
    }

    fn rows(&self) -> Vec<&str> {
        let mut rows: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !rows.contains(&c.row.as_str()) {
                rows.push(&c.row);
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tree_index,model");
        for col in ABLATION_COLUMNS {
            let _ = write!(out, ",{col}_precision,{col}_recall,{col}_f_measure");
        }
        out.push('\n');
        for row in self.rows() {
            let _ = write!(out, "{},{row}", self.tree_kind);
            for col in ABLATION_COLUMNS {
                match self.cell(row, col) {
                    Some(r) => {
                        let _ = write!(out, ",{:.6},{:.6},{:.6}", r.precision, r.recall, r.f_measure);
                    }
                    None => out.push_str(",,,"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn format_text(&self) -> String {
        let mut out = format!("{} tree, metrics @{}\n", self.tree_kind, self.metric_at);
        let _ = write!(out, "{:<10}", "Model");
        for col in ABLATION_COLUMNS {
            let _ = write!(out, " | {:^26}", col);
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "");
        for _ in ABLATION_COLUMNS {
            let _ = write!(out, " | {:>8}{:>9}{:>9}", "P", "R", "F");
        }
        out.push('\n');
        for row in self.rows() {
            let _ = write!(out, "{row:<10}");
            for col in ABLATION_COLUMNS {
                match self.cell(row, col) {
                    Some(r) => {
                        let _ = write!(
                            out,
                            " | {:>7.2}%{:>8.2}%{:>8.2}%",
                            100.0 * r.precision,
                            100.0 * r.recall,
                            100.0 * r.f_measure
                        );
                    }
                    None => {
                        let _ = write!(out, " | {:>26}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// The shared inputs of every ablation cell.
pub struct AblationWorld {
    pub tree: Tree,
    pub graph: HierGraph,
    pub mtree: MultipathTree,
}

impl AblationWorld {
    pub fn build(dataset: &Dataset, kind: TreeKind, cfg: &AblationConfig) -> Result<Self> {
        let tree = build_tree(kind, dataset, derive_seed(&[cfg.seed, 10]))?;
        let mut params = cfg.graph;
        params.start_level = params.start_level.min(tree.max_level());
        let graph = build_graph(&tree, &dataset.train_users, params)?;
        let mtree = build_multipath(&tree, &graph, cfg.max_extra_parents)?;
        Ok(AblationWorld { tree, graph, mtree })
    }
}

fn predict(
    model: &Model,
    graph: &HierGraph,
    index: &RetrievalIndex,
    users: &[UserFeatures],
    beam: &BeamConfig,
    workers: usize,
) -> Result<Vec<Vec<ItemId>>> {
    let scorer = Scorer::new(model, graph);
    let results = retrieve_all(&scorer, index, users, beam, workers)?;
    Ok(results.iter().map(RetrievalResult::item_ids).collect())
}

/// Trains every row on the same tree, graph and split and fills the
/// baseline, doubled-quota and multipath columns. Rows with identical flags
/// share their results.
pub fn ablation_run(dataset: &Dataset, kind: TreeKind, cfg: &AblationConfig) -> Result<AblationTable> {
    let world = AblationWorld::build(dataset, kind, cfg)?;
    let tree = &world.tree;
    let mut beam = cfg.beam;
    beam.validate()?;
    beam.start_level = beam.start_level.min(tree.max_level());
    let wide = BeamConfig {
        beam_width: beam.multipath_quota,
        ..beam
    };
    let binary_users = test_features(dataset, tree)?;
    let mut train_cfg = cfg.train.clone();
    if train_cfg.ratios.max_level() > tree.max_level() {
        train_cfg.ratios = train_cfg.ratios.truncated(tree.max_level())?;
    }
    let finetune = FinetuneConfig {
        train: TrainConfig {
            epochs: cfg.finetune_epochs,
            ..train_cfg.clone()
        },
        enable_multipath_pf: true,
    };

    let mut done: HashMap<(bool, bool), [MetricsReport; 3]> = HashMap::new();
    let mut cells = Vec::new();
    for row in &cfg.rows {
        let key = (row.use_gc, row.use_pf);
        if !done.contains_key(&key) {
            log::info!("ablation row {}", row.label);
            let mut mc = cfg.model.clone();
            mc.use_gc = row.use_gc;
            mc.use_pf = row.use_pf;
            mc.use_multipath_pf = false;
            let mut model = Model::new(mc, tree.num_node_ids(), derive_seed(&[cfg.seed, 11]))?;
            train(&mut model, tree, &world.graph, dataset, &train_cfg)?;
            let binary = RetrievalIndex::Binary(tree);
            let base = predict(&model, &world.graph, &binary, &binary_users, &beam, cfg.workers)?;
            let doubled = predict(&model, &world.graph, &binary, &binary_users, &wide, cfg.workers)?;
            let outcome = finetune_multipath(&mut model, &world.mtree, &world.graph, dataset, &finetune)?;
            let mp_users = test_features(dataset, &outcome.table)?;
            let multi = RetrievalIndex::Multipath(&world.mtree);
            let mp = predict(&model, &world.graph, &multi, &mp_users, &beam, cfg.workers)?;
            done.insert(
                key,
                [
                    evaluate_dataset(&base, dataset)?,
                    evaluate_dataset(&doubled, dataset)?,
                    evaluate_dataset(&mp, dataset)?,
                ],
            );
        }
        for (col, report) in ABLATION_COLUMNS.iter().zip(&done[&key]) {
            cells.push(AblationCell {
                row: row.label.clone(),
                column: (*col).to_string(),
                report: report.clone(),
            });
        }
    }
    Ok(AblationTable {
        tree_kind: kind,
        metric_at: beam.final_k,
        cells,
    })
}
