//! The run configuration: one JSON document with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use treebeam::artifact::derive_seed;
use treebeam::corpus::{DatasetConfig, SyntheticConfig};
use treebeam::graph::GraphParams;
use treebeam::multipath::DEFAULT_MAX_EXTRA_PARENTS;
use treebeam::nn::ModelConfig;
use treebeam::retrieval::BeamConfig;
use treebeam::sampler::RatioTable;
use treebeam::trainer::TrainConfig;
use treebeam::tree::TreeKind;

use crate::failure::Failure;

/// Artifact locations. Relative paths resolve against `work_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub work_dir: PathBuf,
    pub records: PathBuf,
    pub dataset: PathBuf,
    pub tree: PathBuf,
    pub graph: PathBuf,
    pub multipath: PathBuf,
    pub checkpoints: PathBuf,
    pub model: PathBuf,
    pub finetuned: PathBuf,
    pub item_paths: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            work_dir: "run".into(),
            records: "records.csv".into(),
            dataset: "dataset.json".into(),
            tree: "tree.json".into(),
            graph: "graph.json".into(),
            multipath: "multipath.json".into(),
            checkpoints: "checkpoints".into(),
            model: "model.json".into(),
            finetuned: "finetuned.json".into(),
            item_paths: "item-paths.json".into(),
            outputs: "out".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.work_dir.join(p)
        }
    }
}

/// Where `ingest` reads behaviors from. Without a path it reads the
/// records written by `synth`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogInput {
    pub path: Option<PathBuf>,
    pub has_header: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every stream of randomness derives from this seed. The `seed`
    /// fields inside sections are overwritten.
    pub seed: u64,
    /// Defaults to the machine's parallelism.
    pub workers: Option<usize>,
    pub paths: Paths,
    pub synthetic: SyntheticConfig,
    pub log: LogInput,
    pub dataset: DatasetConfig,
    pub tree_kind: TreeKind,
    pub graph: GraphParams,
    pub max_extra_parents: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune_epochs: usize,
    pub beam: BeamConfig,
    pub itemcf_neighbors: usize,
    pub gradcheck_per_group: usize,
}

/// Sampling table for the 1,024-item desk corpus: one to four negatives on
/// the four deepest levels.
pub fn desk_ratios() -> RatioTable {
    let mut x = vec![0; 11];
    x[7..].copy_from_slice(&[1, 2, 3, 4]);
    RatioTable::new(x, 7).expect("valid table")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            workers: None,
            paths: Paths::default(),
            synthetic: SyntheticConfig::default(),
            log: LogInput::default(),
            dataset: DatasetConfig {
                num_test_users: 50,
                ..Default::default()
            },
            tree_kind: TreeKind::Random,
            graph: GraphParams::default(),
            max_extra_parents: DEFAULT_MAX_EXTRA_PARENTS,
            model: ModelConfig::default(),
            train: TrainConfig {
                batch_size: 32,
                base_lr: 3e-3,
                ratios: desk_ratios(),
                max_targets_per_user: Some(2),
                ..Default::default()
            },
            finetune_epochs: 1,
            beam: BeamConfig::default(),
            itemcf_neighbors: 50,
            gradcheck_per_group: 100,
        }
    }
}

/// Stages whose configuration is stamped into their artifacts. Each stage
/// covers its own section and those of the stages it reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Tree,
    Graph,
    Multipath,
    Model,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Tree => "tree",
            Stage::Graph => "graph",
            Stage::Multipath => "multipath",
            Stage::Model => "model",
            Stage::Finetune => "finetune",
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Value, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("config {} is not valid JSON: {e}", path.display())))
    }

    /// Parses a JSON document, applying `overrides` (`dotted.key=value`)
    /// first. Values parse as JSON, falling back to a plain string.
    /// Partial sections are filled from the run defaults, not the library
    /// defaults of the section type.
    pub fn from_value(user: Value, overrides: &[String]) -> Result<RunConfig, Failure> {
        let mut doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
        merge(&mut doc, user);
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Failure::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Failure::Config(format!("invalid configuration: {e}")))?;
        cfg.derive_seeds();
        Ok(cfg)
    }

    fn derive_seeds(&mut self) {
        self.synthetic.seed = derive_seed(&[self.seed, 1]);
        self.dataset.seed = derive_seed(&[self.seed, 2]);
        self.train.seed = derive_seed(&[self.seed, 5]);
    }

    pub fn tree_seed(&self) -> u64 {
        derive_seed(&[self.seed, 3])
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(&[self.seed, 4])
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.paths.resolve(p)
    }

    fn sections(&self, stage: Stage) -> Vec<Value> {
        let mut train = self.train.clone();
        train.workers = 1;
        let data = vec![j(&self.seed), j(&self.synthetic), j(&self.log), j(&self.dataset)];
        let tree = [data.clone(), vec![j(&self.tree_kind)]].concat();
        let graph = [tree.clone(), vec![j(&self.graph)]].concat();
        let multipath = [graph.clone(), vec![j(&self.max_extra_parents)]].concat();
        let model = [graph.clone(), vec![j(&self.model), j(&train)]].concat();
        match stage {
            Stage::Data => data,
            Stage::Tree => tree,
            Stage::Graph => graph,
            Stage::Multipath => multipath,
            Stage::Model => model,
            Stage::Finetune => [model, vec![j(&self.max_extra_parents), j(&self.finetune_epochs)]].concat(),
        }
    }

    /// Hex digest of the configuration that determines `stage`.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let doc = serde_json::to_vec(&(stage.name(), self.sections(stage))).expect("config serializes");
        hex::encode(&Sha256::digest(&doc)[..12])
    }

    /// Digest of the whole configuration.
    pub fn hash(&self) -> String {
        let doc = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&doc)[..12])
    }
}

fn j<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), Failure> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Failure::Config(format!("empty segment in override key {key:?}")));
        }
        let map = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => return Err(Failure::Config(format!("{key:?}: {part:?} is inside a non-object value"))),
        };
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = map.entry((*part).to_string()).or_insert(Value::Null);
    }
    Ok(())
}
