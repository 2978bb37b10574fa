use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Adam, LrSchedule};
use super::{Model, ModelConfig};
use crate::artifact::{self, Versioned};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub adam: Adam,
    pub schedule: LrSchedule,
}

/// Where training stopped: `iteration` counts optimizer steps overall,
/// `epoch` the epochs already completed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epoch: usize,
    pub iteration: u64,
    pub step_in_epoch: usize,
    pub epoch_losses: Vec<f64>,
    /// Loss sum and sample count of the epoch in progress.
    pub partial_loss: f64,
    pub partial_samples: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub num_nodes: usize,
    pub model: ModelConfig,
    /// Free-form training configuration recorded alongside the weights.
    pub train_config: serde_json::Value,
    pub arrays: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
    pub progress: TrainProgress,
    /// SHA-256 over the little-endian bytes of every array and moment.
    pub checksum: String,
}

impl Versioned for Checkpoint {
    const KIND: &'static str = "checkpoint";
    const VERSION: u32 = 1;
    fn version(&self) -> u32 {
        self.version
    }
}

fn checksum(arrays: &[NamedArray], optimizer: Option<&OptimizerState>) -> String {
    let mut h = Sha256::new();
    for a in arrays {
        h.update(a.name.as_bytes());
        for d in &a.dims {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &a.values {
            h.update(v.to_le_bytes());
        }
    }
    if let Some(o) = optimizer {
        h.update(o.adam.t.to_le_bytes());
        for v in o.adam.m.iter().chain(&o.adam.v) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        optimizer: Option<OptimizerState>,
        progress: TrainProgress,
        train_config: serde_json::Value,
    ) -> Checkpoint {
        let arrays: Vec<NamedArray> = model
            .named_arrays()
            .into_iter()
            .map(|(name, dims, range)| NamedArray {
                name,
                dims,
                values: model.params()[range].to_vec(),
            })
            .collect();
        let checksum = checksum(&arrays, optimizer.as_ref());
        Checkpoint {
            version: Self::VERSION,
            seed: model.seed(),
            num_nodes: model.num_nodes(),
            model: model.config().clone(),
            train_config,
            arrays,
            optimizer,
            progress,
            checksum,
        }
    }

    /// Rebuilds the model, checking the checksum and array shapes.
    pub fn model(&self) -> Result<Model> {
        let expected = checksum(&self.arrays, self.optimizer.as_ref());
        if expected != self.checksum {
            return Err(Error::Corrupted(format!(
                "checksum {} does not match contents ({expected})",
                self.checksum
            )));
        }
        let template = Model::new(self.model.clone(), self.num_nodes, self.seed)?;
        let layout = template.named_arrays();
        if layout.len() != self.arrays.len() {
            return Err(Error::Corrupted("unexpected number of arrays".into()));
        }
        let mut params = Vec::with_capacity(template.num_params());
        for ((name, dims, _), a) in layout.iter().zip(&self.arrays) {
            if *name != a.name || *dims != a.dims || dims.iter().product::<usize>() != a.values.len() {
                return Err(Error::Corrupted(format!("array {} has the wrong shape", a.name)));
            }
            params.extend_from_slice(&a.values);
        }
        if let Some(o) = &self.optimizer {
            if o.adam.m.len() != params.len() || o.adam.v.len() != params.len() {
                return Err(Error::Corrupted("optimizer state has the wrong length".into()));
            }
        }
        Model::from_params(self.model.clone(), self.num_nodes, self.seed, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let c: Checkpoint = artifact::read_json(path)?;
        c.model()?;
        Ok(c)
    }
}
