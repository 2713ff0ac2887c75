use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GPResidualModel, KernelHyperparams, ResidualDataset};
use crate::error::{Error, Result};

/// On-disk form of a trained model. The factorization is rebuilt on load and
/// checked against the stored marginal likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub hyperparams: KernelHyperparams,
    pub dataset: ResidualDataset,
    pub dataset_hash: String,
    pub mll: Option<f64>,
}

const MLL_TOLERANCE: f64 = 1e-9;

impl Checkpoint {
    pub fn from_model(model: &GPResidualModel) -> Self {
        Self {
            hyperparams: model.hyperparams().clone(),
            dataset: model.dataset().clone(),
            dataset_hash: model.dataset().hash(),
            mll: model.log_marginal_likelihood(),
        }
    }

    pub fn restore(&self) -> Result<GPResidualModel> {
        let hash = self.dataset.hash();
        if hash != self.dataset_hash {
            return Err(Error::Checkpoint(format!(
                "dataset hash {hash} does not match stored {}",
                self.dataset_hash
            )));
        }
        let model = GPResidualModel::train(&self.dataset, &self.hyperparams)?;
        match (model.log_marginal_likelihood(), self.mll) {
            (Some(a), Some(b)) if (a - b).abs() <= MLL_TOLERANCE * b.abs().max(1.0) => Ok(model),
            (None, None) => Ok(model),
            (got, stored) => Err(Error::Checkpoint(format!(
                "rebuilt MLL {got:?} differs from stored {stored:?}"
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
