//! Optimisation for both stages: the implicit contrastive stage, pseudo-label
//! export, the explicit regressor and the end-to-end pipeline.

mod adam;
mod explicit;
mod implicit;
mod pipeline;

pub use adam::{clip_global_norm, Adam};
pub use explicit::{infer_explicit, train_explicit, ExplicitModel, ExplicitParams, EXPLICIT_FUSION};
pub use implicit::{export_pseudo_labels, pseudo_label_quality, train_implicit, PseudoQuality};
pub use pipeline::{run_two_stage, LabelConfig, TwoStageOutput};

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cluster::{check_batch_shape, DEFAULT_RATIO};
use crate::error::{Error, Result};
use crate::losses::{LossFlags, LossWeights};
use crate::model::DetectorKind;

/// Every hyperparameter of both stages. Keys in the TOML form match these
/// field names; absent keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub flags: LossFlags,
    /// samples per batch, `B`
    pub batch_size: usize,
    /// clusters per batch, `N`
    pub clusters_per_batch: usize,
    /// k-means cluster count, `K`
    pub num_clusters: usize,
    /// multi-membership distance ratio, `ρ`
    pub membership_ratio: f64,
    pub kmeans_iters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub seed: u64,
    /// shared width `D` after fusion
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub mask_sharpness_init: f64,
    pub detector: DetectorKind,
    pub explicit_epochs: usize,
    pub explicit_learning_rate: f64,
    pub explicit_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            flags: LossFlags::default(),
            batch_size: 16,
            clusters_per_batch: 4,
            num_clusters: 10,
            membership_ratio: DEFAULT_RATIO,
            kmeans_iters: 100,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            epochs: 200,
            seed: 0,
            model_dim: 16,
            hidden_dim: 16,
            mask_sharpness_init: 1.0,
            detector: DetectorKind::Profile,
            explicit_epochs: 100,
            explicit_learning_rate: 3e-3,
            explicit_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !self.flags.any() {
            return Err(Error::Config("no loss enabled".into()));
        }
        if self.epochs == 0 || self.explicit_epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        check_batch_shape(self.batch_size, self.clusters_per_batch)?;
        if self.num_clusters < 2 || self.clusters_per_batch > self.num_clusters {
            return Err(Error::Config(format!(
                "need K ≥ 2 and N ≤ K (K={}, N={})",
                self.num_clusters, self.clusters_per_batch
            )));
        }
        if !(self.membership_ratio >= 1.0) {
            return Err(Error::Config(format!("membership_ratio must be ≥ 1, got {}", self.membership_ratio)));
        }
        let positive = [
            self.learning_rate,
            self.adam_eps,
            self.grad_clip,
            self.mask_sharpness_init,
            self.explicit_learning_rate,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "learning rates, adam_eps, grad_clip and mask_sharpness_init must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.model_dim == 0 || self.hidden_dim == 0 || self.explicit_batch_size == 0 {
            return Err(Error::Config("model dims and batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub batches: usize,
    /// mean total loss over the epoch's batches
    pub loss: f64,
    /// mean of each enabled component, by name
    pub components: Vec<(String, f64)>,
    /// fraction of training samples whose exported interval contains the clip
    pub containment: Option<f64>,
    /// pseudo-label mIoU against ground truth, percent
    pub pseudo_miou: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serialises") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Invalid(format!("bad log line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { epochs })
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    pub fn total_seconds(&self) -> Duration {
        Duration::from_secs_f64(self.epochs.iter().map(|e| e.seconds).sum())
    }
}

#[cfg(test)]
mod tests;
