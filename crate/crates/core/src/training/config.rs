//! Per-stage hyperparameters and their TOML file form.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::{DEFAULT_BETA, DEFAULT_CHECKPOINTS};
use crate::checkpoint::StageTag;
use crate::error::{Error, Result};

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageTag,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Curriculum prefix lengths; clipped to the identifier length.
    pub checkpoints: Vec<usize>,
    pub beta: f64,
    /// Retrieval depth for negative mining.
    #[serde(rename = "K_neg")]
    pub k_neg: usize,
}

impl StageConfig {
    /// Settings tuned on the 1,000-document synthetic collection. The rank
    /// stages start from a cross-entropy model and use a smaller step.
    pub fn defaults(stage: StageTag) -> Self {
        let (epochs, lr) = match stage {
            StageTag::Init => (0, 1e-3),
            StageTag::M0 => (20, 1e-3),
            StageTag::M1 => (20, 1e-3),
            StageTag::M2 => (4, 1e-4),
            StageTag::M3 => (10, 1e-4),
            StageTag::M4 => (20, 1e-4),
        };
        StageConfig {
            stage,
            lr,
            epochs,
            batch_size: 32,
            seed: 0,
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
            beta: DEFAULT_BETA,
            k_neg: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == StageTag::Init {
            return Err(Error::Config("init is not a training stage".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k_neg == 0 {
            return Err(Error::Config(
                "epochs, batch_size and K_neg must be >= 1".into(),
            ));
        }
        if self.checkpoints.is_empty() {
            return Err(Error::Config("checkpoints must not be empty".into()));
        }
        Ok(())
    }

    /// Replaces every field set in `o`.
    pub fn apply(&mut self, o: &StageOverrides) {
        if let Some(v) = o.stage {
            self.stage = v;
        }
        if let Some(v) = o.lr {
            self.lr = v;
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.checkpoints {
            self.checkpoints = v.clone();
        }
        if let Some(v) = o.beta {
            self.beta = v;
        }
        if let Some(v) = o.k_neg {
            self.k_neg = v;
        }
    }
}

/// A partial [`StageConfig`], as read from a config file or command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverrides {
    pub stage: Option<StageTag>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub checkpoints: Option<Vec<usize>>,
    pub beta: Option<f64>,
    #[serde(rename = "K_neg")]
    pub k_neg: Option<usize>,
}

impl StageOverrides {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::parse(origin, line, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?, path)
    }
}
