use serde::{Deserialize, Serialize};

use crate::connection::ConnectionMode;
use crate::error::{CcsError, Result};
use crate::losses::{Margins, PositiveMining};
use crate::model::ModelSpec;
use crate::sampler::BatchSpec;
use crate::shared::Aggregation;

/// Layer widths and segment layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Extractor hidden width.
    pub hidden: usize,
    /// Feature width of each stream.
    pub d: usize,
    /// Connection embedding width.
    pub e: usize,
    /// Shared embedding width.
    pub d_proj: usize,
    pub segments: usize,
    pub snippet: usize,
    pub connection_mode: ConnectionMode,
    pub share_classifier: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hidden: 32,
            d: 16,
            e: 8,
            d_proj: 16,
            segments: 3,
            snippet: 10,
            connection_mode: ConnectionMode::Attention,
            share_classifier: true,
        }
    }
}

/// Every training hyperparameter. Absent JSON keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub margins: Margins,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping; `null`
    /// trains for `max_epochs`.
    pub early_stop_patience: Option<usize>,
    pub batch: BatchSpec,
    pub aggregation: Aggregation,
    pub connection: bool,
    pub ranking_losses: bool,
    pub positive_mining: PositiveMining,
    /// Weight of the appearance stream in score fusion.
    pub fusion_weight: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub model: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margins: Margins::default(),
            lambda1: 0.5,
            lambda2: 0.5,
            lr0: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 50,
            weight_decay: 5e-4,
            momentum: 0.9,
            max_epochs: 400,
            early_stop_patience: Some(20),
            batch: BatchSpec::default(),
            aggregation: Aggregation::Avg,
            connection: true,
            ranking_losses: true,
            positive_mining: PositiveMining::Hardest,
            fusion_weight: 0.5,
            val_fraction: 0.2,
            seed: 0,
            model: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.margins.validate()?;
        self.batch.validate()?;
        let positive = [("lr0", self.lr0), ("lr_decay_factor", self.lr_decay_factor)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(CcsError::Config(format!(
                "{name} must be positive, got {v}"
            )));
        }
        let nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(CcsError::Config(format!(
                "{name} must be nonnegative, got {v}"
            )));
        }
        if self.momentum >= 1.0 {
            return Err(CcsError::Config(format!(
                "momentum must be below 1, got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(CcsError::Config(format!(
                "fusion_weight must lie in [0, 1], got {}",
                self.fusion_weight
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CcsError::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.early_stop_patience == Some(0) {
            return Err(CcsError::Config(
                "early_stop_patience must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Loss weights actually applied; both zero when ranking losses are off.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        if self.ranking_losses {
            (self.lambda1, self.lambda2)
        } else {
            (0.0, 0.0)
        }
    }

    pub fn model_spec(&self, d_in: usize, n_classes: usize) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            d_in,
            n_classes,
            hidden: m.hidden,
            d: m.d,
            e: m.e,
            d_proj: m.d_proj,
            segments: m.segments,
            snippet: m.snippet,
            aggregation: self.aggregation,
            connection: self.connection,
            connection_mode: m.connection_mode,
            share_classifier: m.share_classifier,
        }
    }

    /// Margin presets swept for the margin study.
    pub fn margin_presets() -> Vec<Margins> {
        [
            (0.2, 0.3, 0.8),
            (0.3, 0.3, 0.8),
            (0.3, 0.5, 1.0),
            (0.5, 0.5, 1.0),
            (0.8, 0.5, 1.2),
        ]
        .into_iter()
        .map(|(alpha1, alpha2, alpha3)| Margins {
            alpha1,
            alpha2,
            alpha3,
        })
        .collect()
    }
}
