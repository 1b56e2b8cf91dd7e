use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::dataio::DatasetSpec;
use crate::error::{Error, Result};
use crate::supernet::{ArchInit, Scoring, SupernetSpec};

/// How the target Lipschitz constant is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LambdaStar {
    /// Run `epochs` unconstrained epochs from the same initialization and
    /// take the `quantile` of the sampled bounds seen by the arch steps.
    Calibrate { epochs: usize, quantile: f64 },
    Fixed { value: f64 },
}

/// When the dual variable is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualSchedule {
    Epoch,
    ArchStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub adversarial: bool,
    pub attack: AttackConfig,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            adversarial: false,
            attack: AttackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub weight_momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip for weight steps; 0 disables.
    pub grad_clip: f64,
    /// Step size of the architecture optimizer (Adam).
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub rho: f64,
    pub eta: f64,
    pub lambda_star: LambdaStar,
    pub dual_schedule: DualSchedule,
    /// Clamp the dual variable at zero.
    pub dual_clamp: bool,
    /// Skip building the constraint graph while `rho` and `theta` are both
    /// zero. Its contribution is exactly zero then.
    pub detach_unconstrained: bool,
    /// Attack the architecture batches with `attack`.
    pub arch_adversarial: bool,
    pub weight_gain: f64,
    pub arch_init: ArchInit,
    /// Power-iteration budget for refreshing operation constants.
    pub lambda_iters: usize,
    pub lambda_tol: f64,
    pub scoring: Scoring,
    pub supernet: SupernetSpec,
    pub data: DatasetSpec,
    pub attack: AttackConfig,
    pub retrain: RetrainConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 64,
            weight_lr: 0.05,
            weight_momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            arch_lr: 0.01,
            arch_weight_decay: 1e-3,
            rho: 0.001,
            eta: 0.9,
            lambda_star: LambdaStar::Calibrate {
                epochs: 5,
                quantile: 0.25,
            },
            dual_schedule: DualSchedule::Epoch,
            dual_clamp: true,
            detach_unconstrained: true,
            arch_adversarial: false,
            weight_gain: 0.5,
            arch_init: ArchInit::default(),
            lambda_iters: 300,
            lambda_tol: 1e-10,
            scoring: Scoring::Expectation,
            supernet: SupernetSpec::desk(),
            data: DatasetSpec::default(),
            attack: AttackConfig::default(),
            retrain: RetrainConfig::default(),
        }
    }
}

impl SearchConfig {
    /// Optimizer settings and schedule at their published values
    /// (50 epochs, batch 128, SGD 0.1, Adam 6e-4).
    pub fn published() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            weight_lr: 0.1,
            arch_lr: 6e-4,
            ..Self::default()
        }
    }

    /// Same run with the constraint machinery detached (`rho = 0`,
    /// `theta = 0`).
    pub fn unconstrained(&self) -> Self {
        Self {
            rho: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::domain(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::domain(format!("rho must be >= 0, got {}", self.rho)));
        }
        match self.lambda_star {
            LambdaStar::Fixed { value } if !(value > 0.0) => {
                return Err(Error::domain(format!("lambda_star must be > 0, got {value}")));
            }
            LambdaStar::Calibrate { epochs, quantile } if epochs == 0 || !(quantile > 0.0 && quantile < 1.0) => {
                return Err(Error::domain("calibration needs epochs >= 1 and a quantile in (0, 1)"));
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be positive"));
        }
        if self.supernet.input_dim != self.data.input_dim || self.supernet.classes != self.data.classes {
            return Err(Error::domain("supernet and dataset dimensions disagree"));
        }
        self.supernet.validate()
    }

    /// The constraint is active unless both the penalty and the dual
    /// variable are pinned at zero.
    pub fn constrained(&self) -> bool {
        self.rho > 0.0
    }
}
