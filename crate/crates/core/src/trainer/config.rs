use serde::{Deserialize, Serialize};

use crate::data::BatchSpec;
use crate::dbpnet::Branch;
use crate::error::{Error, Result};
use crate::losses::CpcrObjective;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 - i / max_iterations)^power`.
    Poly { power: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iterations: u64,
    pub val_every: u64,
    /// Iterations per increment of the ramp-up step `t`.
    pub rampup_step_every: u64,
    pub optimizer: SgdConfig,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub objective: CpcrObjective,
    /// Batch composition, patch size and augmentation.
    pub batch: BatchSpec,
    /// Branch whose main output is used for validation and testing.
    pub inference_branch: Branch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50_000,
            val_every: 200,
            rampup_step_every: 150,
            optimizer: SgdConfig::default(),
            lr_schedule: LrSchedule::Constant,
            seed: 1337,
            objective: CpcrObjective::default(),
            batch: BatchSpec::default(),
            inference_branch: Branch::Up,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("max_iterations", self.max_iterations),
            ("val_every", self.val_every),
            ("rampup_step_every", self.rampup_step_every),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::config(
                "optimizer.weight_decay",
                "must be nonnegative",
            ));
        }
        if let LrSchedule::Poly { power } = self.lr_schedule {
            if !(power > 0.0) {
                return Err(Error::config("lr_schedule.power", "must be positive"));
            }
        }
        self.objective.weights.validate()?;
        self.batch.validate()
    }

    /// Learning rate used by the step with zero-based index `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.optimizer.lr,
            LrSchedule::Poly { power } => {
                let frac = 1.0 - iteration as f64 / self.max_iterations as f64;
                self.optimizer.lr * frac.max(0.0).powf(power)
            }
        }
    }

    /// Ramp-up step after `iteration` completed steps.
    pub fn rampup_t(&self, iteration: u64) -> u64 {
        (iteration / self.rampup_step_every).min(self.objective.weights.t_max)
    }
}
