use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Perturbation applied to the features entering an auxiliary head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Dropout,
    FeatureDropout,
    FeatureNoise,
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout" => Ok(Self::Dropout),
            "feature_dropout" => Ok(Self::FeatureDropout),
            "feature_noise" => Ok(Self::FeatureNoise),
            other => Err(Error::Argument(format!(
                "unknown perturbation kind `{other}`"
            ))),
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dropout => "dropout",
            Self::FeatureDropout => "feature_dropout",
            Self::FeatureNoise => "feature_noise",
        })
    }
}

/// Where the decoder-body dropout sits inside each branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPlacement {
    /// After the convolution block of every decoder stage.
    EveryStage,
    /// Only on the full-resolution features feeding the main classifier.
    BeforeHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub branch_dropout_rate: f64,
    pub dropout_placement: DropoutPlacement,
    /// Scale (1 = coarsest auxiliary head) to perturbation kind.
    pub aux_perturbation_by_scale: BTreeMap<String, PerturbationKind>,
    pub feature_noise_range: f64,
    pub feature_dropout_threshold_range: [f64; 2],
    pub input_size: [usize; 2],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let aux_perturbation_by_scale = [
            ("1".to_string(), PerturbationKind::FeatureNoise),
            ("2".to_string(), PerturbationKind::FeatureDropout),
            ("3".to_string(), PerturbationKind::Dropout),
        ]
        .into_iter()
        .collect();
        Self {
            in_channels: 1,
            num_classes: 4,
            encoder_channels: vec![16, 32, 64, 128, 256],
            branch_dropout_rate: 0.5,
            dropout_placement: DropoutPlacement::EveryStage,
            aux_perturbation_by_scale,
            feature_noise_range: 0.3,
            feature_dropout_threshold_range: [0.7, 0.9],
            input_size: [256, 256],
        }
    }
}

impl NetworkConfig {
    pub const LEVELS: usize = 5;

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = [h, w];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ch = &self.encoder_channels;
        if ch.len() != Self::LEVELS {
            return Err(Error::config(
                "encoder_channels",
                format!("expected {} levels, got {}", Self::LEVELS, ch.len()),
            ));
        }
        if ch[0] == 0 || ch.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::config(
                "encoder_channels",
                "must be positive and strictly increasing",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.in_channels < 1 {
            return Err(Error::config(
                "in_channels",
                "need at least 1 input channel",
            ));
        }
        if !(0.0..1.0).contains(&self.branch_dropout_rate) {
            return Err(Error::config("branch_dropout_rate", "must lie in [0, 1)"));
        }
        let keys: Vec<&str> = self
            .aux_perturbation_by_scale
            .keys()
            .map(String::as_str)
            .collect();
        if keys != ["1", "2", "3"] {
            return Err(Error::config(
                "aux_perturbation_by_scale",
                format!("keys must be exactly {{1, 2, 3}}, got {keys:?}"),
            ));
        }
        if !(self.feature_noise_range >= 0.0 && self.feature_noise_range < 1.0) {
            return Err(Error::config(
                "feature_noise_range",
                "half-width must lie in [0, 1)",
            ));
        }
        let [lo, hi] = self.feature_dropout_threshold_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(
                "feature_dropout_threshold_range",
                "need 0 <= low <= high <= 1",
            ));
        }
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(
                "input_size",
                "height and width must be positive multiples of 16",
            ));
        }
        Ok(())
    }

    /// Perturbation of the auxiliary head at `scale` (1..=3).
    pub fn perturbation(&self, scale: usize) -> PerturbationKind {
        self.aux_perturbation_by_scale[&scale.to_string()]
    }
}
