//! Dual Branch Pyramid Network.

mod config;
mod network;
mod perturbation;

pub use config::{DropoutPlacement, NetworkConfig, PerturbationKind};
pub use network::{
    Branch, BranchPyramids, ForwardOptions, ForwardRng, ForwardRngState, ForwardTape, Network,
    ParameterScope, PyramidGrads, HEAD_INIT_STD,
};
pub use perturbation::{
    apply_feature_perturbation, dropout_mask, PerturbationParams, AUX_DROPOUT_RATE,
};
