use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Patient-level division of the training set into labeled and unlabeled pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SslSplit {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub seed: u64,
}

impl SslSplit {
    pub fn is_labeled(&self, id: &str) -> bool {
        self.labeled_ids.iter().any(|l| l == id)
    }
}

/// Selects `floor(ratio * n)` patients (at least one) as labeled.
/// Ids are sorted and deduplicated first so that input order does not matter;
/// both output lists are sorted.
pub fn make_ssl_split(train_ids: &[String], labeled_ratio: f64, seed: u64) -> Result<SslSplit> {
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::config(
            "labeled_ratio",
            format!("{labeled_ratio} is outside (0, 1]"),
        ));
    }
    let mut ids = train_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Data(
            "training set is empty; cannot build a labeled split".into(),
        ));
    }
    let n_labeled =
        ((labeled_ratio * ids.len() as f64 + 1e-9).floor() as usize).clamp(1, ids.len());
    let mut shuffled = ids;
    shuffled.shuffle(&mut rng::stream(seed, rng::streams::SPLIT));
    let mut unlabeled_ids = shuffled.split_off(n_labeled);
    let mut labeled_ids = shuffled;
    labeled_ids.sort();
    unlabeled_ids.sort();
    Ok(SslSplit {
        labeled_ids,
        unlabeled_ids,
        seed,
    })
}
