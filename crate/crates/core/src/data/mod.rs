//! Volume datasets, the semi-supervised split, slice preprocessing and
//! augmentation, and the two-stream batch sampler.

mod acdc;
mod archive;
mod augment;
mod preprocess;
mod sampler;
mod split;
mod synthetic;

pub use acdc::load_acdc;
pub use archive::{
    fixed_partition, load_synthetic_archive, write_synthetic_archive, SplitManifest, VolumeMeta,
};
pub use augment::{
    apply_record, augment, draw_record, AugmentConfig, AugmentRecord, Flip, RotationMode,
};
pub use preprocess::{
    normalize_slice, preprocess_label, preprocess_slice, resize_bilinear, resize_nearest,
};
pub use sampler::{
    sample_batch, BatchSampler, BatchSpec, CycleState, SamplerState, SliceBatch, SlicePools,
};
pub use split::{make_ssl_split, SslSplit};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};

use std::fmt;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class names in label order.
pub const CLASS_NAMES: [&str; 4] = ["background", "RV", "Myo", "LV"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

/// One annotated 3-D volume, stored slice-major `(slices, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub image: Array3<f32>,
    pub label: Array3<u8>,
    pub patient_id: String,
    /// Unique volume name (a patient may contribute several frames).
    pub volume_id: String,
    pub split_tag: SplitTag,
}

impl VolumeSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image.dim() != self.label.dim() {
            return Err(Error::Data(format!(
                "volume {}: image {:?} and label {:?} differ in shape",
                self.volume_id,
                self.image.dim(),
                self.label.dim()
            )));
        }
        if self.image.is_empty() {
            return Err(Error::Data(format!("volume {} is empty", self.volume_id)));
        }
        if let Some(&v) = self.label.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Data(format!(
                "volume {}: label value {v} outside [0, {num_classes})",
                self.volume_id
            )));
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        self.image.dim().0
    }
}

/// On-disk layouts understood by [`load_volume_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    AcdcFormat,
    SyntheticArchive,
}

pub fn load_volume_dataset(root: &Path, layout: DatasetLayout) -> Result<Vec<VolumeSample>> {
    if !root.is_dir() {
        return Err(Error::DataFile {
            path: root.to_path_buf(),
            reason: "dataset root is not a directory".into(),
        });
    }
    match layout {
        DatasetLayout::AcdcFormat => load_acdc(root),
        DatasetLayout::SyntheticArchive => load_synthetic_archive(root),
    }
}

/// Sorted, deduplicated patient ids carrying `tag`.
pub fn patient_ids(volumes: &[VolumeSample], tag: SplitTag) -> Vec<String> {
    let mut ids: Vec<String> = volumes
        .iter()
        .filter(|v| v.split_tag == tag)
        .map(|v| v.patient_id.clone())
        .collect();
    ids.sort();
    ids.dedup();
    ids
}
