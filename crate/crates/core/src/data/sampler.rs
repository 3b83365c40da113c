use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{apply_to_image, apply_to_label, draw_record};
use super::{
    preprocess_label, preprocess_slice, AugmentConfig, AugmentRecord, SplitTag, SslSplit,
    VolumeSample,
};
use crate::error::{Error, Result};
use crate::rng::{self, RngState};
use crate::tensor::Tensor4;

/// Batch composition and slice geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSpec {
    pub labeled: usize,
    pub unlabeled: usize,
    /// `(H, W)` every slice is zoomed to.
    pub patch_size: [usize; 2],
    pub augment: AugmentConfig,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            labeled: 12,
            unlabeled: 12,
            patch_size: [256, 256],
            augment: AugmentConfig::default(),
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labeled == 0 {
            return Err(Error::config("batch.labeled", "must be positive"));
        }
        if self.patch_size.iter().any(|&s| s < 16 || s % 16 != 0) {
            return Err(Error::config(
                "batch.patch_size",
                "sides must be positive multiples of 16",
            ));
        }
        Ok(())
    }
}

/// Preprocessed training slices split by pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePools {
    pub patch_size: (usize, usize),
    pub labeled: Vec<(Array2<f32>, Array2<u8>)>,
    /// Unlabeled slices keep no label.
    pub unlabeled: Vec<Array2<f32>>,
}

impl SlicePools {
    /// Normalizes and zooms every slice of the training volumes once.
    pub fn build(
        volumes: &[VolumeSample],
        split: &SslSplit,
        patch_size: [usize; 2],
    ) -> Result<Self> {
        let target = (patch_size[0], patch_size[1]);
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for v in volumes.iter().filter(|v| v.split_tag == SplitTag::Train) {
            let is_labeled = split.is_labeled(&v.patient_id);
            if !is_labeled && !split.unlabeled_ids.contains(&v.patient_id) {
                continue;
            }
            for (img, lab) in v.image.axis_iter(Axis(0)).zip(v.label.axis_iter(Axis(0))) {
                let img = preprocess_slice(&img.to_owned(), target);
                if is_labeled {
                    labeled.push((img, preprocess_label(&lab.to_owned(), target)));
                } else {
                    unlabeled.push(img);
                }
            }
        }
        if labeled.is_empty() {
            return Err(Error::Data(
                "labeled pool is empty: no training volumes for the labeled patients".into(),
            ));
        }
        Ok(Self {
            patch_size: target,
            labeled,
            unlabeled,
        })
    }
}

/// Position of one epoch-shuffled cycle over a pool.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CycleState {
    pub order: Vec<usize>,
    pub cursor: usize,
    pub epoch: u64,
}

impl CycleState {
    fn next(&mut self, len: usize, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..len).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

/// Everything needed to resume the batch stream exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub rng: RngState,
    pub labeled: CycleState,
    pub unlabeled: CycleState,
}

/// One two-stream training batch with the provenance of every slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch {
    /// `(B_l, 1, H, W)` in `[0, 1]`.
    pub labeled_images: Tensor4<f32>,
    /// `(B_l, H, W)`.
    pub labeled_labels: Array3<u8>,
    /// `(B_u, 1, H, W)` in `[0, 1]`.
    pub unlabeled_images: Tensor4<f32>,
    pub labeled_sources: Vec<usize>,
    pub labeled_records: Vec<AugmentRecord>,
    pub unlabeled_sources: Vec<usize>,
    pub unlabeled_records: Vec<AugmentRecord>,
}

impl SliceBatch {
    /// Labeled samples first, then unlabeled, as one `(B_l + B_u, 1, H, W)` tensor.
    pub fn stacked_images(&self) -> Tensor4<f32> {
        if self.unlabeled_images.is_empty() {
            return self.labeled_images.clone();
        }
        Tensor4::concat_outer(&[&self.labeled_images, &self.unlabeled_images])
            .expect("batch streams share a patch size")
    }
}

/// Deterministic two-stream sampler: each stream walks its pool in a fresh
/// random order every epoch, and every drawn slice is augmented.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pools: Arc<SlicePools>,
    spec: BatchSpec,
    rng: ChaCha8Rng,
    labeled: CycleState,
    unlabeled: CycleState,
}

impl BatchSampler {
    pub fn new(pools: Arc<SlicePools>, spec: BatchSpec, seed: u64) -> Result<Self> {
        Self::check(&pools, &spec)?;
        Ok(Self {
            pools,
            spec,
            rng: rng::stream(seed, rng::streams::SAMPLER),
            labeled: CycleState::default(),
            unlabeled: CycleState::default(),
        })
    }

    pub fn restore(pools: Arc<SlicePools>, spec: BatchSpec, state: &SamplerState) -> Result<Self> {
        Self::check(&pools, &spec)?;
        let bad = |c: &CycleState, len: usize| {
            c.order.len() != len && !c.order.is_empty() || c.order.iter().any(|&i| i >= len)
        };
        if bad(&state.labeled, pools.labeled.len()) || bad(&state.unlabeled, pools.unlabeled.len())
        {
            return Err(Error::Checkpoint(
                "sampler state does not match the slice pools".into(),
            ));
        }
        Ok(Self {
            pools,
            spec,
            rng: state.rng.restore()?,
            labeled: state.labeled.clone(),
            unlabeled: state.unlabeled.clone(),
        })
    }

    fn check(pools: &SlicePools, spec: &BatchSpec) -> Result<()> {
        spec.validate()?;
        if pools.patch_size != (spec.patch_size[0], spec.patch_size[1]) {
            return Err(Error::Data(format!(
                "pools were built at {:?} but the batch asks for {:?}",
                pools.patch_size, spec.patch_size
            )));
        }
        if spec.unlabeled > 0 && pools.unlabeled.is_empty() {
            return Err(Error::Data(
                "unlabeled pool is empty but the batch asks for unlabeled slices".into(),
            ));
        }
        Ok(())
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    pub fn pools(&self) -> &SlicePools {
        &self.pools
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            rng: RngState::capture(&self.rng),
            labeled: self.labeled.clone(),
            unlabeled: self.unlabeled.clone(),
        }
    }

    /// Draws labeled slices first, then unlabeled ones.
    pub fn next_batch(&mut self) -> SliceBatch {
        let (h, w) = self.pools.patch_size;
        let square = h == w;
        let (bl, bu) = (self.spec.labeled, self.spec.unlabeled);
        let mut labeled_images = Tensor4::zeros([bl, 1, h, w]);
        let mut labeled_labels = Array3::zeros((bl, h, w));
        let mut labeled_sources = Vec::with_capacity(bl);
        let mut labeled_records = Vec::with_capacity(bl);
        for b in 0..bl {
            let src = self.labeled.next(self.pools.labeled.len(), &mut self.rng);
            let rec = draw_record(&self.spec.augment, square, &mut self.rng);
            let (img, lab) = &self.pools.labeled[src];
            copy_plane(
                &apply_to_image(img, &rec),
                labeled_images.plane_slice_mut(b, 0),
            );
            labeled_labels
                .index_axis_mut(Axis(0), b)
                .assign(&apply_to_label(lab, &rec));
            labeled_sources.push(src);
            labeled_records.push(rec);
        }
        let mut unlabeled_images = Tensor4::zeros([bu, 1, h, w]);
        let mut unlabeled_sources = Vec::with_capacity(bu);
        let mut unlabeled_records = Vec::with_capacity(bu);
        for b in 0..bu {
            let src = self
                .unlabeled
                .next(self.pools.unlabeled.len(), &mut self.rng);
            let rec = draw_record(&self.spec.augment, square, &mut self.rng);
            copy_plane(
                &apply_to_image(&self.pools.unlabeled[src], &rec),
                unlabeled_images.plane_slice_mut(b, 0),
            );
            unlabeled_sources.push(src);
            unlabeled_records.push(rec);
        }
        SliceBatch {
            labeled_images,
            labeled_labels,
            unlabeled_images,
            labeled_sources,
            labeled_records,
            unlabeled_sources,
            unlabeled_records,
        }
    }
}

fn copy_plane(src: &Array2<f32>, dst: &mut [f32]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = *s;
    }
}

/// Builds pools for `split` and draws one batch from a sampler seeded with `seed`.
pub fn sample_batch(
    split: &SslSplit,
    volumes: &[VolumeSample],
    spec: &BatchSpec,
    seed: u64,
) -> Result<SliceBatch> {
    let pools = Arc::new(SlicePools::build(volumes, split, spec.patch_size)?);
    Ok(BatchSampler::new(pools, spec.clone(), seed)?.next_batch())
}
