use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use super::{SplitTag, VolumeSample, CLASS_NAMES};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "splits.json";
const META_FILE: &str = "meta.json";
const IMAGE_FILE: &str = "image.npy";
const LABEL_FILE: &str = "label.npy";

/// Patient-wise train/val/test assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn from_volumes(volumes: &[VolumeSample]) -> Self {
        let mut m = Self::default();
        for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
            *m.list_mut(tag) = super::patient_ids(volumes, tag);
        }
        m
    }

    fn list_mut(&mut self, tag: SplitTag) -> &mut Vec<String> {
        match tag {
            SplitTag::Train => &mut self.train,
            SplitTag::Val => &mut self.val,
            SplitTag::Test => &mut self.test,
        }
    }

    /// Rejects patients listed in more than one split.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, ids) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Data(format!(
                        "split manifest lists patient {id} twice (again in {name})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn tag_of(&self, patient_id: &str) -> Option<SplitTag> {
        let has = |ids: &Vec<String>| ids.iter().any(|i| i == patient_id);
        if has(&self.train) {
            Some(SplitTag::Train)
        } else if has(&self.val) {
            Some(SplitTag::Val)
        } else if has(&self.test) {
            Some(SplitTag::Test)
        } else {
            None
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::DataFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Deterministic 70/10/20 assignment by patient index.
pub fn fixed_partition(index: usize) -> SplitTag {
    match index % 10 {
        0..=6 => SplitTag::Train,
        7 => SplitTag::Val,
        _ => SplitTag::Test,
    }
}

/// JSON sidecar stored next to each volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub patient_id: String,
    pub volume_id: String,
    pub shape: [usize; 3],
    pub class_names: Vec<String>,
}

fn npy_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::DataFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Writes one directory per volume plus the split manifest.
pub fn write_synthetic_archive(root: &Path, volumes: &[VolumeSample]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for v in volumes {
        v.validate(CLASS_NAMES.len())?;
        let dir = root.join(&v.volume_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (d, h, w) = v.image.dim();
        let meta = VolumeMeta {
            patient_id: v.patient_id.clone(),
            volume_id: v.volume_id.clone(),
            shape: [d, h, w],
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        };
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(&meta_path, e))?;
        let p = dir.join(IMAGE_FILE);
        write_npy(&p, &v.image).map_err(|e| npy_error(&p, e))?;
        let p = dir.join(LABEL_FILE);
        write_npy(&p, &v.label).map_err(|e| npy_error(&p, e))?;
    }
    SplitManifest::from_volumes(volumes).write(&root.join(MANIFEST_FILE))
}

fn volume_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Reads an archive written by [`write_synthetic_archive`]; split tags come
/// from the manifest.
pub fn load_synthetic_archive(root: &Path) -> Result<Vec<VolumeSample>> {
    let manifest = SplitManifest::read(&root.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for dir in volume_dirs(root)? {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: VolumeMeta = serde_json::from_str(&text).map_err(|e| npy_error(&meta_path, e))?;
        let image_path = dir.join(IMAGE_FILE);
        let label_path = dir.join(LABEL_FILE);
        if !label_path.is_file() {
            return Err(Error::DataFile {
                path: label_path,
                reason: format!("missing label for {}", image_path.display()),
            });
        }
        let image: Array3<f32> = read_npy(&image_path).map_err(|e| npy_error(&image_path, e))?;
        let label: Array3<u8> = read_npy(&label_path).map_err(|e| npy_error(&label_path, e))?;
        let (d, h, w) = image.dim();
        if [d, h, w] != meta.shape {
            return Err(npy_error(
                &image_path,
                format!(
                    "shape {:?} disagrees with sidecar {:?}",
                    [d, h, w],
                    meta.shape
                ),
            ));
        }
        let split_tag = manifest.tag_of(&meta.patient_id).ok_or_else(|| {
            Error::Data(format!(
                "patient {} is not listed in the split manifest",
                meta.patient_id
            ))
        })?;
        let v = VolumeSample {
            image,
            label,
            patient_id: meta.patient_id,
            volume_id: meta.volume_id,
            split_tag,
        };
        v.validate(meta.class_names.len())?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::DataFile {
            path: root.to_path_buf(),
            reason: "no volumes found".into(),
        });
    }
    Ok(out)
}
