use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis, Ix3};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use super::archive::MANIFEST_FILE;
use super::{fixed_partition, SplitManifest, VolumeSample, CLASS_NAMES};
use crate::error::{Error, Result};

fn file_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::DataFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a NIfTI volume as `(X, Y, Z)`, dropping trailing singleton axes.
fn read_volume(path: &Path) -> Result<Array3<f32>> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| file_error(path, e.to_string()))?;
    let mut arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| file_error(path, e.to_string()))?;
    while arr.ndim() > 3 && arr.shape()[arr.ndim() - 1] == 1 {
        let last = Axis(arr.ndim() - 1);
        arr = arr.index_axis_move(last, 0);
    }
    arr.into_dimensionality::<Ix3>()
        .map_err(|_| file_error(path, "expected a 3-D volume"))
}

/// `(X, Y, Z)` to slice-major `(Z, X, Y)`.
fn slice_major<V: Clone>(a: Array3<V>) -> Array3<V> {
    a.permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

fn to_labels(raw: &Array3<f32>, path: &Path) -> Result<Array3<u8>> {
    let mut out = Array3::zeros(raw.dim());
    for (o, &v) in out.iter_mut().zip(raw.iter()) {
        let r = v.round();
        if (v - r).abs() > 1e-3 || r < 0.0 || r >= CLASS_NAMES.len() as f32 {
            return Err(file_error(path, format!("unknown class value {v}")));
        }
        *o = r as u8;
    }
    Ok(out)
}

/// `patientNNN_frameNN` stems for frame images (not labels, not 4-D cines).
fn frame_stem(name: &str) -> Option<&str> {
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))?;
    let (patient, frame) = stem.split_once("_frame")?;
    let valid = patient.starts_with("patient")
        && !frame.is_empty()
        && frame.bytes().all(|b| b.is_ascii_digit());
    valid.then_some(stem)
}

fn patient_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for base in [
        root.to_path_buf(),
        root.join("training"),
        root.join("testing"),
    ] {
        if !base.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&base).map_err(|e| Error::io(&base, e))? {
            let path = entry.map_err(|e| Error::io(&base, e))?.path();
            let is_patient = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("patient"));
            if path.is_dir() && is_patient {
                dirs.push(path);
            }
        }
    }
    dirs.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(dirs)
}

fn label_path(dir: &Path, stem: &str, image: &Path) -> PathBuf {
    let ext = if image.to_string_lossy().ends_with(".gz") {
        ".nii.gz"
    } else {
        ".nii"
    };
    dir.join(format!("{stem}_gt{ext}"))
}

/// Loads `patientNNN/patientNNN_frameNN.nii.gz` images with their `_gt`
/// companions from `root`, `root/training` and `root/testing`. Splits come
/// from `root/splits.json` when present, otherwise from [`fixed_partition`]
/// over the sorted patient list.
pub fn load_acdc(root: &Path) -> Result<Vec<VolumeSample>> {
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        Some(SplitManifest::read(&manifest_path)?)
    } else {
        None
    };
    let dirs = patient_dirs(root)?;
    if dirs.is_empty() {
        return Err(file_error(root, "no patient directories found"));
    }
    let mut out = Vec::new();
    for (index, dir) in dirs.iter().enumerate() {
        let patient_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let split_tag = match &manifest {
            Some(m) => match m.tag_of(&patient_id) {
                Some(tag) => tag,
                None => continue,
            },
            None => fixed_partition(index),
        };
        let mut frames: Vec<(String, PathBuf)> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let stem = frame_stem(p.file_name()?.to_str()?)?.to_string();
                Some((stem, p))
            })
            .collect();
        frames.sort();
        for (stem, image_path) in frames {
            let gt = label_path(dir, &stem, &image_path);
            if !gt.is_file() {
                return Err(file_error(
                    &gt,
                    format!("missing label for {}", image_path.display()),
                ));
            }
            let image = read_volume(&image_path)?;
            let raw_label = read_volume(&gt)?;
            if image.dim() != raw_label.dim() {
                return Err(file_error(
                    &gt,
                    format!(
                        "label shape {:?} differs from image {:?}",
                        raw_label.dim(),
                        image.dim()
                    ),
                ));
            }
            let label = to_labels(&raw_label, &gt)?;
            let v = VolumeSample {
                image: slice_major(image),
                label: slice_major(label),
                patient_id: patient_id.clone(),
                volume_id: stem,
                split_tag,
            };
            v.validate(CLASS_NAMES.len())?;
            out.push(v);
        }
    }
    if let Some(m) = &manifest {
        for id in m.train.iter().chain(&m.val).chain(&m.test) {
            if !out.iter().any(|v| &v.patient_id == id) {
                return Err(Error::Data(format!(
                    "manifest patient {id} has no volumes under {}",
                    root.display()
                )));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_stems() {
        assert_eq!(
            frame_stem("patient001_frame01.nii.gz"),
            Some("patient001_frame01")
        );
        assert_eq!(
            frame_stem("patient001_frame12.nii"),
            Some("patient001_frame12")
        );
        assert_eq!(frame_stem("patient001_frame01_gt.nii.gz"), None);
        assert_eq!(frame_stem("patient001_4d.nii.gz"), None);
        assert_eq!(frame_stem("Info.cfg"), None);
    }
}
