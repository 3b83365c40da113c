use ndarray::{Array2, Array3, Axis};

use crate::data::{preprocess_slice, resize_nearest, VolumeSample, CLASS_NAMES};
use crate::dbpnet::{Branch, Network};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_volumes, MetricsReport};
use crate::tensor::Tensor4;

/// Slices per inference forward pass.
const INFERENCE_CHUNK: usize = 16;

/// Per-pixel argmax over classes of a `(B, C, H, W)` tensor.
pub fn argmax_labels(probs: &Tensor4<f32>) -> Array3<u8> {
    let [b, c, h, w] = probs.shape();
    let plane = h * w;
    let mut out = Array3::zeros((b, h, w));
    for (i, mut slice) in out.outer_iter_mut().enumerate() {
        for (p, o) in slice.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for k in 0..c {
                let v = probs.data()[(i * c + k) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            *o = best as u8;
        }
    }
    out
}

/// Segments every slice of `image` at `patch_size` and restacks the label
/// maps at the original slice size.
pub fn predict_volume(
    net: &Network<f32>,
    image: &Array3<f32>,
    branch: Branch,
) -> Result<Array3<u8>> {
    let [ph, pw] = net.config().input_size;
    let (d, h, w) = image.dim();
    let mut out = Array3::zeros((d, h, w));
    for start in (0..d).step_by(INFERENCE_CHUNK) {
        let end = (start + INFERENCE_CHUNK).min(d);
        let mut batch = Tensor4::zeros([end - start, 1, ph, pw]);
        for z in start..end {
            let s = preprocess_slice(&image.index_axis(Axis(0), z).to_owned(), (ph, pw));
            batch
                .plane_slice_mut(z - start, 0)
                .iter_mut()
                .zip(s.iter())
                .for_each(|(d, &v)| *d = v);
        }
        let labels = argmax_labels(&net.forward_inference_branch(&batch, branch)?);
        for z in start..end {
            let small: Array2<u8> = labels.index_axis(Axis(0), z - start).to_owned();
            out.index_axis_mut(Axis(0), z)
                .assign(&resize_nearest(&small, (h, w)));
        }
    }
    Ok(out)
}

/// Evaluates the network on whole volumes with unit spacing.
pub fn validate(
    net: &Network<f32>,
    volumes: &[VolumeSample],
    branch: Branch,
) -> Result<MetricsReport> {
    if volumes.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let preds = volumes
        .iter()
        .map(|v| predict_volume(net, &v.image, branch))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Array3<u8>> = volumes.iter().map(|v| v.label.clone()).collect();
    let ids: Vec<String> = volumes.iter().map(|v| v.volume_id.clone()).collect();
    let names = class_names(net.config().num_classes);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    evaluate_volumes(&preds, &gts, &ids, &refs, [1.0; 3])
}

/// Cardiac names for the four-class task, `class{k}` otherwise.
pub fn class_names(num_classes: usize) -> Vec<String> {
    if num_classes == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|k| format!("class{k}")).collect()
    }
}
