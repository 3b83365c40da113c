//! Volume-level Dice, Jaccard, 95% Hausdorff distance and average surface
//! distance, with exhaustive-search references for the distance metrics.

mod distance;

pub use distance::{
    asd, asd_brute_force, extract_surface, hausdorff_brute_force, hd95, hd95_and_asd,
    hd95_brute_force, percentile, squared_distance_transform, surface_distances,
    surface_distances_brute_force, surface_mask, PointSet,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boolean volume with per-axis physical spacing `(slice, row, column)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask3D {
    pub voxels: Array3<bool>,
    pub spacing: [f64; 3],
}

impl BinaryMask3D {
    pub fn new(voxels: Array3<bool>) -> Result<Self> {
        Self::with_spacing(voxels, [1.0; 3])
    }

    pub fn with_spacing(voxels: Array3<bool>, spacing: [f64; 3]) -> Result<Self> {
        if voxels.is_empty() {
            return Err(Error::Argument("mask array has no voxels".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Argument(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        Ok(Self { voxels, spacing })
    }

    /// Voxels equal to `class`.
    pub fn from_labels(labels: &Array3<u8>, class: u8, spacing: [f64; 3]) -> Result<Self> {
        Self::with_spacing(labels.mapv(|l| l == class), spacing)
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }
}

fn overlap(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<(usize, usize, usize)> {
    if pred.voxels.dim() != gt.voxels.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.voxels.dim(),
            gt.voxels.dim()
        )));
    }
    let mut counts = (0, 0, 0);
    for (&p, &g) in pred.voxels.iter().zip(gt.voxels.iter()) {
        counts.0 += p as usize;
        counts.1 += g as usize;
        counts.2 += (p && g) as usize;
    }
    Ok(counts)
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dice_coefficient(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    let (p, g, i) = overlap(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    })
}

/// `|P∩G| / |P∪G|`; 1 when both masks are empty.
pub fn jaccard(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    let (p, g, i) = overlap(pred, gt)?;
    let union = p + g - i;
    Ok(if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    })
}

/// Four metrics; `None` where no volume contributed a value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: Option<f64>,
    pub iou: Option<f64>,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl ClassMetrics {
    fn fields(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("dsc", self.dsc),
            ("iou", self.iou),
            ("hd95", self.hd95),
            ("asd", self.asd),
        ]
    }
}

/// A (volume, class) pair left out of some or all means.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub volume: String,
    pub class: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Keyed by class name, foreground classes only.
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Mean over classes of the per-class means.
    pub mean: ClassMetrics,
    pub num_volumes: usize,
    pub skipped: Vec<Skipped>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

impl MetricsReport {
    /// Mean foreground Dice, or 0 when nothing could be scored.
    pub fn mean_dsc(&self) -> f64 {
        self.mean.dsc.unwrap_or(0.0)
    }

    /// One row per (class, metric), then the class mean under `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,metric,value\n");
        let rows = self
            .per_class
            .iter()
            .map(|(c, m)| (c.as_str(), m))
            .chain([("mean", &self.mean)]);
        for (class, m) in rows {
            for (name, v) in m.fields() {
                let v = v.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{class},{name},{v}");
            }
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    /// Human-readable table.
    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let mut out = format!(
            "{:<8} {:>8} {:>8} {:>8} {:>8}\n",
            "class", "DSC", "IoU", "95HD", "ASD"
        );
        let rows = self
            .per_class
            .iter()
            .map(|(c, m)| (c.as_str(), m))
            .chain([("mean", &self.mean)]);
        for (class, m) in rows {
            let _ = writeln!(
                out,
                "{:<8} {:>8} {:>8} {:>8} {:>8}",
                class,
                fmt(m.dsc),
                fmt(m.iou),
                fmt(m.hd95),
                fmt(m.asd)
            );
        }
        out
    }
}

/// Scores every foreground class of every volume and averages first over
/// volumes, then over classes. A class absent from both prediction and
/// ground truth is skipped entirely; absent from one side only it scores
/// Dice = IoU = 0 and its distance metrics are skipped.
pub fn evaluate_volumes(
    preds: &[Array3<u8>],
    gts: &[Array3<u8>],
    volume_ids: &[String],
    class_names: &[&str],
    spacing: [f64; 3],
) -> Result<MetricsReport> {
    if preds.len() != gts.len() || preds.len() != volume_ids.len() {
        return Err(Error::Argument(format!(
            "{} predictions, {} ground truths, {} ids",
            preds.len(),
            gts.len(),
            volume_ids.len()
        )));
    }
    let mut skipped = Vec::new();
    let mut per_class = BTreeMap::new();
    let mut class_means = Vec::new();
    for (c, &name) in class_names.iter().enumerate().skip(1) {
        let mut acc: [Vec<f64>; 4] = Default::default();
        for ((pred, gt), id) in preds.iter().zip(gts).zip(volume_ids) {
            if pred.dim() != gt.dim() {
                return Err(Error::Data(format!(
                    "volume {id}: prediction {:?} and ground truth {:?} differ",
                    pred.dim(),
                    gt.dim()
                )));
            }
            let p = BinaryMask3D::from_labels(pred, c as u8, spacing)?;
            let g = BinaryMask3D::from_labels(gt, c as u8, spacing)?;
            let (np, ng) = (p.count(), g.count());
            let skip = |reason: &str| Skipped {
                volume: id.clone(),
                class: name.to_string(),
                reason: reason.into(),
            };
            if np == 0 && ng == 0 {
                skipped.push(skip("absent from prediction and ground truth"));
                continue;
            }
            acc[0].push(dice_coefficient(&p, &g)?);
            acc[1].push(jaccard(&p, &g)?);
            if np == 0 || ng == 0 {
                let side = if np == 0 {
                    "prediction"
                } else {
                    "ground truth"
                };
                skipped.push(skip(&format!("empty {side}; distance metrics undefined")));
                continue;
            }
            let (h, a) = hd95_and_asd(&p, &g)?;
            acc[2].push(h);
            acc[3].push(a);
        }
        let m = ClassMetrics {
            dsc: mean(&acc[0]),
            iou: mean(&acc[1]),
            hd95: mean(&acc[2]),
            asd: mean(&acc[3]),
        };
        class_means.push(m);
        per_class.insert(name.to_string(), m);
    }
    let pick = |f: fn(&ClassMetrics) -> Option<f64>| {
        mean(&class_means.iter().filter_map(f).collect::<Vec<_>>())
    };
    let mean = ClassMetrics {
        dsc: pick(|m| m.dsc),
        iou: pick(|m| m.iou),
        hd95: pick(|m| m.hd95),
        asd: pick(|m| m.asd),
    };
    Ok(MetricsReport {
        per_class,
        mean,
        num_volumes: preds.len(),
        skipped,
    })
}
