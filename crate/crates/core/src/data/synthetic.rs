use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{fixed_partition, VolumeSample};
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of the cardiac phantom generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_volumes: usize,
    pub slices_per_volume: usize,
    /// `(H, W)` of every generated slice.
    pub image_size: [usize; 2],
    pub num_classes: usize,
    /// Noise standard deviation relative to the unit intensity scale.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_volumes: 10,
            slices_per_volume: 12,
            image_size: [80, 96],
            num_classes: 4,
            noise_std: 0.1,
            seed: 1337,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_volumes == 0 {
            return Err(Error::config("num_volumes", "must be positive"));
        }
        if self.slices_per_volume == 0 {
            return Err(Error::config("slices_per_volume", "must be positive"));
        }
        if self.image_size.iter().any(|&s| s < 16) {
            return Err(Error::config(
                "image_size",
                "both sides must be at least 16",
            ));
        }
        if self.num_classes != 4 {
            return Err(Error::config(
                "num_classes",
                "the phantom has exactly 4 classes",
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(
                "noise_std",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Smallest LV/RV intensity difference within one volume.
const BLOOD_GAP: f64 = 0.03;

/// Per-volume anatomy, drawn once and deformed smoothly along the slice axis.
struct Anatomy {
    center: (f64, f64),
    lv_radii: (f64, f64),
    tilt: f64,
    wall: f64,
    rv_angle: f64,
    rv_scale: (f64, f64),
    drift: (f64, f64),
    twist: f64,
    /// Intensity of classes 0..4 on the unit scale.
    levels: [f64; 4],
    gain: f64,
}

impl Anatomy {
    fn draw(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = h.min(w) as f64;
        let a = m * rng.random_range(0.11..0.15);
        Self {
            center: (
                h as f64 / 2.0 + m * rng.random_range(-0.07..0.07),
                w as f64 / 2.0 + m * rng.random_range(-0.07..0.07),
            ),
            lv_radii: (a, a * rng.random_range(0.85..1.15)),
            tilt: rng.random_range(0.0..std::f64::consts::PI),
            wall: m * rng.random_range(0.05..0.07),
            rv_angle: std::f64::consts::PI + rng.random_range(-0.6..0.6),
            rv_scale: (rng.random_range(1.5..1.9), rng.random_range(1.1..1.35)),
            drift: (
                m * rng.random_range(-0.04..0.04),
                m * rng.random_range(-0.04..0.04),
            ),
            twist: rng.random_range(-0.4..0.4),
            levels: Self::draw_levels(rng),
            gain: rng.random_range(200.0..1000.0),
        }
    }

    /// Background, RV, myocardium, LV. Both blood pools are bright and
    /// their order varies between volumes, so telling them apart takes shape.
    fn draw_levels(rng: &mut ChaCha8Rng) -> [f64; 4] {
        let background = rng.random_range(0.05..0.2);
        let myo = rng.random_range(0.3..0.45);
        let rv: f64 = rng.random_range(0.72..0.95);
        let mut lv = rng.random_range(0.72..0.95);
        if (lv - rv).abs() < BLOOD_GAP {
            lv = if rv > 0.835 {
                rv - BLOOD_GAP
            } else {
                rv + BLOOD_GAP
            };
        }
        [background, rv, myo, lv]
    }

    /// Label of pixel `(y, x)` on a slice at relative depth `z` in `[0, 1]`.
    fn label_at(&self, y: f64, x: f64, z: f64) -> u8 {
        // base to apex: shrink, drift and twist smoothly
        let s = 1.0 - 0.4 * z.powf(1.5);
        let cy = self.center.0 + self.drift.0 * z;
        let cx = self.center.1 + self.drift.1 * z;
        let tilt = self.tilt + self.twist * z;
        let (ra, rb) = (self.lv_radii.0 * s, self.lv_radii.1 * s);
        let wall = self.wall * (0.8 + 0.2 * s);
        let inside = |cy: f64, cx: f64, ra: f64, rb: f64, angle: f64| {
            let (dy, dx) = (y - cy, x - cx);
            let (sin, cos) = angle.sin_cos();
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
        };
        if inside(cy, cx, ra, rb, tilt) {
            return 3;
        }
        if inside(cy, cx, ra + wall, rb + wall, tilt) {
            return 2;
        }
        let angle = self.rv_angle + self.twist * z;
        let reach = (ra.max(rb) + wall) * 1.05;
        let (ry, rx) = (cy + reach * angle.sin(), cx + reach * angle.cos());
        let rv_radii = (ra * self.rv_scale.0, rb * self.rv_scale.1);
        // long axis of the crescent wraps around the myocardium
        if inside(ry, rx, rv_radii.1, rv_radii.0, angle) {
            return 1;
        }
        0
    }
}

/// Generates cardiac-like phantom volumes: an LV disk (class 3) inside a
/// myocardial annulus (class 2) with an RV crescent (class 1) beside it.
/// Volume `i` gets patient id `synthNNN` and the fixed partition tag.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::streams::SYNTHETIC);
    let [h, w] = spec.image_size;
    let d = spec.slices_per_volume;
    let noise =
        Normal::new(0.0, spec.noise_std).map_err(|e| Error::config("noise_std", e.to_string()))?;
    let mut out = Vec::with_capacity(spec.num_volumes);
    for i in 0..spec.num_volumes {
        let anatomy = Anatomy::draw(h, w, &mut rng);
        let label = Array3::from_shape_fn((d, h, w), |(k, y, x)| {
            let z = if d > 1 {
                k as f64 / (d - 1) as f64
            } else {
                0.0
            };
            anatomy.label_at(y as f64, x as f64, z)
        });
        let mut image = Array3::<f32>::zeros((d, h, w));
        for (v, &l) in image.iter_mut().zip(label.iter()) {
            let n = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            *v = ((anatomy.levels[l as usize] + n) * anatomy.gain) as f32;
        }
        let id = format!("synth{i:03}");
        out.push(VolumeSample {
            image,
            label,
            patient_id: id.clone(),
            volume_id: id,
            split_tag: fixed_partition(i),
        });
    }
    Ok(out)
}
