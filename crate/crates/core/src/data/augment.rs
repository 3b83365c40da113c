use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flip {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RotationMode {
    /// Multiples of 90 degrees only.
    RightAngles,
    /// Uniform angle in `[-max_degrees, max_degrees]`; labels are
    /// resampled nearest-neighbour, outside pixels become 0.
    Arbitrary { max_degrees: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub rotation_probability: f64,
    pub rotation: RotationMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            rotation_probability: 0.5,
            rotation: RotationMode::RightAngles,
        }
    }
}

/// The geometric transform applied to one slice pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub flip: Option<Flip>,
    /// Counter-clockwise quarter turns (0..=3).
    pub quarter_turns: u8,
    /// Arbitrary rotation in degrees, applied after the quarter turns.
    pub angle_degrees: Option<f64>,
}

impl AugmentRecord {
    pub fn is_identity(&self) -> bool {
        self.flip.is_none() && self.quarter_turns == 0 && self.angle_degrees.is_none()
    }
}

/// Draws a transform. Draw order: flip coin, flip axis, rotation coin,
/// rotation amount. Quarter turns of non-square slices are limited to 2.
pub fn draw_record<R: Rng + ?Sized>(
    cfg: &AugmentConfig,
    square: bool,
    rng: &mut R,
) -> AugmentRecord {
    let mut rec = AugmentRecord::default();
    if rng.random::<f64>() < cfg.flip_probability {
        rec.flip = Some(if rng.random::<f64>() < 0.5 {
            Flip::Horizontal
        } else {
            Flip::Vertical
        });
    }
    if rng.random::<f64>() < cfg.rotation_probability {
        match cfg.rotation {
            RotationMode::RightAngles => {
                rec.quarter_turns = if square { rng.random_range(1..=3) } else { 2 };
            }
            RotationMode::Arbitrary { max_degrees } => {
                rec.angle_degrees = Some(rng.random_range(-max_degrees..=max_degrees));
            }
        }
    }
    rec
}

fn flip<V: Copy>(a: &Array2<V>, f: Flip) -> Array2<V> {
    match f {
        Flip::Horizontal => a.slice(s![.., ..;-1]).to_owned(),
        Flip::Vertical => a.slice(s![..;-1, ..]).to_owned(),
    }
}

/// Counter-clockwise rotation by `k` quarter turns.
fn rot90<V: Copy>(a: &Array2<V>, k: u8) -> Array2<V> {
    match k % 4 {
        0 => a.clone(),
        1 => a.t().slice(s![..;-1, ..]).to_owned(),
        2 => a.slice(s![..;-1, ..;-1]).to_owned(),
        _ => a.t().slice(s![.., ..;-1]).to_owned(),
    }
}

/// Rotation about the slice centre; `sample` reads the source at a
/// fractional position or returns `None` outside the slice.
fn rotate_with<V: Copy>(
    a: &Array2<V>,
    degrees: f64,
    fill: V,
    sample: impl Fn(&Array2<V>, f64, f64) -> Option<V>,
) -> Array2<V> {
    let (h, w) = a.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sy = cy + cos * dy - sin * dx;
        let sx = cx + sin * dy + cos * dx;
        sample(a, sy, sx).unwrap_or(fill)
    })
}

fn sample_linear(a: &Array2<f32>, y: f64, x: f64) -> Option<f32> {
    let (h, w) = a.dim();
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return None;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = a[[y0, x0]] * (1.0 - fx) + a[[y0, x1]] * fx;
    let bot = a[[y1, x0]] * (1.0 - fx) + a[[y1, x1]] * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

fn sample_nearest<V: Copy>(a: &Array2<V>, y: f64, x: f64) -> Option<V> {
    let (h, w) = a.dim();
    let (ry, rx) = (y.round(), x.round());
    if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
        return None;
    }
    Some(a[[ry as usize, rx as usize]])
}

fn apply_geometry<V: Copy>(
    a: &Array2<V>,
    rec: &AugmentRecord,
    rotate: impl Fn(&Array2<V>, f64) -> Array2<V>,
) -> Array2<V> {
    let mut out = match rec.flip {
        Some(f) => flip(a, f),
        None => a.clone(),
    };
    if rec.quarter_turns != 0 {
        out = rot90(&out, rec.quarter_turns);
    }
    if let Some(deg) = rec.angle_degrees {
        out = rotate(&out, deg);
    }
    out
}

pub(crate) fn apply_to_image(image: &Array2<f32>, rec: &AugmentRecord) -> Array2<f32> {
    apply_geometry(image, rec, |a, d| rotate_with(a, d, 0.0, sample_linear))
}

pub(crate) fn apply_to_label(label: &Array2<u8>, rec: &AugmentRecord) -> Array2<u8> {
    apply_geometry(label, rec, |a, d| rotate_with(a, d, 0u8, sample_nearest))
}

/// Applies a recorded transform to an image/label pair.
pub fn apply_record(
    image: &Array2<f32>,
    label: &Array2<u8>,
    rec: &AugmentRecord,
) -> (Array2<f32>, Array2<u8>) {
    (apply_to_image(image, rec), apply_to_label(label, rec))
}

/// Random flip and rotation applied identically to image and label.
pub fn augment<R: Rng + ?Sized>(
    image: &Array2<f32>,
    label: &Array2<u8>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Array2<f32>, Array2<u8>, AugmentRecord) {
    let (h, w) = image.dim();
    let rec = draw_record(cfg, h == w, rng);
    let (i, l) = apply_record(image, label, &rec);
    (i, l, rec)
}
