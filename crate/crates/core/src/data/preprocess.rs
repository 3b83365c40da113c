use ndarray::Array2;

use crate::nn::Resampler;

/// Min-max normalization to `[0, 1]`; constant slices become all zeros.
pub fn normalize_slice(slice: &Array2<f32>) -> Array2<f32> {
    let (lo, hi) = slice
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 0.0) {
        return Array2::zeros(slice.dim());
    }
    slice.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Bilinear zoom with aligned corners.
pub fn resize_bilinear(slice: &Array2<f32>, target: (usize, usize)) -> Array2<f32> {
    let (h, w) = slice.dim();
    if (h, w) == target {
        return slice.clone();
    }
    let rows = Resampler::new(h, target.0);
    let cols = Resampler::new(w, target.1);
    Array2::from_shape_fn(target, |(y, x)| {
        let (r0, r1, fy) = (rows.lo[y], rows.hi[y], rows.frac[y] as f32);
        let (c0, c1, fx) = (cols.lo[x], cols.hi[x], cols.frac[x] as f32);
        let top = slice[[r0, c0]] * (1.0 - fx) + slice[[r0, c1]] * fx;
        let bot = slice[[r1, c0]] * (1.0 - fx) + slice[[r1, c1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Nearest-neighbour zoom on the same coordinate map as [`resize_bilinear`].
pub fn resize_nearest<V: Copy>(slice: &Array2<V>, target: (usize, usize)) -> Array2<V> {
    let (h, w) = slice.dim();
    let rows = Resampler::new(h, target.0).nearest();
    let cols = Resampler::new(w, target.1).nearest();
    Array2::from_shape_fn(target, |(y, x)| slice[[rows[y], cols[x]]])
}

/// Normalize then zoom an image slice to `target`.
pub fn preprocess_slice(slice: &Array2<f32>, target: (usize, usize)) -> Array2<f32> {
    let z = resize_bilinear(&normalize_slice(slice), target);
    // interpolation of values in [0,1] stays in [0,1] up to rounding
    z.mapv(|v| v.clamp(0.0, 1.0))
}

pub fn preprocess_label(label: &Array2<u8>, target: (usize, usize)) -> Array2<u8> {
    resize_nearest(label, target)
}
