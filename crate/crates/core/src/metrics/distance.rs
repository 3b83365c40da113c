use ndarray::Array3;

use super::BinaryMask3D;
use crate::error::{Error, Result};

/// Physical coordinates of a voxel set.
pub type PointSet = Vec<[f64; 3]>;

/// Foreground voxels with at least one background face neighbour. Space
/// outside the array counts as background; axes of extent 1 are ignored, so
/// a single slice uses 4-connectivity.
pub fn surface_mask(mask: &BinaryMask3D) -> Array3<bool> {
    let v = &mask.voxels;
    let (d, h, w) = v.dim();
    let dims = [d, h, w];
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if !v[[z, y, x]] {
            return false;
        }
        let idx = [z, y, x];
        for axis in 0..3 {
            if dims[axis] == 1 {
                continue;
            }
            for delta in [-1isize, 1] {
                let n = idx[axis] as isize + delta;
                if n < 0 || n >= dims[axis] as isize {
                    return true;
                }
                let mut j = idx;
                j[axis] = n as usize;
                if !v[j] {
                    return true;
                }
            }
        }
        false
    })
}

/// Surface voxels in physical coordinates (index times spacing), in
/// row-major order. Empty for an empty mask.
pub fn extract_surface(mask: &BinaryMask3D) -> PointSet {
    let s = mask.spacing;
    surface_mask(mask)
        .indexed_iter()
        .filter(|(_, &b)| b)
        .map(|((z, y, x), _)| [z as f64 * s[0], y as f64 * s[1], x as f64 * s[2]])
        .collect()
}

/// For every point of `a`, the distance to the nearest point of `b`, by
/// exhaustive search.
pub fn surface_distances_brute_force(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySurface(
            "distance to or from an empty point set".into(),
        ));
    }
    Ok(a.iter()
        .map(|p| {
            b.iter()
                .map(|q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// One pass of the lower-envelope distance transform along a line:
/// `out[p] = min_q f[q] + (w (p - q))^2` over sites with finite `f`.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    let w2 = w * w;
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let key = |i: usize| f[i] + w2 * (i * i) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let s = (key(q) - key(r)) / (2.0 * w2 * (q - r) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = p as f64 - v[k] as f64;
        *o = f[v[k]] + w2 * d * d;
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest `true`
/// voxel of `sites`, honouring anisotropic spacing.
pub fn squared_distance_transform(sites: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut g = sites.mapv(|b| if b { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = g.len_of(ndarray::Axis(axis));
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for mut lane in g.lanes_mut(ndarray::Axis(axis)) {
            line.iter_mut().zip(lane.iter()).for_each(|(l, &x)| *l = x);
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
            lane.iter_mut().zip(&out).for_each(|(x, &o)| *x = o);
        }
    }
    g
}

/// Directed surface distances from `a` to `b` via a distance transform of
/// `b`'s surface; ordered like [`extract_surface`] of `a`.
pub fn surface_distances(a: &BinaryMask3D, b: &BinaryMask3D) -> Result<Vec<f64>> {
    if a.voxels.dim() != b.voxels.dim() {
        return Err(Error::Shape(format!(
            "masks {:?} and {:?} differ",
            a.voxels.dim(),
            b.voxels.dim()
        )));
    }
    let sa = surface_mask(a);
    let sb = surface_mask(b);
    if !sa.iter().any(|&x| x) || !sb.iter().any(|&x| x) {
        return Err(Error::EmptySurface(
            "distance to or from an empty mask".into(),
        ));
    }
    let dt = squared_distance_transform(&sb, b.spacing);
    Ok(sa
        .iter()
        .zip(dt.iter())
        .filter(|(&s, _)| s)
        .map(|(_, &d)| d.sqrt())
        .collect())
}

/// Percentile `q` in `[0, 100]` with linear interpolation between order
/// statistics (position `q/100 * (n - 1)`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn hd95_from(ab: &[f64], ba: &[f64]) -> f64 {
    percentile(ab, 95.0).max(percentile(ba, 95.0))
}

fn asd_from(ab: &[f64], ba: &[f64]) -> f64 {
    (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64
}

/// Larger of the two directed 95th-percentile surface distances.
pub fn hd95(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    Ok(hd95_from(
        &surface_distances(pred, gt)?,
        &surface_distances(gt, pred)?,
    ))
}

/// Mean over the union of both directed surface-distance sets.
pub fn asd(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    Ok(asd_from(
        &surface_distances(pred, gt)?,
        &surface_distances(gt, pred)?,
    ))
}

/// Both distance metrics from one pair of transforms.
pub fn hd95_and_asd(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<(f64, f64)> {
    let ab = surface_distances(pred, gt)?;
    let ba = surface_distances(gt, pred)?;
    Ok((hd95_from(&ab, &ba), asd_from(&ab, &ba)))
}

/// [`hd95`] computed with exhaustive search.
pub fn hd95_brute_force(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    let (p, g) = (extract_surface(pred), extract_surface(gt));
    Ok(hd95_from(
        &surface_distances_brute_force(&p, &g)?,
        &surface_distances_brute_force(&g, &p)?,
    ))
}

/// [`asd`] computed with exhaustive search.
pub fn asd_brute_force(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    let (p, g) = (extract_surface(pred), extract_surface(gt));
    Ok(asd_from(
        &surface_distances_brute_force(&p, &g)?,
        &surface_distances_brute_force(&g, &p)?,
    ))
}

/// Exact (100th percentile) Hausdorff distance by exhaustive search.
pub fn hausdorff_brute_force(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    let (p, g) = (extract_surface(pred), extract_surface(gt));
    let ab = surface_distances_brute_force(&p, &g)?;
    let ba = surface_distances_brute_force(&g, &p)?;
    Ok(ab.into_iter().chain(ba).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(shape: (usize, usize, usize), at: [usize; 3]) -> BinaryMask3D {
        let mut v = Array3::from_elem(shape, false);
        v[at] = true;
        BinaryMask3D::new(v).unwrap()
    }

    #[test]
    fn single_voxel_surface_is_itself() {
        let m = single((3, 4, 5), [1, 2, 3]);
        assert_eq!(extract_surface(&m), vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn filled_cube_has_26_surface_voxels() {
        let mut v = Array3::from_elem((5, 5, 5), false);
        v.slice_mut(ndarray::s![1..4, 1..4, 1..4]).fill(true);
        assert_eq!(extract_surface(&BinaryMask3D::new(v).unwrap()).len(), 26);
        let full = BinaryMask3D::new(Array3::from_elem((3, 3, 3), true)).unwrap();
        assert_eq!(extract_surface(&full).len(), 26);
    }

    #[test]
    fn single_slice_uses_four_connectivity() {
        let mut v = Array3::from_elem((1, 5, 5), false);
        v.slice_mut(ndarray::s![0, 1..4, 1..4]).fill(true);
        assert_eq!(extract_surface(&BinaryMask3D::new(v).unwrap()).len(), 8);
    }

    #[test]
    fn offset_pair_is_five() {
        let a = single((2, 5, 6), [0, 0, 0]);
        let b = single((2, 5, 6), [0, 3, 4]);
        assert_eq!(surface_distances(&a, &b).unwrap(), vec![5.0]);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
        assert_eq!(asd(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn spacing_scales_distances() {
        let mut a = single((2, 5, 6), [0, 0, 0]);
        let mut b = single((2, 5, 6), [1, 3, 4]);
        let d1 = hd95(&a, &b).unwrap();
        a.spacing = [2.0, 2.0, 2.0];
        b.spacing = [2.0, 2.0, 2.0];
        assert!((hd95(&a, &b).unwrap() - 2.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
        assert!((percentile(&[0.0, 10.0], 95.0) - 9.5).abs() < 1e-12);
    }

    #[test]
    fn empty_surface_is_an_error() {
        let a = single((2, 2, 2), [0, 0, 0]);
        let b = BinaryMask3D::new(Array3::from_elem((2, 2, 2), false)).unwrap();
        assert!(matches!(hd95(&a, &b), Err(Error::EmptySurface(_))));
        assert!(surface_distances_brute_force(&[], &[[0.0; 3]]).is_err());
    }
}
