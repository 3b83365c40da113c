use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Linear interpolation taps along one axis with aligned corners: output
/// index `i` samples source position `i * (n_in - 1) / (n_out - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl Resampler {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        assert!(n_in > 0 && n_out > 0);
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let pos = if n_out > 1 {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            };
            let l = (pos.floor() as usize).min(n_in - 1);
            let h = (l + 1).min(n_in - 1);
            lo.push(l);
            hi.push(h);
            frac.push(pos - l as f64);
        }
        Self { lo, hi, frac }
    }

    /// Nearest source index for each output index (same coordinate map).
    pub fn nearest(&self) -> Vec<usize> {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(&self.frac)
            .map(|((&l, &h), &f)| if f >= 0.5 { h } else { l })
            .collect()
    }
}

/// Separable bilinear resize of every plane of a 4-D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearResize {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    rows: Resampler,
    cols: Resampler,
}

impl BilinearResize {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self {
            in_hw,
            out_hw,
            rows: Resampler::new(in_hw.0, out_hw.0),
            cols: Resampler::new(in_hw.1, out_hw.1),
        }
    }

    pub fn resize_plane<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        let (_, w) = self.in_hw;
        let (oh, ow) = self.out_hw;
        for y in 0..oh {
            let (r0, r1, fy) = (self.rows.lo[y], self.rows.hi[y], T::lit(self.rows.frac[y]));
            for x in 0..ow {
                let (c0, c1, fx) = (self.cols.lo[x], self.cols.hi[x], T::lit(self.cols.frac[x]));
                let top = src[r0 * w + c0] * (T::one() - fx) + src[r0 * w + c1] * fx;
                let bot = src[r1 * w + c0] * (T::one() - fx) + src[r1 * w + c1] * fx;
                dst[y * ow + x] = top * (T::one() - fy) + bot * fy;
            }
        }
    }

    fn scatter_plane<T: Scalar>(&self, dy: &[T], dx: &mut [T]) {
        let (_, w) = self.in_hw;
        let (oh, ow) = self.out_hw;
        for y in 0..oh {
            let (r0, r1, fy) = (self.rows.lo[y], self.rows.hi[y], T::lit(self.rows.frac[y]));
            for x in 0..ow {
                let (c0, c1, fx) = (self.cols.lo[x], self.cols.hi[x], T::lit(self.cols.frac[x]));
                let g = dy[y * ow + x];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                dx[r0 * w + c0] += gt * (T::one() - fx);
                dx[r0 * w + c1] += gt * fx;
                dx[r1 * w + c0] += gb * (T::one() - fx);
                dx[r1 * w + c1] += gb * fx;
            }
        }
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor4<T>) -> Tensor4<T> {
        let [a, b, h, w] = x.shape();
        assert_eq!((h, w), self.in_hw, "resize input size");
        if self.in_hw == self.out_hw {
            return x.clone();
        }
        let mut out = Tensor4::zeros([a, b, self.out_hw.0, self.out_hw.1]);
        for i in 0..a {
            for j in 0..b {
                self.resize_plane(x.plane_slice(i, j), out.plane_slice_mut(i, j));
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor4<T>) -> Tensor4<T> {
        let [a, b, _, _] = dy.shape();
        if self.in_hw == self.out_hw {
            return dy.clone();
        }
        let mut dx = Tensor4::zeros([a, b, self.in_hw.0, self.in_hw.1]);
        for i in 0..a {
            for j in 0..b {
                self.scatter_plane(dy.plane_slice(i, j), dx.plane_slice_mut(i, j));
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_corners_hit_source_corners() {
        let r = BilinearResize::new((2, 2), (3, 3));
        let x = Tensor4::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = r.forward(&x);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn backward_is_the_adjoint_of_forward() {
        let r = BilinearResize::new((3, 4), (8, 7));
        let x = Tensor4::<f64>::from_fn([1, 2, 3, 4], |i| {
            ((i[1] * 13 + i[2] * 5 + i[3]) as f64).sin()
        });
        let g = Tensor4::<f64>::from_fn([1, 2, 8, 7], |i| {
            ((i[1] * 3 + i[2] * 11 + i[3]) as f64).cos()
        });
        let lhs: f64 = r
            .forward(&x)
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(r.backward(&g).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn nearest_taps_stay_in_range() {
        let r = Resampler::new(5, 12);
        assert!(r.nearest().iter().all(|&i| i < 5));
        assert_eq!(r.nearest()[0], 0);
        assert_eq!(*r.nearest().last().unwrap(), 4);
    }
}
