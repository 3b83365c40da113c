use rand::Rng;

use super::{join, kaiming_std, Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

pub struct ConvCache<T> {
    input: Tensor4<T>,
}

impl<T: Scalar> ConvCache<T> {
    pub fn input_shape(&self) -> [usize; 4] {
        self.input.shape()
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        Self::with_std(in_channels, out_channels, kernel, kaiming_std(fan_in), rng)
    }

    pub fn with_std(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::normal(vec![out_channels, in_channels, kernel, kernel], std, rng),
            bias: Param::filled(vec![out_channels], T::zero(), true),
        }
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// `x`: `(Cin, B, H, W)` -> `(Cout, B, H, W)`.
    pub fn forward(&self, x: Tensor4<T>) -> (Tensor4<T>, ConvCache<T>) {
        let [c, b, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let cols = b * h * w;
        let mut out = vec![T::zero(); self.out_channels * cols];
        if self.kernel == 1 {
            T::gemm(
                false,
                false,
                self.out_channels,
                cols,
                c,
                T::one(),
                &self.weight.value,
                x.data(),
                T::zero(),
                &mut out,
            );
        } else {
            let col = im2col(&x, self.kernel);
            T::gemm(
                false,
                false,
                self.out_channels,
                cols,
                self.col_rows(),
                T::one(),
                &self.weight.value,
                &col,
                T::zero(),
                &mut out,
            );
        }
        for (o, &bias) in self.bias.value.iter().enumerate() {
            if bias != T::zero() {
                out[o * cols..(o + 1) * cols]
                    .iter_mut()
                    .for_each(|v| *v += bias);
            }
        }
        let y = Tensor4::from_vec([self.out_channels, b, h, w], out).expect("conv output shape");
        (y, ConvCache { input: x })
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(
        &mut self,
        cache: ConvCache<T>,
        dy: &Tensor4<T>,
        need_input_grad: bool,
    ) -> Option<Tensor4<T>> {
        let x = cache.input;
        let [c, b, h, w] = x.shape();
        let cols = b * h * w;
        let k_rows = self.col_rows();
        for (o, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dy.data()[o * cols..(o + 1) * cols]
                .iter()
                .copied()
                .sum::<T>();
        }
        if self.kernel == 1 {
            T::gemm(
                false,
                true,
                self.out_channels,
                c,
                cols,
                T::one(),
                dy.data(),
                x.data(),
                T::one(),
                &mut self.weight.grad,
            );
            if !need_input_grad {
                return None;
            }
            let mut dx = vec![T::zero(); c * cols];
            T::gemm(
                true,
                false,
                c,
                cols,
                self.out_channels,
                T::one(),
                &self.weight.value,
                dy.data(),
                T::zero(),
                &mut dx,
            );
            return Some(Tensor4::from_vec([c, b, h, w], dx).expect("shape"));
        }
        let col = im2col(&x, self.kernel);
        T::gemm(
            false,
            true,
            self.out_channels,
            k_rows,
            cols,
            T::one(),
            dy.data(),
            &col,
            T::one(),
            &mut self.weight.grad,
        );
        if !need_input_grad {
            return None;
        }
        let mut dcol = col;
        T::gemm(
            true,
            false,
            k_rows,
            cols,
            self.out_channels,
            T::one(),
            &self.weight.value,
            dy.data(),
            T::zero(),
            &mut dcol,
        );
        Some(col2im(&dcol, [c, b, h, w], self.kernel))
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Column matrix `(C*k*k, B*H*W)` for a same-padded convolution.
fn im2col<T: Scalar>(x: &Tensor4<T>, k: usize) -> Vec<T> {
    let [c, b, h, w] = x.shape();
    let pad = (k / 2) as isize;
    let plane = h * w;
    let cols = b * plane;
    let mut col = vec![T::zero(); c * k * k * cols];
    let src = x.data();
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                let (x_lo, x_hi) = valid_range(w, dx);
                for bi in 0..b {
                    let src_plane = &src[(ci * b + bi) * plane..(ci * b + bi + 1) * plane];
                    let dst_plane = &mut dst_row[bi * plane..(bi + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let s0 = sy as usize * w;
                        let d = &mut dst_plane[y * w + x_lo..y * w + x_hi];
                        let s = &src_plane[(s0 as isize + x_lo as isize + dx) as usize
                            ..(s0 as isize + x_hi as isize + dx) as usize];
                        d.copy_from_slice(s);
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], shape: [usize; 4], k: usize) -> Tensor4<T> {
    let [c, b, h, w] = shape;
    let pad = (k / 2) as isize;
    let plane = h * w;
    let cols = b * plane;
    let mut out = Tensor4::zeros(shape);
    let dst = out.data_mut();
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                let (x_lo, x_hi) = valid_range(w, dx);
                for bi in 0..b {
                    let dst_plane = &mut dst[(ci * b + bi) * plane..(ci * b + bi + 1) * plane];
                    let src_plane = &src_row[bi * plane..(bi + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let s0 = sy as usize * w;
                        let g = &src_plane[y * w + x_lo..y * w + x_hi];
                        let d = &mut dst_plane[(s0 as isize + x_lo as isize + dx) as usize
                            ..(s0 as isize + x_hi as isize + dx) as usize];
                        for (a, &v) in d.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output columns `[lo, hi)` whose shifted source column lies inside `[0, w)`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
    (lo.min(w), hi)
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stored `(Cin, Cout, 2, 2)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

pub struct ConvTransposeCache<T> {
    input: Tensor4<T>,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: Param::normal(
                vec![in_channels, out_channels, 2, 2],
                kaiming_std(in_channels),
                rng,
            ),
            bias: Param::filled(vec![out_channels], T::zero(), true),
        }
    }

    pub fn forward(&self, x: Tensor4<T>) -> (Tensor4<T>, ConvTransposeCache<T>) {
        let [c, b, h, w] = x.shape();
        assert_eq!(c, self.in_channels);
        let cols = b * h * w;
        let rows = self.out_channels * 4;
        let mut y4 = vec![T::zero(); rows * cols];
        T::gemm(
            true,
            false,
            rows,
            cols,
            c,
            T::one(),
            &self.weight.value,
            x.data(),
            T::zero(),
            &mut y4,
        );
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor4::zeros([self.out_channels, b, oh, ow]);
        let dst = out.data_mut();
        for co in 0..self.out_channels {
            let bias = self.bias.value[co];
            for tap in 0..4 {
                let (a, e) = (tap / 2, tap % 2);
                let src = &y4[(co * 4 + tap) * cols..(co * 4 + tap + 1) * cols];
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            dst[((co * b + bi) * oh + 2 * i + a) * ow + 2 * j + e] =
                                src[(bi * h + i) * w + j] + bias;
                        }
                    }
                }
            }
        }
        (out, ConvTransposeCache { input: x })
    }

    pub fn backward(&mut self, cache: ConvTransposeCache<T>, dy: &Tensor4<T>) -> Tensor4<T> {
        let x = cache.input;
        let [c, b, h, w] = x.shape();
        let cols = b * h * w;
        let rows = self.out_channels * 4;
        let (oh, ow) = (2 * h, 2 * w);
        let src = dy.data();
        let mut dy4 = vec![T::zero(); rows * cols];
        for co in 0..self.out_channels {
            let mut bsum = T::zero();
            for tap in 0..4 {
                let (a, e) = (tap / 2, tap % 2);
                let dst = &mut dy4[(co * 4 + tap) * cols..(co * 4 + tap + 1) * cols];
                for bi in 0..b {
                    for i in 0..h {
                        for j in 0..w {
                            let g = src[((co * b + bi) * oh + 2 * i + a) * ow + 2 * j + e];
                            dst[(bi * h + i) * w + j] = g;
                            bsum += g;
                        }
                    }
                }
            }
            self.bias.grad[co] += bsum;
        }
        // weight (Cin x Cout*4) += X (Cin x cols) * dY4^T
        T::gemm(
            false,
            true,
            c,
            rows,
            cols,
            T::one(),
            x.data(),
            &dy4,
            T::one(),
            &mut self.weight.grad,
        );
        let mut dx = vec![T::zero(); c * cols];
        T::gemm(
            false,
            false,
            c,
            cols,
            rows,
            T::one(),
            &self.weight.value,
            &dy4,
            T::zero(),
            &mut dx,
        );
        Tensor4::from_vec([c, b, h, w], dx).expect("shape")
    }
}

impl<T: Scalar> Parameterized<T> for ConvTranspose2x2<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution oracle on a `(C, B, H, W)` map.
    fn conv_naive(conv: &Conv2d<f64>, x: &Tensor4<f64>) -> Tensor4<f64> {
        let [c, b, h, w] = x.shape();
        let k = conv.kernel as isize;
        let pad = k / 2;
        Tensor4::from_fn([conv.out_channels, b, h, w], |[o, bi, y, xx]| {
            let mut acc = conv.bias.value[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky - pad;
                        let sx = xx as isize + kx - pad;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let wi =
                            ((o * c + ci) * k as usize + ky as usize) * k as usize + kx as usize;
                        acc += conv.weight.value[wi] * x.get([ci, bi, sy as usize, sx as usize]);
                    }
                }
            }
            acc
        })
    }

    fn random_map(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv3x3_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(3, 4, 3, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
        let x = random_map([3, 2, 5, 6], &mut rng);
        let (y, _) = conv.forward(x.clone());
        assert!(y.max_abs_diff(&conv_naive(&conv, &x)) < 1e-12);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, &mut rng);
            let x = random_map([2, 2, 4, 3], &mut rng);
            let r = random_map([3, 2, 4, 3], &mut rng);
            let loss = |c: &Conv2d<f64>, x: &Tensor4<f64>| -> f64 {
                let (y, _) = c.forward(x.clone());
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = conv.forward(x.clone());
            let dx = conv.backward(cache, &r, true).unwrap();
            let eps = 1e-6;
            for i in [0, 5, 13, 20] {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
                assert!((fd - dx.data()[i]).abs() < 1e-7, "k={k} dx[{i}]");
            }
            for i in 0..conv.weight.len().min(12) {
                let mut cp = conv.clone();
                cp.weight.value[i] += eps;
                let mut cm = conv.clone();
                cm.weight.value[i] -= eps;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
                assert!((fd - conv.weight.grad[i]).abs() < 1e-7, "k={k} dw[{i}]");
            }
        }
    }

    #[test]
    fn transpose_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut up = ConvTranspose2x2::<f64>::new(3, 2, &mut rng);
        up.bias.value = vec![0.5, -0.5];
        let x = random_map([3, 2, 2, 3], &mut rng);
        let r = random_map([2, 2, 4, 6], &mut rng);
        let loss = |u: &ConvTranspose2x2<f64>, x: &Tensor4<f64>| -> f64 {
            let (y, _) = u.forward(x.clone());
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = up.forward(x.clone());
        let dx = up.backward(cache, &r);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&up, &xp) - loss(&up, &xm)) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-7);
        }
        for i in 0..up.weight.len() {
            let mut p = up.clone();
            p.weight.value[i] += eps;
            let mut m = up.clone();
            m.weight.value[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - up.weight.grad[i]).abs() < 1e-7);
        }
    }
}
