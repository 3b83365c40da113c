use rand::Rng;

use super::{join, Conv2d, ConvCache, Mode, Param, Parameterized, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
}

/// Normalized activations plus the batch statistics that produced them.
pub struct NormCache<T> {
    x_hat: Tensor4<T>,
    /// Sample ranges normalized separately.
    groups: Vec<(usize, usize)>,
    /// Per channel, per group.
    inv_std: Vec<T>,
    /// Whole-batch mean and unbiased variance; `None` in eval mode.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Sample ranges for a batch of `b` split after the first `split` samples.
pub fn bn_groups(b: usize, split: Option<usize>) -> Vec<(usize, usize)> {
    match split {
        Some(s) if s > 0 && s < b => vec![(0, s), (s, b)],
        _ => vec![(0, b)],
    }
}

fn mean_and_sq<T: Scalar>(v: &[T]) -> (T, T) {
    let mean = v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len());
    let ss = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>();
    (mean, ss)
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], T::one(), true),
            beta: Param::filled(vec![channels], T::zero(), true),
            running_mean: Param::filled(vec![channels], T::zero(), false),
            running_var: Param::filled(vec![channels], T::one(), false),
        }
    }

    /// Returns the affine output and the cache. `x` is `(C, B, H, W)`. In
    /// train mode each sample group given by `split` (see [`bn_groups`]) is
    /// normalized with its own statistics.
    pub fn forward(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
        split: Option<usize>,
    ) -> (Tensor4<T>, NormCache<T>) {
        let [c, b, h, w] = x.shape();
        let (n, hw) = (b * h * w, h * w);
        let eps = T::lit(BN_EPS);
        let groups = match mode {
            Mode::Train => bn_groups(b, split),
            Mode::Eval => vec![(0, b)],
        };
        let mut x_hat = Tensor4::zeros(x.shape());
        let mut y = Tensor4::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(c * groups.len());
        let mut stats = (Vec::with_capacity(c), Vec::with_capacity(c));
        for ch in 0..c {
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            if mode == Mode::Train {
                let (mean, ss) = mean_and_sq(&x.data()[ch * n..(ch + 1) * n]);
                stats.0.push(mean);
                stats.1.push(if n > 1 {
                    ss / T::from_usize_lossy(n - 1)
                } else {
                    ss
                });
            }
            for &(g0, g1) in &groups {
                let range = ch * n + g0 * hw..ch * n + g1 * hw;
                let src = &x.data()[range.clone()];
                let (mean, var) = match mode {
                    Mode::Train => {
                        let (mean, ss) = mean_and_sq(src);
                        (mean, ss / T::from_usize_lossy(src.len()))
                    }
                    Mode::Eval => (self.running_mean.value[ch], self.running_var.value[ch]),
                };
                let is = (var + eps).sqrt().recip();
                inv_std.push(is);
                let xh = &mut x_hat.data_mut()[range.clone()];
                for (d, &s) in xh.iter_mut().zip(src) {
                    *d = (s - mean) * is;
                }
                for (o, &v) in y.data_mut()[range].iter_mut().zip(xh.iter()) {
                    *o = g * v + bt;
                }
            }
        }
        let batch_stats = (mode == Mode::Train).then_some(stats);
        (
            y,
            NormCache {
                x_hat,
                groups,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Gradient of the normalized output `dz` back to the input.
    pub fn backward(&mut self, cache: &NormCache<T>, dz: &Tensor4<T>) -> Tensor4<T> {
        let [c, b, h, w] = dz.shape();
        let (n, hw) = (b * h * w, h * w);
        let mut dx = Tensor4::zeros(dz.shape());
        let ng = cache.groups.len();
        for ch in 0..c {
            let gamma = self.gamma.value[ch];
            for (gi, &(g0, g1)) in cache.groups.iter().enumerate() {
                let range = ch * n + g0 * hw..ch * n + g1 * hw;
                let g = &dz.data()[range.clone()];
                let xh = &cache.x_hat.data()[range.clone()];
                let sum_g = g.iter().copied().sum::<T>();
                let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                self.gamma.grad[ch] += sum_gx;
                self.beta.grad[ch] += sum_g;
                let is = cache.inv_std[ch * ng + gi];
                let out = &mut dx.data_mut()[range];
                if cache.batch_stats.is_some() {
                    let nt = T::from_usize_lossy(g.len());
                    let k = gamma * is / nt;
                    for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                        *o = k * (nt * gv - sum_g - xv * sum_gx);
                    }
                } else {
                    for (o, &gv) in out.iter_mut().zip(g) {
                        *o = gamma * is * gv;
                    }
                }
            }
        }
        dx
    }

    pub fn update_running_stats(&mut self, cache: &NormCache<T>) {
        if let Some((mean, var)) = &cache.batch_stats {
            let m = T::lit(BN_MOMENTUM);
            for ch in 0..mean.len() {
                let rm = &mut self.running_mean.value[ch];
                *rm = (T::one() - m) * *rm + m * mean[ch];
                let rv = &mut self.running_var.value[ch];
                *rv = (T::one() - m) * *rv + m * var[ch];
            }
        }
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// 3x3 convolution -> batch norm -> leaky rectifier.
#[derive(Debug, Clone)]
pub struct ConvBnAct<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

pub struct ConvBnActCache<T> {
    conv: ConvCache<T>,
    pub norm: NormCache<T>,
    /// Sign of the pre-activation, packed per element.
    positive: Vec<bool>,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    pub fn forward(
        &self,
        x: Tensor4<T>,
        mode: Mode,
        split: Option<usize>,
    ) -> (Tensor4<T>, ConvBnActCache<T>) {
        let (z, conv) = self.conv.forward(x);
        let (mut y, norm) = self.bn.forward(&z, mode, split);
        let slope = T::lit(LEAKY_SLOPE);
        let mut positive = Vec::with_capacity(y.len());
        for v in y.data_mut() {
            let p = *v > T::zero();
            positive.push(p);
            if !p {
                *v *= slope;
            }
        }
        (
            y,
            ConvBnActCache {
                conv,
                norm,
                positive,
            },
        )
    }

    pub fn backward(
        &mut self,
        cache: ConvBnActCache<T>,
        dy: &Tensor4<T>,
        need_input_grad: bool,
    ) -> Option<Tensor4<T>> {
        let slope = T::lit(LEAKY_SLOPE);
        let mut dz = dy.clone();
        for (g, &p) in dz.data_mut().iter_mut().zip(&cache.positive) {
            if !p {
                *g *= slope;
            }
        }
        let dconv = self.bn.backward(&cache.norm, &dz);
        self.conv.backward(cache.conv, &dconv, need_input_grad)
    }
}

impl<T: Scalar> Parameterized<T> for ConvBnAct<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Two stacked [`ConvBnAct`] units.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub first: ConvBnAct<T>,
    pub second: ConvBnAct<T>,
}

pub struct ConvBlockCache<T> {
    pub first: ConvBnActCache<T>,
    pub second: ConvBnActCache<T>,
}

impl<T: Scalar> ConvBlockCache<T> {
    pub fn output_shape(&self) -> [usize; 4] {
        self.second.norm.x_hat.shape()
    }
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let first = ConvBnAct::new(cin, cout, rng);
        let second = ConvBnAct::new(cout, cout, rng);
        Self { first, second }
    }

    pub fn forward(
        &self,
        x: Tensor4<T>,
        mode: Mode,
        split: Option<usize>,
    ) -> (Tensor4<T>, ConvBlockCache<T>) {
        let (h, first) = self.first.forward(x, mode, split);
        let (y, second) = self.second.forward(h, mode, split);
        (y, ConvBlockCache { first, second })
    }

    pub fn backward(
        &mut self,
        cache: ConvBlockCache<T>,
        dy: &Tensor4<T>,
        need_input_grad: bool,
    ) -> Option<Tensor4<T>> {
        let dh = self
            .second
            .backward(cache.second, dy, true)
            .expect("inner gradient");
        self.first.backward(cache.first, &dh, need_input_grad)
    }

    pub fn update_running_stats(&mut self, cache: &ConvBlockCache<T>) {
        self.first.bn.update_running_stats(&cache.first.norm);
        self.second.bn.update_running_stats(&cache.second.norm);
    }
}

impl<T: Scalar> Parameterized<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.first.visit(&join(prefix, "0"), f);
        self.second.visit(&join(prefix, "1"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.first.visit_mut(&join(prefix, "0"), f);
        self.second.visit_mut(&join(prefix, "1"), f);
    }
}
