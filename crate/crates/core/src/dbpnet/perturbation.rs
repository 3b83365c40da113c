//! Multiplicative feature perturbations for the auxiliary heads.

use rand::Rng;

use super::config::PerturbationKind;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Elementwise dropout rate of the `dropout` perturbation.
pub const AUX_DROPOUT_RATE: f64 = 0.5;

/// Parameters of the stochastic perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationParams {
    pub noise_range: f64,
    pub threshold_range: [f64; 2],
    pub dropout_rate: f64,
}

impl Default for PerturbationParams {
    fn default() -> Self {
        Self {
            noise_range: 0.3,
            threshold_range: [0.7, 0.9],
            dropout_rate: AUX_DROPOUT_RATE,
        }
    }
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() >= rate {
                keep
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Multiplier tensor realizing `kind` on channel-major features `(K, B, h, w)`.
pub(crate) fn perturbation_mask<T: Scalar, R: Rng + ?Sized>(
    features: &Tensor4<T>,
    kind: PerturbationKind,
    params: &PerturbationParams,
    rng: &mut R,
) -> Tensor4<T> {
    let shape = features.shape();
    match kind {
        PerturbationKind::Dropout => {
            let m = dropout_mask(features.len(), params.dropout_rate, rng);
            Tensor4::from_vec(shape, m).expect("mask shape")
        }
        PerturbationKind::FeatureNoise => {
            let r = params.noise_range;
            let data = (0..features.len())
                .map(|_| {
                    let u = if r > 0.0 {
                        rng.random_range(-r..=r)
                    } else {
                        0.0
                    };
                    T::lit(1.0 + u)
                })
                .collect();
            Tensor4::from_vec(shape, data).expect("mask shape")
        }
        PerturbationKind::FeatureDropout => {
            let [k, b, _, _] = shape;
            let plane = T::from_usize_lossy(features.plane());
            let mut mask = Tensor4::full(shape, T::one());
            for bi in 0..b {
                let attention: Vec<T> = (0..k)
                    .map(|c| features.plane_slice(c, bi).iter().copied().sum::<T>() / plane)
                    .collect();
                let max = attention.iter().copied().fold(T::neg_infinity(), T::max);
                let [lo, hi] = params.threshold_range;
                let frac = if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                };
                let threshold = max * T::lit(frac);
                for (c, &a) in attention.iter().enumerate() {
                    if a > threshold {
                        mask.plane_slice_mut(c, bi)
                            .iter_mut()
                            .for_each(|v| *v = T::zero());
                    }
                }
            }
            mask
        }
    }
}

/// Applies `kind` to a `(B, K, h, w)` feature batch.
///
/// `feature_dropout` zeroes every channel whose spatial mean exceeds a
/// per-sample threshold `u * max_channel_mean`, `u ~ U(threshold_range)`.
pub fn apply_feature_perturbation<T: Scalar, R: Rng + ?Sized>(
    features: &Tensor4<T>,
    kind: PerturbationKind,
    params: &PerturbationParams,
    rng: &mut R,
) -> Result<Tensor4<T>> {
    let cm = features.swap_outer();
    let mask = perturbation_mask(&cm, kind, params, rng);
    let mut out = cm;
    for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
    Ok(out.swap_outer())
}
