//! Layers with hand-written backward passes.
//!
//! Every layer's `forward` borrows its parameters immutably and returns the
//! output together with a cache; `backward` consumes that cache, accumulates
//! parameter gradients and returns the input gradient. Feature maps are
//! channel-major `(C, B, H, W)` tensors.

mod conv;
mod norm;
mod pool;
mod resample;

pub use conv::{Conv2d, ConvCache, ConvTranspose2x2, ConvTransposeCache};
pub use norm::{BatchNorm2d, ConvBlock, ConvBlockCache, ConvBnAct, ConvBnActCache, NormCache};
pub use pool::{max_pool2x2, max_pool2x2_backward, PoolCache};
pub use resample::{BilinearResize, Resampler};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Train mode activates batch statistics, dropout and head perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named tensor owned by a layer. Buffers (batch-norm running
/// statistics) are checkpointed but never optimized or counted.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>, trainable: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            value,
            grad,
            shape,
            trainable,
        }
    }

    pub fn filled(shape: Vec<usize>, v: T, trainable: bool) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n], trainable)
    }

    /// Zero-mean normal with standard deviation `std`.
    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self::new(shape, value, true)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Hierarchically named parameter traversal.
pub trait Parameterized<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Kaiming-normal standard deviation for a leaky rectifier with `fan_in`.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt()
}
