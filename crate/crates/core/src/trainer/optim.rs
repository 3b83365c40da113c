use crate::nn::Parameterized;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v = m v + (g + wd p)`, `p -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per trainable tensor, keyed by name, in traversal order.
    pub buffers: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &impl Parameterized<T>, momentum: f64, weight_decay: f64) -> Self {
        let mut buffers = Vec::new();
        net.visit("", &mut |name, p| {
            if p.trainable {
                buffers.push((name.to_string(), vec![T::zero(); p.len()]));
            }
        });
        Self {
            momentum,
            weight_decay,
            buffers,
        }
    }

    pub fn step(&mut self, net: &mut impl Parameterized<T>, lr: f64) {
        let (m, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        let mut bufs = self.buffers.iter_mut();
        net.visit_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let (bname, buf) = bufs.next().expect("optimizer matches the network");
            debug_assert_eq!(bname, name);
            for ((v, w), &g) in buf.iter_mut().zip(p.value.iter_mut()).zip(&p.grad) {
                *v = m * *v + g + wd * *w;
                *w -= lr * *v;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{join, Param};

    struct One(Param<f64>);

    impl Parameterized<f64> for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&join(prefix, "w"), &self.0)
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join(prefix, "w"), &mut self.0)
        }
    }

    #[test]
    fn matches_hand_rolled_updates() {
        let mut net = One(Param::new(vec![1], vec![1.0], true));
        let mut opt = Sgd::new(&net, 0.9, 0.1);
        net.0.grad = vec![0.5];
        opt.step(&mut net, 0.1);
        // v = 0.5 + 0.1 = 0.6; w = 1 - 0.06
        assert!((net.0.value[0] - 0.94).abs() < 1e-15);
        opt.step(&mut net, 0.1);
        // v = 0.54 + 0.5 + 0.094 = 1.134; w = 0.94 - 0.1134
        assert!((net.0.value[0] - 0.8266).abs() < 1e-12);
    }
}
