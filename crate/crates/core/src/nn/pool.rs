use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Winner position (0..4) inside each 2x2 window.
pub struct PoolCache {
    input_shape: [usize; 4],
    argmax: Vec<u8>,
}

/// 2x2 max pooling with stride 2; H and W must be even.
pub fn max_pool2x2<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, PoolCache) {
    let [c, b, h, w] = x.shape();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "max_pool2x2 needs even spatial dims"
    );
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([c, b, oh, ow]);
    let mut argmax = Vec::with_capacity(c * b * oh * ow);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..c * b {
        let sp = &src[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let base = 2 * i * w + 2 * j;
                let cand = [sp[base], sp[base + 1], sp[base + w], sp[base + w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                dst[(p * oh + i) * ow + j] = cand[best];
                argmax.push(best as u8);
            }
        }
    }
    (
        out,
        PoolCache {
            input_shape: x.shape(),
            argmax,
        },
    )
}

pub fn max_pool2x2_backward<T: Scalar>(cache: &PoolCache, dy: &Tensor4<T>) -> Tensor4<T> {
    let [c, b, h, w] = cache.input_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor4::zeros(cache.input_shape);
    let dst = dx.data_mut();
    let src = dy.data();
    for p in 0..c * b {
        for i in 0..oh {
            for j in 0..ow {
                let o = (p * oh + i) * ow + j;
                let k = cache.argmax[o] as usize;
                let (di, dj) = (k / 2, k % 2);
                dst[p * h * w + (2 * i + di) * w + 2 * j + dj] += src[o];
            }
        }
    }
    dx
}
