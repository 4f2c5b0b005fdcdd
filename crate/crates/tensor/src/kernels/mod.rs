//! Forward and backward kernels used by the tape.

pub mod conv;
pub mod edges;
pub mod warp;

use crate::element::{cst, Element};
use crate::tensor::Tensor;

/// 2×2 max pooling with stride 2. Returns the output and, for every output
/// element, the flat index of the winning input element.
pub fn max_pool2<T: Element>(input: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = input.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial size, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * oh * ow;
        for y in 0..oh {
            for x in 0..ow {
                let candidates = [
                    ibase + 2 * y * w + 2 * x,
                    ibase + 2 * y * w + 2 * x + 1,
                    ibase + (2 * y + 1) * w + 2 * x,
                    ibase + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = candidates[0];
                for &cand in &candidates[1..] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[obase + y * ow + x] = src[best];
                arg[obase + y * ow + x] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Element>(input_shape: [usize; 4], argmax: &[u32], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut d = Tensor::zeros(input_shape);
    let dd = d.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dd[i as usize] = dd[i as usize] + g;
    }
    d
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        for y in 0..oh {
            let srow = &src[nc * h * w + (y / 2) * w..nc * h * w + (y / 2 + 1) * w];
            let drow = &mut dst[nc * oh * ow + y * ow..nc * oh * ow + (y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Element>(grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = grad_out.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut d = Tensor::zeros([n, c, h, w]);
    let src = grad_out.data();
    let dst = d.data_mut();
    for nc in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                let j = nc * h * w + (y / 2) * w + x / 2;
                dst[j] = dst[j] + src[nc * oh * ow + y * ow + x];
            }
        }
    }
    d
}

/// Per-channel statistics gathered by a training-mode batch norm pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divides by the element count).
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: usize,
}

pub fn batch_stats<T: Element>(input: &Tensor<T>, eps: T) -> BatchStats<T> {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let count = n * plane;
    let cnt = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * plane;
            acc = acc + input.data()[off..off + plane].iter().copied().sum::<T>();
        }
        mean[ch] = acc / cnt;
        let mut sq = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * plane;
            for &v in &input.data()[off..off + plane] {
                let d = v - mean[ch];
                sq = sq + d * d;
            }
        }
        var[ch] = sq / cnt;
    }
    let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    BatchStats { mean, var, inv_std, count }
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel.
pub fn channel_normalize<T: Element>(
    input: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let mut out = input.clone();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for v in &mut out.data_mut()[off..off + plane] {
                *v = (*v - mean[ch]) * scale + beta[ch];
            }
        }
    }
    out
}

/// Gradients of a training-mode batch norm. Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Element>(
    input: &Tensor<T>,
    stats: &BatchStats<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let cnt = T::from_usize(stats.count).unwrap();
    let mut dx = Tensor::zeros(input.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is) = (stats.mean[ch], stats.inv_std[ch]);
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for s in 0..n {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                let dy = grad_out.data()[i];
                sum_dy = sum_dy + dy;
                sum_dy_xhat = sum_dy_xhat + dy * (input.data()[i] - m) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * is / cnt;
        for s in 0..n {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                let xhat = (input.data()[i] - m) * is;
                dx.data_mut()[i] = k * (cnt * grad_out.data()[i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Element>(x: T) -> T {
    if x > cst(20.0) {
        x
    } else if x < cst(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_then_upsample_shapes() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let (p, arg) = max_pool2(&x);
        assert_eq!(p.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
        let u = upsample2(&p);
        assert_eq!(u.shape(), [1, 1, 2, 4]);
        assert_eq!(u.data(), &[5.0, 5.0, 9.0, 9.0, 5.0, 5.0, 9.0, 9.0]);
        let d = upsample2_backward(&u);
        assert_eq!(d.data(), &[20.0, 36.0]);
    }
}
