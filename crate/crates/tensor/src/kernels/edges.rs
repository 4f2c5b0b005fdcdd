//! Differentiable soft edge maps: max-normalized Sobel magnitude of luma.

use crate::element::{cst, Element};
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Keeps the magnitude differentiable at zero gradient.
const MAG_EPS: f64 = 1e-12;

/// `(dy, dx, weight_x, weight_y)` for the 3×3 Sobel pair, before the 1/8 scale.
const SOBEL: [(isize, isize, f64, f64); 9] = [
    (-1, -1, -1.0, -1.0),
    (-1, 0, 0.0, -2.0),
    (-1, 1, 1.0, -1.0),
    (0, -1, -2.0, 0.0),
    (0, 0, 0.0, 0.0),
    (0, 1, 2.0, 0.0),
    (1, -1, -1.0, 1.0),
    (1, 0, 0.0, 2.0),
    (1, 1, 1.0, 1.0),
];

#[inline]
fn clamp_idx(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

struct Intermediates<T> {
    gx: Vec<T>,
    gy: Vec<T>,
    radius: Vec<T>,
    mag: Vec<T>,
    max: T,
    argmax: usize,
}

fn luma_plane<T: Element>(rgb: &[T], plane: usize) -> Vec<T> {
    let (wr, wg, wb) = (cst::<T>(LUMA[0]), cst::<T>(LUMA[1]), cst::<T>(LUMA[2]));
    (0..plane)
        .map(|i| wr * rgb[i] + wg * rgb[plane + i] + wb * rgb[2 * plane + i])
        .collect()
}

fn intermediates<T: Element>(rgb: &[T], h: usize, w: usize) -> Intermediates<T> {
    let plane = h * w;
    let luma = luma_plane(rgb, plane);
    let eighth = cst::<T>(0.125);
    let eps = cst::<T>(MAG_EPS);
    let base = eps.sqrt();
    let mut gx = vec![T::zero(); plane];
    let mut gy = vec![T::zero(); plane];
    let mut radius = vec![T::zero(); plane];
    let mut mag = vec![T::zero(); plane];
    let (mut max, mut argmax) = (T::zero(), 0);
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (T::zero(), T::zero());
            for &(dy, dx, kx, ky) in &SOBEL {
                let p = luma[clamp_idx(y as isize + dy, h) * w + clamp_idx(x as isize + dx, w)];
                sx = sx + cst::<T>(kx) * p;
                sy = sy + cst::<T>(ky) * p;
            }
            let i = y * w + x;
            gx[i] = sx * eighth;
            gy[i] = sy * eighth;
            radius[i] = (gx[i] * gx[i] + gy[i] * gy[i] + eps).sqrt();
            mag[i] = radius[i] - base;
            if mag[i] > max {
                max = mag[i];
                argmax = i;
            }
        }
    }
    Intermediates { gx, gy, radius, mag, max, argmax }
}

/// `N × 3 × H × W` RGB in, `N × 1 × H × W` edge strength in `[0, 1]` out.
pub fn soft_edges_forward<T: Element>(rgb: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = rgb.shape();
    assert_eq!(c, 3, "soft_edges expects 3 channels");
    let mut out = Tensor::zeros([n, 1, h, w]);
    for s in 0..n {
        let im = intermediates(rgb.sample(s), h, w);
        if im.max > T::zero() {
            for (o, &m) in out.sample_mut(s).iter_mut().zip(&im.mag) {
                *o = m / im.max;
            }
        }
    }
    out
}

pub fn soft_edges_backward<T: Element>(rgb: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = rgb.shape();
    let plane = h * w;
    let eighth = cst::<T>(0.125);
    let mut d_rgb = Tensor::zeros(rgb.shape());
    for s in 0..n {
        let im = intermediates(rgb.sample(s), h, w);
        if im.max <= T::zero() {
            continue;
        }
        let g = grad_out.sample(s);
        let mut d_mag: Vec<T> = g.iter().map(|&v| v / im.max).collect();
        let d_max = -g.iter().zip(&im.mag).map(|(&a, &b)| a * b).sum::<T>() / (im.max * im.max);
        d_mag[im.argmax] = d_mag[im.argmax] + d_max;

        let mut d_luma = vec![T::zero(); plane];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let dgx = d_mag[i] * im.gx[i] / im.radius[i] * eighth;
                let dgy = d_mag[i] * im.gy[i] / im.radius[i] * eighth;
                for &(dy, dx, kx, ky) in &SOBEL {
                    let j = clamp_idx(y as isize + dy, h) * w + clamp_idx(x as isize + dx, w);
                    d_luma[j] = d_luma[j] + cst::<T>(kx) * dgx + cst::<T>(ky) * dgy;
                }
            }
        }
        let dst = d_rgb.sample_mut(s);
        for (ch, &wc) in LUMA.iter().enumerate() {
            let wc = cst::<T>(wc);
            for i in 0..plane {
                dst[ch * plane + i] = wc * d_luma[i];
            }
        }
    }
    d_rgb
}
