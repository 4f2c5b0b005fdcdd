//! 2-D convolution through im2col and a dense matrix multiply.

use std::ops::Range;

use crate::element::Element;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside
/// `0..width`, as a half-open range.
fn valid_columns(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let ow = g.out_width();
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(ow);
    // ox·stride + kx − pad ≤ width − 1
    let hi = if g.width + g.pad > kx {
        ((g.width + g.pad - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds output rows `rows` of one `C × H × W` image into a
/// `(C·kh·kw) × (rows·Wo)` matrix.
fn im2col<T: Element>(g: &ConvGeometry, image: &[T], rows: Range<usize>, cols: &mut [T]) {
    let ow = g.out_width();
    let oh = rows.len();
    let h = g.height as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let (lo, hi) = valid_columns(g, kx);
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[r * ow..(r + 1) * ow];
                    if iy < 0 || iy >= h || lo == hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (o, &v) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a column matrix of output rows `rows` back, accumulating into `image`.
fn col2im_add<T: Element>(g: &ConvGeometry, cols: &[T], rows: Range<usize>, image: &mut [T]) {
    let ow = g.out_width();
    let oh = rows.len();
    let h = g.height as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let (lo, hi) = valid_columns(g, kx);
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                if lo == hi {
                    continue;
                }
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let start = lo * g.stride + kx - g.pad;
                    let s = &src[r * ow + lo..r * ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(s) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> ConvGeometry {
    let [_, c, h, w] = input.shape();
    let [_, wc, kh, kw] = weight.shape();
    assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than padded input");
    ConvGeometry {
        in_channels: c,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        pad,
    }
}

/// `weight` is `O × C × kh × kw`; `bias`, if present, holds `O` values.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let g = geometry(input, weight, stride, pad);
    let n = input.batch();
    let out_c = weight.batch();
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = Tensor::zeros([n, out_c, oh, ow]);
    let k = g.col_rows();
    let p = g.col_cols();
    let tile = tile_rows(&g);
    let mut cols = vec![T::zero(); k * tile * ow];
    for s in 0..n {
        let dst = out.sample_mut(s);
        for r0 in (0..oh).step_by(tile) {
            let rows = r0..(r0 + tile).min(oh);
            let tp = rows.len() * ow;
            im2col(&g, input.sample(s), rows, &mut cols[..k * tp]);
            T::gemm(
                out_c, k, tp, T::one(), weight.data(), k as isize, 1, &cols[..k * tp], tp as isize, 1, T::zero(),
                &mut dst[r0 * ow..], p as isize, 1,
            );
        }
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut dst[o * p..(o + 1) * p] {
                    *v = *v + bv;
                }
            }
        }
    }
    out
}

/// Output rows per im2col tile, keeping the column buffer cache-sized.
fn tile_rows(g: &ConvGeometry) -> usize {
    const TILE_ELEMS: usize = 1 << 16;
    (TILE_ELEMS / (g.col_rows() * g.out_width()).max(1)).clamp(1, g.out_height().max(1))
}

/// Gradients of a convolution. Returns `(d_input, d_weight, d_bias)`; the input
/// gradient is only computed when `want_input` is set.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = geometry(input, weight, stride, pad);
    let n = input.batch();
    let out_c = weight.batch();
    let k = g.col_rows();
    let p = g.col_cols();
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros([1, out_c, 1, 1]);
    let mut d_input = want_input.then(|| Tensor::zeros(input.shape()));
    let (oh, ow) = (g.out_height(), g.out_width());
    let tile = tile_rows(&g);
    let mut cols = vec![T::zero(); k * tile * ow];
    let mut d_cols = vec![T::zero(); if want_input { k * tile * ow } else { 0 }];
    for s in 0..n {
        let dy = grad_out.sample(s);
        for o in 0..out_c {
            let acc: T = dy[o * p..(o + 1) * p].iter().copied().sum();
            d_bias.data_mut()[o] = d_bias.data()[o] + acc;
        }
        for r0 in (0..oh).step_by(tile) {
            let rows = r0..(r0 + tile).min(oh);
            let tp = rows.len() * ow;
            let dy_tile = &dy[r0 * ow..];
            im2col(&g, input.sample(s), rows.clone(), &mut cols[..k * tp]);
            // dW += dY · colsᵀ
            T::gemm(
                out_c, tp, k, T::one(), dy_tile, p as isize, 1, &cols[..k * tp], 1, tp as isize, T::one(),
                d_weight.data_mut(), k as isize, 1,
            );
            if let Some(dx) = d_input.as_mut() {
                // dcols = Wᵀ · dY
                T::gemm(
                    k, out_c, tp, T::one(), weight.data(), 1, k as isize, dy_tile, p as isize, 1, T::zero(),
                    &mut d_cols[..k * tp], tp as isize, 1,
                );
                col2im_add(&g, &d_cols[..k * tp], rows, dx.sample_mut(s));
            }
        }
    }
    (d_input, d_weight, d_bias)
}
