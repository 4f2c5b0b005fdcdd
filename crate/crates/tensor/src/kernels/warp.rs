//! Backward (destination-indexed) bilinear warping with border replication.
//!
//! Output pixel `(x, y)` samples the source at `(x + u, y + v)`, where `u` and
//! `v` are the two flow channels. Sample coordinates are clamped into
//! `[0, W-1] × [0, H-1]` before interpolation.

use crate::element::Element;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    // false when the coordinate was clamped, so it carries no gradient
    free_x: bool,
    free_y: bool,
}

#[inline]
fn tap<T: Element>(x: usize, y: usize, u: T, v: T, w: usize, h: usize) -> Tap<T> {
    let max_x = T::from_usize(w - 1).unwrap();
    let max_y = T::from_usize(h - 1).unwrap();
    let raw_x = T::from_usize(x).unwrap() + u;
    let raw_y = T::from_usize(y).unwrap() + v;
    let sx = raw_x.max(T::zero()).min(max_x);
    let sy = raw_y.max(T::zero()).min(max_y);
    let fx = sx.floor();
    let fy = sy.floor();
    let x0 = fx.to_usize().unwrap_or(0).min(w - 1);
    let y0 = fy.to_usize().unwrap_or(0).min(h - 1);
    Tap {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        // NaN coordinates survive the clamp as NaN weights so they stay visible
        ax: if raw_x.is_nan() { raw_x } else { sx - fx },
        ay: if raw_y.is_nan() { raw_y } else { sy - fy },
        free_x: raw_x >= T::zero() && raw_x <= max_x,
        free_y: raw_y >= T::zero() && raw_y <= max_y,
    }
}

fn check_shapes<T: Element>(source: &Tensor<T>, flow: &Tensor<T>) {
    let [n, _, h, w] = source.shape();
    assert_eq!(flow.shape(), [n, 2, h, w], "warp: flow shape does not match source");
}

pub fn warp_forward<T: Element>(source: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    check_shapes(source, flow);
    let [n, c, h, w] = source.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(source.shape());
    for s in 0..n {
        let fl = flow.sample(s);
        let src = source.sample(s);
        let dst = out.sample_mut(s);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let t = tap(x, y, fl[i], fl[plane + i], w, h);
                let one = T::one();
                for ch in 0..c {
                    let p = &src[ch * plane..(ch + 1) * plane];
                    let top = (one - t.ax) * p[t.y0 * w + t.x0] + t.ax * p[t.y0 * w + t.x1];
                    let bottom = (one - t.ax) * p[t.y1 * w + t.x0] + t.ax * p[t.y1 * w + t.x1];
                    dst[ch * plane + i] = (one - t.ay) * top + t.ay * bottom;
                }
            }
        }
    }
    out
}

/// Returns `(d_source, d_flow)` for an upstream gradient `grad_out`.
pub fn warp_backward<T: Element>(
    source: &Tensor<T>,
    flow: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_source: bool,
    want_flow: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    check_shapes(source, flow);
    let [n, c, h, w] = source.shape();
    let plane = h * w;
    let mut d_src = want_source.then(|| Tensor::zeros(source.shape()));
    let mut d_flow = want_flow.then(|| Tensor::zeros(flow.shape()));
    let one = T::one();
    for s in 0..n {
        let fl = flow.sample(s);
        let src = source.sample(s);
        let g = grad_out.sample(s);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let t = tap(x, y, fl[i], fl[plane + i], w, h);
                let (mut du, mut dv) = (T::zero(), T::zero());
                for ch in 0..c {
                    let go = g[ch * plane + i];
                    if go == T::zero() {
                        continue;
                    }
                    if let Some(ds) = d_src.as_mut() {
                        let dp = &mut ds.sample_mut(s)[ch * plane..(ch + 1) * plane];
                        dp[t.y0 * w + t.x0] = dp[t.y0 * w + t.x0] + go * (one - t.ax) * (one - t.ay);
                        dp[t.y0 * w + t.x1] = dp[t.y0 * w + t.x1] + go * t.ax * (one - t.ay);
                        dp[t.y1 * w + t.x0] = dp[t.y1 * w + t.x0] + go * (one - t.ax) * t.ay;
                        dp[t.y1 * w + t.x1] = dp[t.y1 * w + t.x1] + go * t.ax * t.ay;
                    }
                    if want_flow {
                        let p = &src[ch * plane..(ch + 1) * plane];
                        let (p00, p01) = (p[t.y0 * w + t.x0], p[t.y0 * w + t.x1]);
                        let (p10, p11) = (p[t.y1 * w + t.x0], p[t.y1 * w + t.x1]);
                        if t.free_x {
                            du = du + go * ((one - t.ay) * (p01 - p00) + t.ay * (p11 - p10));
                        }
                        if t.free_y {
                            dv = dv + go * ((one - t.ax) * (p10 - p00) + t.ax * (p11 - p01));
                        }
                    }
                }
                if let Some(df) = d_flow.as_mut() {
                    let d = df.sample_mut(s);
                    d[i] = du;
                    d[plane + i] = dv;
                }
            }
        }
    }
    (d_src, d_flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_bitwise_identity() {
        let src = Tensor::from_vec([1, 2, 3, 4], (0..24).map(|v| (v as f32).sin()).collect()).unwrap();
        let flow = Tensor::zeros([1, 2, 3, 4]);
        assert_eq!(warp_forward(&src, &flow), src);
    }

    #[test]
    fn midpoint_sample_is_average() {
        let src = Tensor::from_vec([1, 1, 1, 2], vec![0.0f64, 1.0]).unwrap();
        let flow = Tensor::from_vec([1, 2, 1, 2], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let out = warp_forward(&src, &flow);
        assert_eq!(out.data()[0], 0.5);
        assert_eq!(out.data()[1], 1.0);
    }
}
