//! Frames, edge maps, PNG/PPM I/O and the two edge extractors.
//!
//! Pixel data is stored channel-planar: all red values row-major, then green,
//! then blue. This matches the `N × C × H × W` tensor layout, so a frame is a
//! batch-of-one tensor without reshuffling.

use std::collections::VecDeque;
use std::path::Path;

use ea_tensor::kernels::edges::{self, LUMA};
use ea_tensor::Tensor;
use image::{ImageFormat, ImageReader};

use crate::error::{shape_mismatch, Error, Result};

/// An RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// A single-channel map in `[0, 1]` aligned with a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("empty frame {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::InvalidArgument(format!(
                "frame {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    /// Builds a frame from a per-pixel `(y, x) -> [r, g, b]` function.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.into_iter().enumerate() {
                    data[c * plane + y * width + x] = v;
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Channel-planar values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.clone()).expect("frame layout")
    }

    /// Takes sample `n` of a `N × 3 × H × W` tensor.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != 3 {
            return Err(Error::InvalidArgument(format!("expected 3 channels, got {c}")));
        }
        Self::new(h, w, t.sample(n).to_vec())
    }

    /// BT.601 luma, computed in double precision.
    pub fn luma(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| LUMA[0] * r as f64 + LUMA[1] * g as f64 + LUMA[2] * b as f64)
            .collect()
    }

    pub fn clamped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Copy of the `height × width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width}+{left}+{top} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |y, x| {
            [0, 1, 2].map(|c| self.get(c, top + y, left + x))
        }))
    }

    /// Extends the frame to `height × width` by mirroring across the bottom and
    /// right borders (the border pixel itself is not repeated).
    pub fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::InvalidArgument("pad target smaller than frame".into()));
        }
        let ry = reflect_indices(self.height, height);
        let rx = reflect_indices(self.width, width);
        Ok(Self::from_fn(height, width, |y, x| {
            [0, 1, 2].map(|c| self.get(c, ry[y], rx[x]))
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            [0, 1, 2].map(|c| self.get(c, y, self.width - 1 - x))
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            [0, 1, 2].map(|c| self.get(c, self.height - 1 - y, x))
        })
    }
}

fn reflect_indices(len: usize, target: usize) -> Vec<usize> {
    (0..target)
        .map(|i| {
            if i < len {
                i
            } else if len == 1 {
                0
            } else {
                // mirror about len-1, falling back to clamping for very large pads
                let m = 2 * (len - 1);
                let r = i % m;
                if r < len {
                    r
                } else {
                    m - r
                }
            }
        })
        .collect()
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "edge map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, 1, self.height, self.width], self.data.clone()).expect("edge layout")
    }

    /// Grayscale frame with the map replicated into all three channels.
    pub fn to_frame(&self) -> Frame {
        let mut data = Vec::with_capacity(3 * self.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Frame {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Reads an 8- or 16-bit PNG or binary PPM, scaling to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::Io(path.to_path_buf(), e))?
        .with_guessed_format()
        .map_err(|e| Error::Io(path.to_path_buf(), e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => {
            return Err(Error::UnsupportedFormat(path.to_path_buf(), format!("{other:?}")));
        }
        None => {
            return Err(Error::UnsupportedFormat(path.to_path_buf(), "unrecognized".into()));
        }
    }
    let img = reader
        .decode()
        .map_err(|e| Error::Corrupt(path.to_path_buf(), e.to_string()))?;
    let color = img.color();
    let depth = color.bits_per_pixel() / color.channel_count() as u16;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    match depth {
        8 => {
            let rgb = img.into_rgb8();
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = px.0[c] as f32 / 255.0;
                }
            }
        }
        16 => {
            let rgb = img.into_rgb16();
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = px.0[c] as f32 / 65535.0;
                }
            }
        }
        other => {
            return Err(Error::UnsupportedFormat(path.to_path_buf(), format!("{other}-bit channels")));
        }
    }
    Frame::new(h, w, data)
}

/// Quantizes one value to a byte: `round(v·255)` with halves rounded up.
#[inline]
pub fn quantize(v: f32) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let plane = frame.height * frame.width;
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            buf.push(quantize(frame.data[c * plane + i]));
        }
    }
    image::save_buffer_with_format(
        path,
        &buf,
        frame.width as u32,
        frame.height as u32,
        image::ExtendedColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))
}

/// Writes an edge map as an 8-bit grayscale PNG.
pub fn save_edge_map(edges: &EdgeMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: Vec<u8> = edges.data.iter().map(|&v| quantize(v)).collect();
    image::save_buffer_with_format(
        path,
        &buf,
        edges.width as u32,
        edges.height as u32,
        image::ExtendedColorType::L8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))
}

/// Canny detector parameters. Thresholds apply to the Sobel gradient magnitude
/// of `[0, 1]` luma, with the Sobel response scaled by 1/8 so it estimates the
/// per-pixel derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    pub low: f64,
    pub high: f64,
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            low: 0.1,
            high: 0.2,
            sigma: 1.4,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.low < self.high) {
            return Err(Error::InvalidArgument(format!(
                "canny thresholds must satisfy low < high (got low={}, high={})",
                self.low, self.high
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("canny sigma must be positive (got {})", self.sigma)));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Separable Gaussian blur with border replication (horizontal pass first).
fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * img[y * w + clamp_index(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp[clamp_index(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Classic Canny: luma, Gaussian blur, Sobel, 4-direction non-maximum
/// suppression and 8-connected double-threshold hysteresis. Output is binary.
pub fn canny_edges(frame: &Frame, params: CannyParams) -> Result<EdgeMap> {
    params.validate()?;
    let (h, w) = frame.dims();
    let smooth = gaussian_blur(&frame.luma(), h, w, params.sigma);

    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (ky, (row_x, row_y)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                for kx in 0..3 {
                    let p = smooth[clamp_index(y as isize + ky as isize - 1, h) * w
                        + clamp_index(x as isize + kx as isize - 1, w)];
                    sx += row_x[kx] * p;
                    sy += row_y[kx] * p;
                }
            }
            gx[y * w + x] = sx * 0.125;
            gy[y * w + x] = sy * 0.125;
        }
    }
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();

    // Non-maximum suppression. A pixel survives if it beats its neighbour on the
    // negative side of the gradient strictly and on the positive side weakly,
    // so a symmetric ridge keeps exactly one pixel.
    let tan_22_5 = (std::f64::consts::PI / 8.0).tan();
    let mut thin = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = mag[i];
            if m <= 0.0 {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            let (prev, next) = if ay <= ax * tan_22_5 {
                (i - 1, i + 1)
            } else if ax <= ay * tan_22_5 {
                (i - w, i + w)
            } else if gx[i] * gy[i] > 0.0 {
                (i - w - 1, i + w + 1)
            } else {
                (i - w + 1, i + w - 1)
            };
            if m > mag[prev] && m >= mag[next] {
                thin[i] = m;
            }
        }
    }

    let mut out = vec![0.0f32; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= params.high {
            out[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= params.low {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    EdgeMap::new(h, w, out)
}

/// Sobel magnitude of luma normalized by its maximum; all zero for a constant
/// frame. Differentiable (see the tape's `soft_edges`).
pub fn soft_edges(frame: &Frame) -> EdgeMap {
    let t = edges::soft_edges_forward(&frame.to_tensor());
    EdgeMap {
        height: frame.height,
        width: frame.width,
        data: t.into_vec(),
    }
}

pub(crate) fn check_same_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(shape_mismatch(op, a, b));
    }
    Ok(())
}
