//! Flow fields and the closed-form flow operations: backward warping, linear
//! intermediate flows, naive single-side synthesis, Middlebury `.flo` files and
//! colour-wheel visualization.

use std::fs;
use std::io::Write;
use std::path::Path;

use ea_tensor::kernels::warp;
use ea_tensor::Tensor;

use crate::error::{Error, Result};
use crate::imaging::{check_same_dims, Frame};

/// Per-pixel displacement `(u, v)` in pixels; `u` points right, `v` down.
/// Stored planar: the `u` plane followed by the `v` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 2 * height * width {
            return Err(Error::InvalidArgument(format!(
                "flow {height}x{width} needs {} values, got {}",
                2 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        let plane = height * width;
        let mut data = vec![u; 2 * plane];
        data[plane..].fill(v);
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn u(&self) -> &[f32] {
        &self.data[..self.height * self.width]
    }

    pub fn v(&self) -> &[f32] {
        &self.data[self.height * self.width..]
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.height * self.width + i])
    }

    pub fn set(&mut self, y: usize, x: usize, u: f32, v: f32) {
        let i = y * self.width + x;
        let plane = self.height * self.width;
        self.data[i] = u;
        self.data[plane + i] = v;
    }

    pub fn scaled(&self, k: f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| k * v).collect(),
        }
    }

    pub fn mean_magnitude(&self) -> f64 {
        let (u, v) = (self.u(), self.v());
        u.iter()
            .zip(v)
            .map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).sqrt())
            .sum::<f64>()
            / u.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, 2, self.height, self.width], self.data.clone()).expect("flow layout")
    }

    /// Reads `channels start..start+2` of sample `n`.
    pub fn from_tensor(t: &Tensor<f32>, n: usize, start: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if start + 2 > c {
            return Err(Error::InvalidArgument(format!("flow channels {start}..{} of {c}", start + 2)));
        }
        let plane = h * w;
        Self::new(h, w, t.sample(n)[start * plane..(start + 2) * plane].to_vec())
    }

    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::InvalidArgument("flow crop larger than flow".into()));
        }
        let mut out = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = self.at(y, x);
                out.set(y, x, u, v);
            }
        }
        Ok(out)
    }
}

/// A fraction of the interval between the two input frames.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TimePoint(f32);

impl TimePoint {
    pub fn new(t: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub const MIDDLE: TimePoint = TimePoint(0.5);

    pub fn value(self) -> f32 {
        self.0
    }
}

/// Which identity produces the intermediate flows from the bidirectional pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IntermediateForm {
    /// Average of the forward and backward forms:
    /// `F_t→0 = t·½(F_1→0 − F_0→1)`, `F_t→1 = −(1−t)·½(F_1→0 − F_0→1)`.
    #[default]
    Symmetric,
    /// Forward flow only: `F_t→0 = −t·F_0→1`, `F_t→1 = (1−t)·F_0→1`.
    Forward,
}

impl IntermediateForm {
    pub fn name(self) -> &'static str {
        match self {
            IntermediateForm::Symmetric => "symmetric",
            IntermediateForm::Forward => "forward",
        }
    }
}

/// Samples `source` at `(x + u, y + v)` with bilinear interpolation and border
/// replication.
pub fn backward_warp(source: &Frame, flow: &FlowMap) -> Result<Frame> {
    check_same_dims("backward_warp", source.dims(), flow.dims())?;
    let out = warp::warp_forward(&source.to_tensor(), &flow.to_tensor());
    Frame::from_tensor(&out, 0)
}

/// Linear intermediate flows `(F_t→0, F_t→1)` under uniform motion.
pub fn intermediate_flows(
    f01: &FlowMap,
    f10: &FlowMap,
    t: TimePoint,
    form: IntermediateForm,
) -> Result<(FlowMap, FlowMap)> {
    check_same_dims("intermediate_flows", f01.dims(), f10.dims())?;
    let t = t.value();
    let (ft0, ft1) = match form {
        IntermediateForm::Forward => (f01.scaled(-t), f01.scaled(1.0 - t)),
        IntermediateForm::Symmetric => {
            let half_diff = FlowMap {
                height: f01.height,
                width: f01.width,
                data: f10.data.iter().zip(&f01.data).map(|(&b, &a)| 0.5 * (b - a)).collect(),
            };
            (half_diff.scaled(t), half_diff.scaled(-(1.0 - t)))
        }
    };
    Ok((ft0, ft1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthesisSide {
    From0,
    From1,
    Mean,
}

/// Un-refined synthesis: warp one or both inputs by the linear intermediate flows.
pub fn naive_synthesize(
    i0: &Frame,
    i1: &Frame,
    f01: &FlowMap,
    f10: &FlowMap,
    t: TimePoint,
    side: SynthesisSide,
    form: IntermediateForm,
) -> Result<Frame> {
    check_same_dims("naive_synthesize", i0.dims(), i1.dims())?;
    let (ft0, ft1) = intermediate_flows(f01, f10, t, form)?;
    match side {
        SynthesisSide::From0 => backward_warp(i0, &ft0),
        SynthesisSide::From1 => backward_warp(i1, &ft1),
        SynthesisSide::Mean => {
            let a = backward_warp(i0, &ft0)?;
            let b = backward_warp(i1, &ft1)?;
            let data = a.data().iter().zip(b.data()).map(|(&p, &q)| 0.5 * p + 0.5 * q).collect();
            Frame::new(a.height(), a.width(), data)
        }
    }
}

/// Middlebury `.flo` magic, the little-endian bytes of `202021.25f32`.
pub const FLO_MAGIC: [u8; 4] = *b"PIEH";

/// Writes a Middlebury `.flo` file: magic, `i32` width, `i32` height, then
/// row-major interleaved `f32` `(u, v)` pairs, all little-endian.
pub fn write_flo(flow: &FlowMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(12 + 8 * flow.height * flow.width);
    buf.extend_from_slice(&FLO_MAGIC);
    buf.extend_from_slice(&(flow.width as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as i32).to_le_bytes());
    let (u, v) = (flow.u(), flow.v());
    for (a, b) in u.iter().zip(v) {
        buf.extend_from_slice(&a.to_le_bytes());
        buf.extend_from_slice(&b.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))?;
    file.write_all(&buf)
        .map_err(|e| Error::Write(path.to_path_buf(), e.to_string()))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowMap> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    if bytes.len() < 12 {
        return Err(Error::TruncatedFlo(path.to_path_buf(), 12, bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FLO_MAGIC {
        return Err(Error::BadFloMagic(path.to_path_buf(), magic));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::Corrupt(path.to_path_buf(), format!("bad dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() < need {
        return Err(Error::TruncatedFlo(path.to_path_buf(), need, bytes.len()));
    }
    let plane = w * h;
    let mut data = vec![0.0f32; 2 * plane];
    for (i, chunk) in bytes[12..need].chunks_exact(8).enumerate() {
        data[i] = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        data[plane + i] = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
    }
    FlowMap::new(h, w, data)
}

/// Middlebury colour wheel: 55 hues in red-yellow-green-cyan-blue-magenta order.
fn color_wheel() -> Vec<[f32; 3]> {
    const SEGMENTS: [(usize, [usize; 2]); 6] = [
        (15, [0, 1]), // red -> yellow: raise green
        (6, [1, 0]),  // yellow -> green: lower red
        (4, [1, 2]),  // green -> cyan: raise blue
        (11, [2, 1]), // cyan -> blue: lower green
        (13, [2, 0]), // blue -> magenta: raise red
        (6, [0, 2]),  // magenta -> red: lower blue
    ];
    let mut wheel = Vec::with_capacity(55);
    for (i, &(n, [full, moving])) in SEGMENTS.iter().enumerate() {
        let rising = i % 2 == 0;
        for k in 0..n {
            let ramp = (255.0 * k as f32 / n as f32).floor();
            let mut c = [0.0f32; 3];
            c[full] = 255.0;
            c[moving] = if rising { ramp } else { 255.0 - ramp };
            wheel.push(c.map(|v| v / 255.0));
        }
    }
    wheel
}

/// Encodes direction as hue and magnitude as saturation; zero flow is white.
/// Magnitudes are divided by `max_magnitude` (default: the field's own
/// maximum, or 1 for an all-zero field) and clamped to 1.
pub fn flow_to_color(flow: &FlowMap, max_magnitude: Option<f32>) -> Frame {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let (u, v) = (flow.u(), flow.v());
    let norm = max_magnitude.unwrap_or_else(|| {
        let m = u.iter().zip(v).map(|(a, b)| (a * a + b * b).sqrt()).fold(0.0f32, f32::max);
        if m > 0.0 {
            m
        } else {
            1.0
        }
    });
    Frame::from_fn(flow.height, flow.width, |y, x| {
        let (a, b) = flow.at(y, x);
        let rad = ((a * a + b * b).sqrt() / norm).min(1.0);
        let angle = (-b).atan2(-a) / std::f32::consts::PI;
        let fk = (angle + 1.0) / 2.0 * (ncols - 1) as f32;
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f32;
        [0, 1, 2].map(|c| {
            let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
            1.0 - rad * (1.0 - col)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_frame(h: usize, w: usize) -> Frame {
        Frame::from_fn(h, w, |y, x| [x as f32 / w as f32, y as f32 / h as f32, ((x * 7 + y * 3) % 11) as f32 / 11.0])
    }

    #[test]
    fn integer_flow_shifts_columns_with_border_replication() {
        let src = ramp_frame(5, 6);
        let out = backward_warp(&src, &FlowMap::constant(5, 6, 1.0, 0.0)).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..6 {
                    assert_eq!(out.get(c, y, x), src.get(c, y, (x + 1).min(5)));
                }
            }
        }
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let src = ramp_frame(4, 7);
        assert_eq!(backward_warp(&src, &FlowMap::zeros(4, 7)).unwrap(), src);
    }

    #[test]
    fn bilinear_midpoint() {
        let src = Frame::from_fn(1, 2, |_, x| [x as f32; 3]);
        let mut flow = FlowMap::zeros(1, 2);
        flow.set(0, 0, 0.5, 0.0);
        assert_eq!(backward_warp(&src, &flow).unwrap().get(0, 0, 0), 0.5);
    }

    #[test]
    fn intermediate_flow_examples() {
        let f01 = FlowMap::constant(3, 3, 8.0, 0.0);
        let f10 = FlowMap::constant(3, 3, -8.0, 0.0);
        for form in [IntermediateForm::Symmetric, IntermediateForm::Forward] {
            let (a, b) = intermediate_flows(&f01, &f10, TimePoint::new(0.25).unwrap(), form).unwrap();
            assert_eq!(a, FlowMap::constant(3, 3, -2.0, 0.0));
            assert_eq!(b, FlowMap::constant(3, 3, 6.0, 0.0));
            let (z, _) = intermediate_flows(&f01, &f10, TimePoint::new(0.0).unwrap(), form).unwrap();
            assert!(z.data().iter().all(|&v| v == 0.0));
            let (_, z) = intermediate_flows(&f01, &f10, TimePoint::new(1.0).unwrap(), form).unwrap();
            assert!(z.data().iter().all(|&v| v == 0.0));
        }
        assert!(TimePoint::new(1.5).is_err());
        assert!(TimePoint::new(-0.1).is_err());
    }

    #[test]
    fn naive_synthesis_endpoints() {
        let (i0, i1) = (ramp_frame(4, 4), Frame::filled(4, 4, 0.3));
        let f01 = FlowMap::constant(4, 4, 1.3, -0.7);
        let f10 = FlowMap::constant(4, 4, -0.2, 2.0);
        let form = IntermediateForm::default();
        let t0 = TimePoint::new(0.0).unwrap();
        let t1 = TimePoint::new(1.0).unwrap();
        assert_eq!(naive_synthesize(&i0, &i1, &f01, &f10, t0, SynthesisSide::From0, form).unwrap(), i0);
        assert_eq!(naive_synthesize(&i0, &i1, &f01, &f10, t1, SynthesisSide::From1, form).unwrap(), i1);
        let z = FlowMap::zeros(4, 4);
        let m = naive_synthesize(&i0, &i0, &z, &z, TimePoint::MIDDLE, SynthesisSide::Mean, form).unwrap();
        assert_eq!(m, i0);
    }

    #[test]
    fn wheel_has_55_entries_starting_red() {
        let w = color_wheel();
        assert_eq!(w.len(), 55);
        assert_eq!(w[0], [1.0, 0.0, 0.0]);
        assert_eq!(w[15], [1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_flow_is_white_and_saturation_clamps() {
        let white = flow_to_color(&FlowMap::zeros(2, 2), None);
        assert!(white.data().iter().all(|&v| v == 1.0));
        let mut f = FlowMap::zeros(1, 2);
        f.set(0, 0, 3.0, 1.0);
        f.set(0, 1, 30.0, 10.0);
        let c = flow_to_color(&f, Some(2.0));
        for ch in 0..3 {
            assert!((c.get(ch, 0, 0) - c.get(ch, 0, 1)).abs() < 1e-6);
        }
    }
}
