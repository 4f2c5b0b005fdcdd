//! Dataset scanning, loading, augmentation and synthetic data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, Frame};
use crate::models::RESOLUTION_MULTIPLE;

pub const TRIPLET_FILES: [&str; 3] = ["im1.png", "im2.png", "im3.png"];
pub const DEFAULT_CROP: usize = 256;
pub const DEFAULT_CLIP_GROUP: usize = 9;

/// Two input frames and the ground-truth frames between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub i0: Frame,
    pub i1: Frame,
    /// `(t, frame)` pairs in increasing `t`.
    pub targets: Vec<(f32, Frame)>,
}

impl Sample {
    pub fn triplet(id: impl Into<String>, i0: Frame, gt: Frame, i1: Frame) -> Result<Self> {
        Self::new(id, i0, i1, vec![(0.5, gt)])
    }

    pub fn new(id: impl Into<String>, i0: Frame, i1: Frame, targets: Vec<(f32, Frame)>) -> Result<Self> {
        let id = id.into();
        let dims = i0.dims();
        if i1.dims() != dims || targets.iter().any(|(_, f)| f.dims() != dims) {
            return Err(Error::Dataset(format!("{id}: frames differ in resolution")));
        }
        Ok(Self { id, i0, i1, targets })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.i0.dims()
    }

    fn map_frames(&self, f: impl Fn(&Frame) -> Result<Frame>) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            i0: f(&self.i0)?,
            i1: f(&self.i1)?,
            targets: self
                .targets
                .iter()
                .map(|(t, fr)| Ok((*t, f(fr)?)))
                .collect::<Result<_>>()?,
        })
    }

    /// Swaps the inputs and maps every target time `t → 1 − t`.
    pub fn reversed(&self) -> Self {
        Self {
            id: self.id.clone(),
            i0: self.i1.clone(),
            i1: self.i0.clone(),
            targets: self.targets.iter().rev().map(|(t, f)| (1.0 - t, f.clone())).collect(),
        }
    }
}

/// A triplet directory `root/<seq>/im1.png, im2.png, im3.png`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletSample {
    pub id: String,
    pub paths: [PathBuf; 3],
}

impl TripletSample {
    pub fn load(&self) -> Result<Sample> {
        let [a, b, c] = &self.paths;
        Sample::triplet(self.id.clone(), load_image(a)?, load_image(b)?, load_image(c)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletScan {
    pub samples: Vec<TripletSample>,
    /// Sequence directories missing at least one frame.
    pub skipped: usize,
}

fn require_dir(root: &Path) -> Result<()> {
    if !root.is_dir() {
        return Err(Error::Missing(root.to_path_buf()));
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Io(dir.to_path_buf(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Sequence directories below `root`, descending until a directory holds files.
fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in sorted_entries(root)? {
        if entry.is_dir() {
            let children = sorted_entries(&entry)?;
            if !children.is_empty() && children.iter().all(|c| c.is_dir()) {
                out.extend(sequence_dirs(&entry)?);
            } else {
                out.push(entry);
            }
        }
    }
    Ok(out)
}

fn relative_id(root: &Path, dir: &Path) -> String {
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Finds every triplet sequence below `root` in lexicographic path order.
pub fn scan_triplets(root: impl AsRef<Path>) -> Result<TripletScan> {
    let root = root.as_ref();
    require_dir(root)?;
    let mut samples = Vec::new();
    let mut skipped = 0;
    for dir in sequence_dirs(root)? {
        let paths = TRIPLET_FILES.map(|f| dir.join(f));
        if paths.iter().all(|p| p.is_file()) {
            samples.push(TripletSample {
                id: relative_id(root, &dir),
                paths,
            });
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} incomplete sequence(s)", root.display());
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{}: zero usable samples", root.display())));
    }
    Ok(TripletScan { samples, skipped })
}

/// Restricts samples to the sequences listed in a split file (one relative
/// sequence path per line), in the order of the file.
pub fn apply_split(samples: Vec<TripletSample>, split_file: impl AsRef<Path>) -> Result<Vec<TripletSample>> {
    let path = split_file.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let sample = samples
            .iter()
            .find(|s| s.id == line)
            .ok_or_else(|| Error::Dataset(format!("{}: sequence `{line}` not found", path.display())))?;
        out.push(sample.clone());
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("{}: zero usable samples", path.display())));
    }
    Ok(out)
}

/// `group` consecutive frames of one clip. The first and last are inputs; the
/// frames between are targets at `t = i / (group − 1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipSample {
    pub id: String,
    pub frames: Vec<PathBuf>,
}

impl ClipSample {
    pub fn target_times(&self) -> Vec<f32> {
        let span = (self.frames.len() - 1) as f32;
        (1..self.frames.len() - 1).map(|i| i as f32 / span).collect()
    }

    pub fn load(&self) -> Result<Sample> {
        let frames: Vec<Frame> = self.frames.iter().map(load_image).collect::<Result<_>>()?;
        let last = frames.len() - 1;
        let targets = self
            .target_times()
            .into_iter()
            .zip(frames[1..last].iter().cloned())
            .collect();
        Sample::new(self.id.clone(), frames[0].clone(), frames[last].clone(), targets)
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

/// Frame files sorted by the number in their stem, then by name.
fn numbered_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
    let key = |p: &PathBuf| {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
        (digits.parse::<u64>().unwrap_or(u64::MAX), stem)
    };
    frames.sort_by_key(key);
    Ok(frames)
}

/// Cuts every clip directory below `root` into windows of `group` frames
/// starting every `stride` frames; incomplete windows are dropped.
pub fn scan_clips(root: impl AsRef<Path>, group: usize, stride: usize) -> Result<Vec<ClipSample>> {
    let root = root.as_ref();
    require_dir(root)?;
    if group < 3 || stride == 0 {
        return Err(Error::InvalidArgument(format!("clip group {group} / stride {stride}: need group ≥ 3 and stride ≥ 1")));
    }
    let mut out = Vec::new();
    for dir in sequence_dirs(root)? {
        let frames = numbered_frames(&dir)?;
        let id = relative_id(root, &dir);
        let mut start = 0;
        while start + group <= frames.len() {
            out.push(ClipSample {
                id: format!("{id}@{start}"),
                frames: frames[start..start + group].to_vec(),
            });
            start += stride;
        }
    }
    Ok(out)
}

/// Which interpolation task a dataset serves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TaskMode {
    /// Middle frame of a triplet.
    #[default]
    SingleFrame,
    /// All intermediate frames of a clip window.
    MultiFrame,
}

impl TaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::SingleFrame => "single_frame",
            TaskMode::MultiFrame => "multi_frame",
        }
    }
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_frame" | "single" => Ok(TaskMode::SingleFrame),
            "multi_frame" | "multi" => Ok(TaskMode::MultiFrame),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected single_frame or multi_frame)"))),
        }
    }
}

/// Where a sample comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleSource {
    Triplet(TripletSample),
    Clip(ClipSample),
    Memory(Sample),
}

impl SampleSource {
    pub fn id(&self) -> &str {
        match self {
            SampleSource::Triplet(s) => &s.id,
            SampleSource::Clip(s) => &s.id,
            SampleSource::Memory(s) => &s.id,
        }
    }

    pub fn load(&self) -> Result<Sample> {
        match self {
            SampleSource::Triplet(s) => s.load(),
            SampleSource::Clip(s) => s.load(),
            SampleSource::Memory(s) => Ok(s.clone()),
        }
    }
}

/// Scans `root` with the layout of `mode`, optionally restricted by a split
/// file. A clip scan that finds nothing is reported with a layout hint.
pub fn load_dataset(mode: TaskMode, root: impl AsRef<Path>, split: Option<&Path>, clip_group: usize) -> Result<Vec<SampleSource>> {
    let root = root.as_ref();
    match mode {
        TaskMode::SingleFrame => {
            let mut samples = scan_triplets(root)?.samples;
            if let Some(split) = split {
                samples = apply_split(samples, split)?;
            }
            Ok(samples.into_iter().map(SampleSource::Triplet).collect())
        }
        TaskMode::MultiFrame => {
            let mut clips = scan_clips(root, clip_group, clip_group)?;
            if let Some(split) = split {
                let text = fs::read_to_string(split).map_err(|e| Error::Io(split.to_path_buf(), e))?;
                let keep: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
                clips.retain(|c| keep.iter().any(|k| c.id.split('@').next() == Some(*k)));
            }
            if clips.is_empty() {
                let hint = if scan_triplets(root).is_ok() {
                    " (this looks like a triplet layout; use single_frame mode)"
                } else {
                    ""
                };
                return Err(Error::Config(format!(
                    "{}: no clip directories with at least {clip_group} frames{hint}",
                    root.display()
                )));
            }
            Ok(clips.into_iter().map(SampleSource::Clip).collect())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: usize,
    pub flip_probability: f64,
    pub reverse_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: DEFAULT_CROP,
            flip_probability: 0.5,
            reverse_probability: 0.5,
        }
    }
}

/// Applies one shared random crop, random horizontal and vertical flips and a
/// random temporal reversal to every frame of the sample.
///
/// Frames smaller than the crop are instead center-cropped to the largest size
/// divisible by 32.
pub fn augment(sample: &Sample, rng: &mut ChaCha8Rng, config: AugmentConfig) -> Result<Sample> {
    let (h, w) = sample.dims();
    let (top, left, ch, cw) = if h >= config.crop && w >= config.crop {
        let top = rng.gen_range(0..=h - config.crop);
        let left = rng.gen_range(0..=w - config.crop);
        (top, left, config.crop, config.crop)
    } else {
        let ch = (h / RESOLUTION_MULTIPLE * RESOLUTION_MULTIPLE).max(h.min(RESOLUTION_MULTIPLE));
        let cw = (w / RESOLUTION_MULTIPLE * RESOLUTION_MULTIPLE).max(w.min(RESOLUTION_MULTIPLE));
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    };
    let hflip = rng.gen_bool(config.flip_probability);
    let vflip = rng.gen_bool(config.flip_probability);
    let reverse = rng.gen_bool(config.reverse_probability);
    let out = sample.map_frames(|f| {
        let mut f = f.crop(top, left, ch, cw)?;
        if hflip {
            f = f.flip_horizontal();
        }
        if vflip {
            f = f.flip_vertical();
        }
        Ok(f)
    })?;
    Ok(if reverse { out.reversed() } else { out })
}

/// Settings for the synthetic moving-rectangle scenes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub size: usize,
    /// Largest per-step displacement along each axis, in pixels.
    pub max_step: i32,
    pub min_rect: usize,
    pub max_rect: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 64,
            max_step: 3,
            min_rect: 12,
            max_rect: 24,
        }
    }
}

/// Frames of one scene: a flat-colored rectangle translating over a static
/// smooth background, sampled at `steps + 1` evenly spaced times.
pub fn rectangle_scene(rng: &mut ChaCha8Rng, config: SyntheticConfig, steps: usize) -> Vec<Frame> {
    let n = config.size;
    let bg: [[f32; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.1..0.5)));
    let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.95));
    let rh = rng.gen_range(config.min_rect..=config.max_rect);
    let rw = rng.gen_range(config.min_rect..=config.max_rect);
    let mut step = || {
        let s = rng.gen_range(1..=config.max_step);
        if rng.gen_bool(0.5) { s } else { -s }
    };
    let (dy, dx) = (step(), step());
    let travel_y = dy.unsigned_abs() as usize * steps;
    let travel_x = dx.unsigned_abs() as usize * steps;
    let margin = 4;
    let y0 = rng.gen_range(margin..=n - margin - rh - travel_y) as i32 + if dy < 0 { travel_y as i32 } else { 0 };
    let x0 = rng.gen_range(margin..=n - margin - rw - travel_x) as i32 + if dx < 0 { travel_x as i32 } else { 0 };
    (0..=steps)
        .map(|k| {
            let (ty, tx) = (y0 + dy * k as i32, x0 + dx * k as i32);
            Frame::from_fn(n, n, |y, x| {
                let (yi, xi) = (y as i32, x as i32);
                if yi >= ty && yi < ty + rh as i32 && xi >= tx && xi < tx + rw as i32 {
                    color
                } else {
                    let (fy, fx) = (y as f32 / n as f32, x as f32 / n as f32);
                    std::array::from_fn(|c| bg[c][0] + bg[c][1] * 0.5 * fx + bg[c][2] * 0.5 * fy)
                }
            })
        })
        .collect()
}

/// Triplets of translating rectangles; the middle frame is the exact
/// half-way position.
pub fn synthetic_triplets(count: usize, config: SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..count)
        .map(|i| {
            let mut f = rectangle_scene(rng, config, 2);
            let (i1, gt, i0) = (f.pop().unwrap(), f.pop().unwrap(), f.pop().unwrap());
            Sample::triplet(format!("synthetic_{i:03}"), i0, gt, i1).expect("uniform size")
        })
        .collect()
}

/// Writes samples as a triplet layout `root/<id>/im{1,2,3}.png`.
pub fn write_triplets(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    for s in samples {
        let dir = root.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| Error::Io(dir.clone(), e))?;
        let gt = &s
            .targets
            .first()
            .ok_or_else(|| Error::Dataset(format!("{}: no target frame", s.id)))?
            .1;
        for (name, frame) in TRIPLET_FILES.iter().zip([&s.i0, gt, &s.i1]) {
            save_image(frame, dir.join(name))?;
        }
    }
    Ok(())
}

/// Writes a clip as numbered frames `dir/00000.png, 00001.png, …`.
pub fn write_clip(dir: impl AsRef<Path>, frames: &[Frame]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::Io(dir.to_path_buf(), e))?;
    for (i, f) in frames.iter().enumerate() {
        save_image(f, dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}
