//! Convolutional critics over frames and edge maps.

use std::sync::atomic::{AtomicUsize, Ordering};

use ea_tensor::{BatchStats, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

use super::network_rng;
use super::unet::Conv;
use crate::error::{Error, Result};
use crate::imaging::{EdgeMap, Frame};

pub const MIN_INPUT_SIZE: usize = 64;
const LAYERS: usize = 4;
const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DiscriminatorKind {
    /// Three-channel frames.
    Frame,
    /// Single-channel edge maps.
    Edge,
}

impl DiscriminatorKind {
    pub fn channels(self) -> usize {
        match self {
            DiscriminatorKind::Frame => 3,
            DiscriminatorKind::Edge => 1,
        }
    }
}

/// Whether batch normalization uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Layer {
    conv: Conv,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Tape nodes of one discriminator pass.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// Pre-sigmoid spatial map, `N×1×h×w`.
    pub logits: Var,
    /// Spatial mean of the sigmoid map, `N×1×1×1`.
    pub score: Var,
    /// Batch statistics per layer (train mode only).
    pub stats: Vec<BatchStats<f32>>,
}

/// Four stride-2 4×4 convolutions with batch norm and leaky activation, then a
/// 1×1 projection to one channel and a sigmoid.
#[derive(Debug)]
pub struct Discriminator {
    kind: DiscriminatorKind,
    base_width: usize,
    slope: f32,
    store: ParamStore<f32>,
    layers: Vec<Layer>,
    projection: Conv,
    calls: AtomicUsize,
}

impl Discriminator {
    /// Layer widths are `base, 2·base, 4·base, 8·base`.
    pub fn build(kind: DiscriminatorKind, base_width: usize, slope: f32, seed: u64) -> Result<Self> {
        if base_width == 0 {
            return Err(Error::InvalidArgument("discriminator width must be positive".into()));
        }
        let prefix = match kind {
            DiscriminatorKind::Frame => "disc_frame",
            DiscriminatorKind::Edge => "disc_edge",
        };
        let stream = match kind {
            DiscriminatorKind::Frame => 5,
            DiscriminatorKind::Edge => 7,
        };
        let mut rng = network_rng(seed, stream);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(LAYERS);
        let mut prev = kind.channels();
        for i in 0..LAYERS {
            let width = base_width << i;
            let name = format!("{prefix}.layer{}", i + 1);
            let conv = Conv::new(&mut store, &mut rng, &format!("{name}.conv"), prev, width, 4, 2, 1, false);
            let row = |v: f32| Tensor::full([1, width, 1, 1], v);
            layers.push(Layer {
                conv,
                gamma: store.add(format!("{name}.bn.gamma"), row(1.0), ParamKind::Trainable),
                beta: store.add(format!("{name}.bn.beta"), row(0.0), ParamKind::Trainable),
                running_mean: store.add(format!("{name}.bn.running_mean"), row(0.0), ParamKind::Buffer),
                running_var: store.add(format!("{name}.bn.running_var"), row(1.0), ParamKind::Buffer),
            });
            prev = width;
        }
        let projection = Conv::new(&mut store, &mut rng, &format!("{prefix}.proj"), prev, 1, 1, 1, 0, true);
        Ok(Self {
            kind,
            base_width,
            slope,
            store,
            layers,
            projection,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn kind(&self) -> DiscriminatorKind {
        self.kind
    }

    pub fn base_width(&self) -> usize {
        self.base_width
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Number of forward passes since construction.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != self.kind.channels() {
            return Err(Error::InvalidArgument(format!(
                "{:?} discriminator expects {} channels, got {c}",
                self.kind,
                self.kind.channels()
            )));
        }
        if h < MIN_INPUT_SIZE || w < MIN_INPUT_SIZE {
            return Err(Error::InvalidArgument(format!(
                "discriminator input {h}x{w} is smaller than {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}"
            )));
        }
        Ok(())
    }

    /// Scores a batch. Panics on a channel mismatch; use [`Self::check_input`] first
    /// for untrusted shapes.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Var, mode: NormMode) -> DiscriminatorOutput {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut y = x;
        let mut stats = Vec::new();
        for layer in &self.layers {
            y = layer.conv.forward(tape, &self.store, y);
            let g = tape.param(&self.store, layer.gamma);
            let b = tape.param(&self.store, layer.beta);
            y = match mode {
                NormMode::Train => {
                    let (out, s) = tape.batch_norm_train(y, g, b, BN_EPS);
                    stats.push(s);
                    out
                }
                NormMode::Eval => tape.batch_norm_eval(
                    y,
                    g,
                    b,
                    self.store.get(layer.running_mean).data(),
                    self.store.get(layer.running_var).data(),
                    BN_EPS,
                ),
            };
            y = tape.leaky_relu(y, self.slope);
        }
        let logits = self.projection.forward(tape, &self.store, y);
        let probs = tape.sigmoid(logits);
        let score = tape.spatial_mean(probs);
        DiscriminatorOutput { logits, score, stats }
    }

    /// Folds training-mode batch statistics into the running averages, using
    /// the unbiased variance.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<f32>]) {
        for (layer, s) in self.layers.iter().zip(stats) {
            let correction = if s.count > 1 { s.count as f32 / (s.count - 1) as f32 } else { 1.0 };
            let mean = self.store.get_mut(layer.running_mean);
            for (r, &m) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let var = self.store.get_mut(layer.running_var);
            for (r, &v) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
            }
        }
    }
}

/// Image types a discriminator can score.
pub trait Scorable {
    fn to_input(&self) -> Tensor<f32>;
}

impl Scorable for Frame {
    fn to_input(&self) -> Tensor<f32> {
        self.to_tensor()
    }
}

impl Scorable for EdgeMap {
    fn to_input(&self) -> Tensor<f32> {
        self.to_tensor()
    }
}

/// Inference-mode score of one image, strictly inside `(0, 1)`.
pub fn discriminate(d: &Discriminator, image: &impl Scorable) -> Result<f32> {
    let x = image.to_input();
    d.check_input(x.shape())?;
    let mut tape = Tape::inference();
    let xv = tape.input(x);
    let out = d.forward(&mut tape, xv, NormMode::Eval);
    Ok(tape.value(out.score).data()[0])
}
