//! The learned networks and attention-blended synthesis.

mod discriminator;
mod pipeline;
mod unet;

use std::fmt;
use std::str::FromStr;

use ea_tensor::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::edge_fusion::{augment_tensor, concat_tensor};
use crate::error::{Error, Result};
use crate::flow::{FlowMap, IntermediateForm, TimePoint};
use crate::imaging::{check_same_dims, EdgeMap, Frame};

pub use discriminator::{discriminate, Discriminator, DiscriminatorKind, DiscriminatorOutput, NormMode, Scorable, MIN_INPUT_SIZE};
pub use pipeline::{pad_to_multiple, Interpolation, Interpolator, ModelConfig, PipelineInputs, PipelineOutput};
pub use unet::{unet_parameter_count, HeadInit, UNet, DECODER_KERNEL, ENCODER_KERNELS, RESOLUTION_MULTIPLE};

pub const DEFAULT_WIDTHS: [usize; 6] = [32, 64, 128, 256, 512, 512];
pub const DEFAULT_LEAKY_SLOPE: f32 = 0.1;

/// Seeded generator for one network; `stream` separates networks sharing a seed.
pub(crate) fn network_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// How edge maps enter the flow estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum InputMode {
    /// Frames only.
    Plain,
    /// `½(I + I⊙E)` per frame.
    #[default]
    Augment,
    /// `[I ; I⊙E]` per frame.
    Concat,
    /// A frame network and an edge network whose flows are averaged.
    TwoStream,
}

impl InputMode {
    pub const ALL: [InputMode; 4] = [InputMode::Plain, InputMode::Augment, InputMode::Concat, InputMode::TwoStream];

    /// Input channels of the frame network and, for two-stream, the edge network.
    pub fn input_channels(self) -> (usize, Option<usize>) {
        match self {
            InputMode::Plain | InputMode::Augment => (6, None),
            InputMode::Concat => (12, None),
            InputMode::TwoStream => (6, Some(2)),
        }
    }

    pub fn uses_edges(self) -> bool {
        self != InputMode::Plain
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Plain => "plain",
            InputMode::Augment => "augment",
            InputMode::Concat => "concat",
            InputMode::TwoStream => "two_stream",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" | "none" => Ok(InputMode::Plain),
            "augment" => Ok(InputMode::Augment),
            "concat" => Ok(InputMode::Concat),
            "two_stream" | "two-stream" => Ok(InputMode::TwoStream),
            other => Err(Error::Config(format!(
                "unknown input mode `{other}` (expected plain, augment, concat or two_stream)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowUNetConfig {
    pub input_mode: InputMode,
    pub encoder_channels: Vec<usize>,
    pub leaky_slope: f32,
}

impl Default for FlowUNetConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::default(),
            encoder_channels: DEFAULT_WIDTHS.to_vec(),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

pub(crate) fn widths(channels: &[usize]) -> Result<[usize; 6]> {
    let arr: [usize; 6] = channels.try_into().map_err(|_| {
        Error::InvalidArgument(format!("encoder needs exactly 6 channel widths, got {}", channels.len()))
    })?;
    if arr.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArgument("encoder channel widths must be positive".into()));
    }
    Ok(arr)
}

pub(crate) fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % RESOLUTION_MULTIPLE != 0 || w % RESOLUTION_MULTIPLE != 0 {
        return Err(Error::InvalidArgument(format!(
            "resolution {h}x{w} is not divisible by {RESOLUTION_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Predicts the bidirectional flow pair `(F_0→1, F_1→0)` as four channels.
#[derive(Debug)]
pub struct FlowEstimator {
    config: FlowUNetConfig,
    store: ParamStore<f32>,
    frame_net: UNet,
    edge_net: Option<UNet>,
    /// Test hook: use the frame stream's output for both streams.
    pub force_equal_streams: bool,
}

impl FlowEstimator {
    pub fn build(config: FlowUNetConfig, seed: u64) -> Result<Self> {
        let w = widths(&config.encoder_channels)?;
        let mut store = ParamStore::new();
        let mut rng = network_rng(seed, 1);
        let (frame_in, edge_in) = config.input_mode.input_channels();
        let head = HeadInit::Scaled(0.1);
        let frame_net = UNet::build(&mut store, &mut rng, "flow.frame", frame_in, 4, &w, config.leaky_slope, head);
        let edge_net = edge_in
            .map(|c| UNet::build(&mut store, &mut rng, "flow.edge", c, 4, &w, config.leaky_slope, head));
        Ok(Self {
            config,
            store,
            frame_net,
            edge_net,
            force_equal_streams: false,
        })
    }

    pub fn config(&self) -> &FlowUNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn input_channels(&self) -> (usize, Option<usize>) {
        (self.frame_net.in_channels(), self.edge_net.as_ref().map(UNet::in_channels))
    }

    /// Network inputs for the configured mode. Frames are `N×3×H×W`, edges `N×1×H×W`.
    pub fn prepare_inputs(
        &self,
        i0: &Tensor<f32>,
        i1: &Tensor<f32>,
        edges: Option<(&Tensor<f32>, &Tensor<f32>)>,
    ) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        let need_edges = || {
            edges.ok_or_else(|| Error::InvalidArgument(format!("input mode {} needs edge maps", self.config.input_mode)))
        };
        Ok(match self.config.input_mode {
            InputMode::Plain => (Tensor::concat_channels(&[i0, i1])?, None),
            InputMode::Augment => {
                let (e0, e1) = need_edges()?;
                (Tensor::concat_channels(&[&augment_tensor(i0, e0)?, &augment_tensor(i1, e1)?])?, None)
            }
            InputMode::Concat => {
                let (e0, e1) = need_edges()?;
                (Tensor::concat_channels(&[&concat_tensor(i0, e0)?, &concat_tensor(i1, e1)?])?, None)
            }
            InputMode::TwoStream => {
                let (e0, e1) = need_edges()?;
                (Tensor::concat_channels(&[i0, i1])?, Some(Tensor::concat_channels(&[e0, e1])?))
            }
        })
    }

    /// Runs the network(s); returns a `N×4×H×W` node (`F_0→1` then `F_1→0`).
    pub fn forward(&self, tape: &mut Tape<f32>, frames_in: Tensor<f32>, edges_in: Option<Tensor<f32>>) -> Var {
        let x = tape.input(frames_in);
        let frame_flow = self.frame_net.forward(tape, &self.store, x);
        match (&self.edge_net, edges_in) {
            (Some(net), Some(e)) => {
                let edge_flow = if self.force_equal_streams {
                    frame_flow
                } else {
                    let ev = tape.input(e);
                    net.forward(tape, &self.store, ev)
                };
                let sum = tape.add(frame_flow, edge_flow);
                tape.scale(sum, 0.5)
            }
            _ => frame_flow,
        }
    }
}

/// Estimates `(F_0→1, F_1→0)` for one frame pair.
pub fn estimate_flow(
    est: &FlowEstimator,
    i0: &Frame,
    i1: &Frame,
    e0: &EdgeMap,
    e1: &EdgeMap,
) -> Result<(FlowMap, FlowMap)> {
    check_same_dims("estimate_flow", i0.dims(), i1.dims())?;
    check_same_dims("estimate_flow", i0.dims(), e0.dims())?;
    check_same_dims("estimate_flow", i0.dims(), e1.dims())?;
    check_resolution(i0.height(), i0.width())?;
    let (e0t, e1t) = (e0.to_tensor(), e1.to_tensor());
    let (x, e) = est.prepare_inputs(&i0.to_tensor(), &i1.to_tensor(), Some((&e0t, &e1t)))?;
    let mut tape = Tape::inference();
    let out = est.forward(&mut tape, x, e);
    let flows = tape.value(out);
    Ok((FlowMap::from_tensor(flows, 0, 0)?, FlowMap::from_tensor(flows, 0, 2)?))
}

/// Input channels of the refiner: both frames, both estimated flows, both
/// intermediate flows and both warped frames.
pub const REFINER_INPUTS: usize = 3 + 3 + 2 + 2 + 2 + 2 + 3 + 3;
/// Two flow residuals plus one attention logit.
pub const REFINER_OUTPUTS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerConfig {
    pub encoder_channels: Vec<usize>,
    pub leaky_slope: f32,
    /// Add the predicted flows to the linear intermediate flows instead of
    /// using them directly.
    pub residual: bool,
    pub form: IntermediateForm,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            encoder_channels: DEFAULT_WIDTHS.to_vec(),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            residual: true,
            form: IntermediateForm::default(),
        }
    }
}

/// Tape nodes produced by the refiner.
#[derive(Clone, Copy, Debug)]
pub struct RefinerNodes {
    pub linear_t0: Var,
    pub linear_t1: Var,
    pub refined_t0: Var,
    pub refined_t1: Var,
    pub attention0: Var,
    pub attention1: Var,
}

/// Second U-Net: corrects the intermediate flows and predicts blend weights.
#[derive(Debug)]
pub struct Refiner {
    config: RefinerConfig,
    store: ParamStore<f32>,
    net: UNet,
}

impl Refiner {
    pub fn build(config: RefinerConfig, seed: u64) -> Result<Self> {
        let w = widths(&config.encoder_channels)?;
        let mut store = ParamStore::new();
        let mut rng = network_rng(seed, 3);
        let net = UNet::build(
            &mut store,
            &mut rng,
            "refine",
            REFINER_INPUTS,
            REFINER_OUTPUTS,
            &w,
            config.leaky_slope,
            HeadInit::Zero,
        );
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// `i0`/`i1` are `N×3×H×W`, `f01`/`f10` are `N×2×H×W`; `t` holds one time per sample.
    pub fn forward(&self, tape: &mut Tape<f32>, i0: Var, i1: Var, f01: Var, f10: Var, t: &[f32]) -> RefinerNodes {
        let (linear_t0, linear_t1) = intermediate_nodes(tape, f01, f10, t, self.config.form);
        let w0 = tape.warp(i0, linear_t0);
        let w1 = tape.warp(i1, linear_t1);
        let x = tape.concat(&[i0, i1, f01, f10, linear_t0, linear_t1, w0, w1]);
        let out = self.net.forward(tape, &self.store, x);
        let d0 = tape.slice(out, 0, 2);
        let d1 = tape.slice(out, 2, 2);
        let logit = tape.slice(out, 4, 1);
        let (refined_t0, refined_t1) = if self.config.residual {
            (tape.add(linear_t0, d0), tape.add(linear_t1, d1))
        } else {
            (d0, d1)
        };
        let attention0 = tape.sigmoid(logit);
        let attention1 = tape.affine(attention0, -1.0, 1.0);
        RefinerNodes {
            linear_t0,
            linear_t1,
            refined_t0,
            refined_t1,
            attention0,
            attention1,
        }
    }
}

/// Tape version of [`crate::flow::intermediate_flows`] with one `t` per sample;
/// uses the same arithmetic so results match bit for bit.
pub fn intermediate_nodes(tape: &mut Tape<f32>, f01: Var, f10: Var, t: &[f32], form: IntermediateForm) -> (Var, Var) {
    match form {
        IntermediateForm::Forward => {
            let a: Vec<f32> = t.iter().map(|&t| -t).collect();
            let b: Vec<f32> = t.iter().map(|&t| 1.0 - t).collect();
            (tape.scale_samples(f01, &a), tape.scale_samples(f01, &b))
        }
        IntermediateForm::Symmetric => {
            let diff = tape.sub(f10, f01);
            let half = tape.scale(diff, 0.5);
            let b: Vec<f32> = t.iter().map(|&t| -(1.0 - t)).collect();
            (tape.scale_samples(half, t), tape.scale_samples(half, &b))
        }
    }
}

/// Per-pixel blend weights for the two warped inputs, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPair {
    height: usize,
    width: usize,
    a0: Vec<f32>,
    a1: Vec<f32>,
}

impl AttentionPair {
    /// `A_0 = sigmoid(logit)`, `A_1 = 1 − A_0`.
    pub fn from_first(height: usize, width: usize, a0: Vec<f32>) -> Result<Self> {
        if a0.len() != height * width {
            return Err(Error::InvalidArgument("attention map size".into()));
        }
        let a1 = a0.iter().map(|&a| -a + 1.0).collect();
        Ok(Self { height, width, a0, a1 })
    }

    pub fn uniform(height: usize, width: usize, a0: f32) -> Self {
        Self::from_first(height, width, vec![a0; height * width]).expect("sized")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn a0(&self) -> &[f32] {
        &self.a0
    }

    pub fn a1(&self) -> &[f32] {
        &self.a1
    }

    /// Largest `|A_0 + A_1 − 1|`.
    pub fn max_sum_deviation(&self) -> f32 {
        self.a0
            .iter()
            .zip(&self.a1)
            .map(|(a, b)| (a + b - 1.0).abs())
            .fold(0.0, f32::max)
    }

    pub fn first_as_edge_map(&self) -> EdgeMap {
        EdgeMap::new(self.height, self.width, self.a0.clone()).expect("sized")
    }

    pub fn crop(&self, height: usize, width: usize) -> Self {
        let a0 = (0..height)
            .flat_map(|y| self.a0[y * self.width..y * self.width + width].to_vec())
            .collect();
        Self::from_first(height, width, a0).expect("sized")
    }
}

/// Refines the flows of one frame pair and predicts the attention pair.
pub fn refine_and_attend(
    refiner: &Refiner,
    i0: &Frame,
    i1: &Frame,
    f01: &FlowMap,
    f10: &FlowMap,
    t: TimePoint,
) -> Result<(FlowMap, FlowMap, AttentionPair)> {
    check_same_dims("refine_and_attend", i0.dims(), i1.dims())?;
    check_same_dims("refine_and_attend", i0.dims(), f01.dims())?;
    check_same_dims("refine_and_attend", i0.dims(), f10.dims())?;
    check_resolution(i0.height(), i0.width())?;
    let mut tape = Tape::inference();
    let vars = [i0.to_tensor(), i1.to_tensor(), f01.to_tensor(), f10.to_tensor()].map(|t| tape.input(t));
    let nodes = refiner.forward(&mut tape, vars[0], vars[1], vars[2], vars[3], &[t.value()]);
    let (h, w) = i0.dims();
    Ok((
        FlowMap::from_tensor(tape.value(nodes.refined_t0), 0, 0)?,
        FlowMap::from_tensor(tape.value(nodes.refined_t1), 0, 0)?,
        AttentionPair::from_first(h, w, tape.value(nodes.attention0).data().to_vec())?,
    ))
}

/// Tape version of [`synthesize`]: `clamp(A_0·warp(I_0) + A_1·warp(I_1), 0, 1)`.
pub fn synthesize_nodes(tape: &mut Tape<f32>, i0: Var, i1: Var, ft0: Var, ft1: Var, a0: Var, a1: Var) -> Var {
    let w0 = tape.warp(i0, ft0);
    let w1 = tape.warp(i1, ft1);
    let p0 = tape.mul_channel(w0, a0);
    let p1 = tape.mul_channel(w1, a1);
    let sum = tape.add(p0, p1);
    tape.clamp(sum, 0.0, 1.0)
}

/// Attention-weighted blend of the two warped inputs, clamped to `[0, 1]`.
pub fn synthesize(i0: &Frame, i1: &Frame, fr_t0: &FlowMap, fr_t1: &FlowMap, att: &AttentionPair) -> Result<Frame> {
    for (op, d) in [("synthesize", i1.dims()), ("synthesize", fr_t0.dims()), ("synthesize", fr_t1.dims()), ("synthesize", att.dims())] {
        check_same_dims(op, i0.dims(), d)?;
    }
    let (h, w) = i0.dims();
    let mut tape = Tape::inference();
    let i0v = tape.input(i0.to_tensor());
    let i1v = tape.input(i1.to_tensor());
    let f0 = tape.input(fr_t0.to_tensor());
    let f1 = tape.input(fr_t1.to_tensor());
    let a0 = tape.input(Tensor::from_vec([1, 1, h, w], att.a0.clone())?);
    let a1 = tape.input(Tensor::from_vec([1, 1, h, w], att.a1.clone())?);
    let out = synthesize_nodes(&mut tape, i0v, i1v, f0, f1, a0, a1);
    Frame::from_tensor(tape.value(out), 0)
}
