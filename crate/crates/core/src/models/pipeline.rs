//! The full interpolation network: flow estimation, refinement, attention
//! blending and the optional critics.

use ea_tensor::{Tape, Tensor, Var};
use sha2::{Digest, Sha256};

use super::{
    check_resolution, intermediate_nodes, synthesize_nodes, AttentionPair, Discriminator, DiscriminatorKind,
    FlowEstimator, FlowUNetConfig, InputMode, Refiner, RefinerConfig, DEFAULT_LEAKY_SLOPE, DEFAULT_WIDTHS,
    RESOLUTION_MULTIPLE,
};
use crate::error::{Error, Result};
use crate::flow::{FlowMap, IntermediateForm, TimePoint};
use crate::imaging::{canny_edges, check_same_dims, CannyParams, Frame};
use crate::kv;

/// Everything that determines the network structure. Two models with equal
/// configs have interchangeable parameter files.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_mode: InputMode,
    pub flow_channels: Vec<usize>,
    pub refine_channels: Vec<usize>,
    pub leaky_slope: f32,
    pub refinement: bool,
    pub attention: bool,
    pub residual_refinement: bool,
    pub intermediate: IntermediateForm,
    pub frame_discriminator: bool,
    pub edge_discriminator: bool,
    pub discriminator_width: usize,
    pub canny: CannyParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::default(),
            flow_channels: DEFAULT_WIDTHS.to_vec(),
            refine_channels: DEFAULT_WIDTHS.to_vec(),
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            refinement: true,
            attention: true,
            residual_refinement: true,
            intermediate: IntermediateForm::default(),
            frame_discriminator: true,
            edge_discriminator: true,
            discriminator_width: 64,
            canny: CannyParams::default(),
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 14] = [
        "input_mode",
        "flow_channels",
        "refine_channels",
        "leaky_slope",
        "refinement",
        "attention",
        "residual_refinement",
        "intermediate",
        "frame_discriminator",
        "edge_discriminator",
        "discriminator_width",
        "canny_low",
        "canny_high",
        "canny_sigma",
    ];

    /// Applies one `key = value` setting; returns `false` for keys that do not
    /// belong to the model.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "input_mode" => self.input_mode = raw.parse()?,
            "flow_channels" => self.flow_channels = kv::list(key, raw)?,
            "refine_channels" => self.refine_channels = kv::list(key, raw)?,
            "leaky_slope" => self.leaky_slope = kv::value(key, raw)?,
            "refinement" => self.refinement = kv::flag(key, raw)?,
            "attention" => self.attention = kv::flag(key, raw)?,
            "residual_refinement" => self.residual_refinement = kv::flag(key, raw)?,
            "intermediate" => {
                self.intermediate = match raw {
                    "symmetric" => IntermediateForm::Symmetric,
                    "forward" => IntermediateForm::Forward,
                    _ => return Err(Error::Config(format!("`intermediate`: expected symmetric or forward, got `{raw}`"))),
                }
            }
            "frame_discriminator" => self.frame_discriminator = kv::flag(key, raw)?,
            "edge_discriminator" => self.edge_discriminator = kv::flag(key, raw)?,
            "discriminator_width" => self.discriminator_width = kv::value(key, raw)?,
            "canny_low" => self.canny.low = kv::value(key, raw)?,
            "canny_high" => self.canny.high = kv::value(key, raw)?,
            "canny_sigma" => self.canny.sigma = kv::value(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let values = [
            self.input_mode.to_string(),
            kv::join(&self.flow_channels),
            kv::join(&self.refine_channels),
            self.leaky_slope.to_string(),
            self.refinement.to_string(),
            self.attention.to_string(),
            self.residual_refinement.to_string(),
            self.intermediate.name().to_string(),
            self.frame_discriminator.to_string(),
            self.edge_discriminator.to_string(),
            self.discriminator_width.to_string(),
            self.canny.low.to_string(),
            self.canny.high.to_string(),
            self.canny.sigma.to_string(),
        ];
        Self::KEYS.iter().zip(values).map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        kv::render(&self.entries())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv::parse(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
        }
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        super::widths(&self.flow_channels)?;
        super::widths(&self.refine_channels)?;
        self.canny.validate()?;
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky_slope {} outside [0, 1)", self.leaky_slope)));
        }
        if self.discriminator_width == 0 {
            return Err(Error::Config("discriminator_width must be positive".into()));
        }
        Ok(())
    }

    pub fn flow_config(&self) -> FlowUNetConfig {
        FlowUNetConfig {
            input_mode: self.input_mode,
            encoder_channels: self.flow_channels.clone(),
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig {
            encoder_channels: self.refine_channels.clone(),
            leaky_slope: self.leaky_slope,
            residual: self.residual_refinement,
            form: self.intermediate,
        }
    }
}

/// A batch of network inputs: frames `N×3×H×W`, Canny edges `N×1×H×W` (when the
/// input mode uses them) and one time per sample.
#[derive(Clone, Debug)]
pub struct PipelineInputs {
    pub i0: Tensor<f32>,
    pub i1: Tensor<f32>,
    pub edges: Option<(Tensor<f32>, Tensor<f32>)>,
    pub t: Vec<f32>,
}

/// Tape nodes of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct PipelineOutput {
    pub i0: Var,
    pub i1: Var,
    /// `F_0→1` (channels 0–1) and `F_1→0` (channels 2–3).
    pub flows: Var,
    pub f01: Var,
    pub f10: Var,
    /// Linear intermediate flows before refinement.
    pub linear_t0: Var,
    pub linear_t1: Var,
    /// Flows used for synthesis (refined when refinement is on).
    pub ft0: Var,
    pub ft1: Var,
    pub a0: Var,
    pub a1: Var,
    pub prediction: Var,
}

/// Result of interpolating one frame pair.
#[derive(Clone, Debug)]
pub struct Interpolation {
    pub frame: Frame,
    pub f01: FlowMap,
    pub f10: FlowMap,
    pub ft0: FlowMap,
    pub ft1: FlowMap,
    pub attention: AttentionPair,
}

/// Reflect-pads a frame to the next multiple of 32 on each axis.
pub fn pad_to_multiple(frame: &Frame) -> Result<Frame> {
    let up = |v: usize| v.div_ceil(RESOLUTION_MULTIPLE).max(1) * RESOLUTION_MULTIPLE;
    frame.pad_reflect(up(frame.height()), up(frame.width()))
}

#[derive(Debug)]
pub struct Interpolator {
    config: ModelConfig,
    pub flow: FlowEstimator,
    pub refiner: Option<Refiner>,
    pub frame_critic: Option<Discriminator>,
    pub edge_critic: Option<Discriminator>,
}

impl Interpolator {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let flow = FlowEstimator::build(config.flow_config(), seed)?;
        let refiner = config
            .refinement
            .then(|| Refiner::build(config.refiner_config(), seed))
            .transpose()?;
        let critic = |on: bool, kind| {
            on.then(|| Discriminator::build(kind, config.discriminator_width, config.leaky_slope, seed))
                .transpose()
        };
        let frame_critic = critic(config.frame_discriminator, DiscriminatorKind::Frame)?;
        let edge_critic = critic(config.edge_discriminator, DiscriminatorKind::Edge)?;
        Ok(Self {
            config,
            flow,
            refiner,
            frame_critic,
            edge_critic,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable scalars in the generator (flow estimator plus refiner).
    pub fn generator_parameter_count(&self) -> usize {
        self.flow.store().trainable_count() + self.refiner.as_ref().map_or(0, |r| r.store().trainable_count())
    }

    /// Canny edge maps of a `N×3×H×W` batch as `N×1×H×W`.
    pub fn edge_batch(&self, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut maps = Vec::with_capacity(frames.batch());
        for n in 0..frames.batch() {
            let f = Frame::from_tensor(frames, n)?;
            maps.push(canny_edges(&f, self.config.canny)?.to_tensor());
        }
        let refs: Vec<&Tensor<f32>> = maps.iter().collect();
        Ok(Tensor::stack(&refs)?)
    }

    /// Builds network inputs, extracting edges when the mode needs them.
    pub fn inputs(&self, i0: Tensor<f32>, i1: Tensor<f32>, t: Vec<f32>) -> Result<PipelineInputs> {
        let edges = if self.config.input_mode.uses_edges() {
            Some((self.edge_batch(&i0)?, self.edge_batch(&i1)?))
        } else {
            None
        };
        Ok(PipelineInputs { i0, i1, edges, t })
    }

    /// Records a generator pass on `tape`.
    pub fn forward(&self, tape: &mut Tape<f32>, inputs: &PipelineInputs) -> Result<PipelineOutput> {
        let [n, _, h, w] = inputs.i0.shape();
        if inputs.t.len() != n {
            return Err(Error::InvalidArgument(format!("{} time values for a batch of {n}", inputs.t.len())));
        }
        check_resolution(h, w)?;
        let edges = inputs.edges.as_ref().map(|(a, b)| (a, b));
        let (x, e) = self.flow.prepare_inputs(&inputs.i0, &inputs.i1, edges)?;
        let flows = self.flow.forward(tape, x, e);
        let i0 = tape.input(inputs.i0.clone());
        let i1 = tape.input(inputs.i1.clone());
        let f01 = tape.slice(flows, 0, 2);
        let f10 = tape.slice(flows, 2, 2);
        let half = |tape: &mut Tape<f32>| tape.input(Tensor::full([n, 1, h, w], 0.5));
        let (linear_t0, linear_t1, ft0, ft1, a0, a1) = match &self.refiner {
            Some(refiner) => {
                let r = refiner.forward(tape, i0, i1, f01, f10, &inputs.t);
                let (a0, a1) = if self.config.attention {
                    (r.attention0, r.attention1)
                } else {
                    (half(tape), half(tape))
                };
                (r.linear_t0, r.linear_t1, r.refined_t0, r.refined_t1, a0, a1)
            }
            None => {
                let (l0, l1) = intermediate_nodes(tape, f01, f10, &inputs.t, self.config.intermediate);
                (l0, l1, l0, l1, half(tape), half(tape))
            }
        };
        let prediction = synthesize_nodes(tape, i0, i1, ft0, ft1, a0, a1);
        Ok(PipelineOutput {
            i0,
            i1,
            flows,
            f01,
            f10,
            linear_t0,
            linear_t1,
            ft0,
            ft1,
            a0,
            a1,
            prediction,
        })
    }

    /// Interpolates at `t` for frames of any size, padding reflectively to a
    /// multiple of 32 and cropping the results back.
    pub fn interpolate(&self, i0: &Frame, i1: &Frame, t: TimePoint) -> Result<Interpolation> {
        check_same_dims("interpolate", i0.dims(), i1.dims())?;
        let (h, w) = i0.dims();
        let (p0, p1) = (pad_to_multiple(i0)?, pad_to_multiple(i1)?);
        if p0.dims() != (h, w) {
            log::warn!("{h}x{w} input padded to {}x{} for inference", p0.height(), p0.width());
        }
        let inputs = self.inputs(p0.to_tensor(), p1.to_tensor(), vec![t.value()])?;
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, &inputs)?;
        let flow = |v: Var| FlowMap::from_tensor(tape.value(v), 0, 0).and_then(|f| f.crop(h, w));
        let (ph, pw) = p0.dims();
        let a0 = tape.value(out.a0).data().to_vec();
        Ok(Interpolation {
            frame: Frame::from_tensor(tape.value(out.prediction), 0)?.crop(0, 0, h, w)?,
            f01: flow(out.f01)?,
            f10: flow(out.f10)?,
            ft0: flow(out.ft0)?,
            ft1: flow(out.ft1)?,
            attention: AttentionPair::from_first(ph, pw, a0)?.crop(h, w),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let mut cfg = ModelConfig::default();
        cfg.input_mode = InputMode::TwoStream;
        cfg.flow_channels = vec![4, 4, 8, 8, 8, 8];
        cfg.attention = false;
        cfg.intermediate = IntermediateForm::Forward;
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(ModelConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn pads_to_next_multiple() {
        let f = Frame::filled(40, 33, 0.3);
        assert_eq!(pad_to_multiple(&f).unwrap().dims(), (64, 64));
        let g = Frame::filled(64, 32, 0.3);
        assert_eq!(pad_to_multiple(&g).unwrap().dims(), (64, 32));
    }
}
