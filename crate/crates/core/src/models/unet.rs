//! Encoder-decoder with skip concatenation, shared by the flow estimator and
//! the refiner.

use ea_tensor::{he_uniform, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Kernel size of both convolutions in each encoder block.
pub const ENCODER_KERNELS: [usize; 6] = [7, 5, 3, 3, 3, 3];
pub const DECODER_KERNEL: usize = 3;

/// Input resolution must be a multiple of this (five 2× poolings).
pub const RESOLUTION_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

/// How the output projection is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadInit {
    /// He-uniform scaled by the given factor.
    Scaled(f64),
    Zero,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(rng, [out_c, in_c, kernel, kernel], in_c * kernel * kernel),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([1, out_c, 1, 1]), ParamKind::Trainable));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct Block {
    first: Conv,
    second: Conv,
}

impl Block {
    fn forward(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, x: Var, slope: f32) -> Var {
        let y = self.first.forward(tape, store, x);
        let y = tape.leaky_relu(y, slope);
        let y = self.second.forward(tape, store, y);
        tape.leaky_relu(y, slope)
    }
}

/// Six encoder blocks (2×2 max-pool after the first five) and five decoder
/// blocks (2× nearest upsampling, concatenation with the matching encoder
/// output, two 3×3 convolutions), then a 3×3 projection.
#[derive(Clone, Debug)]
pub struct UNet {
    in_channels: usize,
    out_channels: usize,
    slope: f32,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    head: Conv,
}

impl UNet {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        widths: &[usize; 6],
        slope: f32,
        head_init: HeadInit,
    ) -> Self {
        let mut encoder = Vec::with_capacity(6);
        let mut prev = in_channels;
        for (i, (&width, &k)) in widths.iter().zip(&ENCODER_KERNELS).enumerate() {
            let name = format!("{prefix}.enc{}", i + 1);
            encoder.push(Block {
                first: Conv::new(store, rng, &format!("{name}.conv1"), prev, width, k, 1, k / 2, true),
                second: Conv::new(store, rng, &format!("{name}.conv2"), width, width, k, 1, k / 2, true),
            });
            prev = width;
        }
        let mut decoder = Vec::with_capacity(5);
        for (j, skip) in (0..5).rev().enumerate() {
            let width = widths[skip];
            let name = format!("{prefix}.dec{}", j + 1);
            let k = DECODER_KERNEL;
            decoder.push(Block {
                first: Conv::new(store, rng, &format!("{name}.conv1"), prev + width, width, k, 1, k / 2, true),
                second: Conv::new(store, rng, &format!("{name}.conv2"), width, width, k, 1, k / 2, true),
            });
            prev = width;
        }
        let head = Conv::new(store, rng, &format!("{prefix}.head"), prev, out_channels, 3, 1, 1, true);
        let w = store.get_mut(head.weight);
        match head_init {
            HeadInit::Zero => w.data_mut().fill(0.0),
            HeadInit::Scaled(k) => w.data_mut().iter_mut().for_each(|v| *v *= k as f32),
        }
        Self {
            in_channels,
            out_channels,
            slope,
            encoder,
            decoder,
            head,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, x: Var) -> Var {
        let [_, c, h, w] = tape.shape(x);
        assert_eq!(c, self.in_channels, "unet: expected {} input channels, got {c}", self.in_channels);
        assert!(
            h % RESOLUTION_MULTIPLE == 0 && w % RESOLUTION_MULTIPLE == 0,
            "unet: resolution {h}x{w} not divisible by {RESOLUTION_MULTIPLE}"
        );
        let mut skips = Vec::with_capacity(5);
        let mut y = x;
        for (i, block) in self.encoder.iter().enumerate() {
            y = block.forward(tape, store, y, self.slope);
            if i < 5 {
                skips.push(y);
                y = tape.max_pool2(y);
            }
        }
        for block in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder block");
            let up = tape.upsample2(y);
            let joined = tape.concat(&[up, skip]);
            y = block.forward(tape, store, joined, self.slope);
        }
        self.head.forward(tape, store, y)
    }
}

/// Number of trainable scalars in a U-Net, from the layer arithmetic alone.
pub fn unet_parameter_count(in_channels: usize, out_channels: usize, widths: &[usize; 6]) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let mut total = 0;
    let mut prev = in_channels;
    for (&w, &k) in widths.iter().zip(&ENCODER_KERNELS) {
        total += conv(prev, w, k) + conv(w, w, k);
        prev = w;
    }
    for skip in (0..5).rev() {
        let w = widths[skip];
        total += conv(prev + w, w, DECODER_KERNEL) + conv(w, w, DECODER_KERNEL);
        prev = w;
    }
    total + conv(prev, out_channels, 3)
}
