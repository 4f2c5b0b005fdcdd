//! Training losses and image quality metrics.

use ea_tensor::{BatchStats, Tape, Var};

use crate::error::{Error, Result};
use crate::flow::{backward_warp, FlowMap};
use crate::imaging::{check_same_dims, soft_edges, Frame};
use crate::models::{Discriminator, NormMode};

/// Mean absolute difference over all pixels and channels.
pub fn synthesis_loss(pred: &Frame, gt: &Frame) -> Result<f64> {
    check_same_dims("synthesis_loss", pred.dims(), gt.dims())?;
    Ok(mean_abs_diff(pred.data(), gt.data()))
}

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    let total: f64 = a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).abs()).sum();
    total / a.len() as f64
}

/// Photometric consistency of the bidirectional flows:
/// `mean|I_0 − warp(I_1, F_0→1)| + mean|I_1 − warp(I_0, F_1→0)|`.
pub fn flow_loss(i0: &Frame, i1: &Frame, f01: &FlowMap, f10: &FlowMap) -> Result<f64> {
    check_same_dims("flow_loss", i0.dims(), i1.dims())?;
    let w1 = backward_warp(i1, f01)?;
    let w0 = backward_warp(i0, f10)?;
    Ok(mean_abs_diff(i0.data(), w1.data()) + mean_abs_diff(i1.data(), w0.data()))
}

/// How critic scores become losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdversarialForm {
    /// Critics maximize `D(real) − D(fake)`; the generator minimizes `−D(fake)`.
    #[default]
    Difference,
    /// Binary cross-entropy on the critics' logits.
    CrossEntropy,
}

impl AdversarialForm {
    pub fn as_str(self) -> &'static str {
        match self {
            AdversarialForm::Difference => "difference",
            AdversarialForm::CrossEntropy => "cross_entropy",
        }
    }
}

impl std::str::FromStr for AdversarialForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "difference" => Ok(AdversarialForm::Difference),
            "cross_entropy" | "bce" => Ok(AdversarialForm::CrossEntropy),
            other => Err(Error::Config(format!("unknown adversarial form `{other}`"))),
        }
    }
}

/// Scores from one evaluation of both critics on a prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialTerms {
    /// `−D_I(pred) − D_E(soft_edges(pred))`.
    pub generator: f64,
    /// `−(D_I(gt) − D_I(pred))`.
    pub frame_critic: f64,
    /// `−(D_E(E_gt) − D_E(E_pred))`.
    pub edge_critic: f64,
}

/// Inference-mode adversarial terms; edge critics see Sobel edges of both images.
pub fn adversarial_losses(d_frame: &Discriminator, d_edge: &Discriminator, pred: &Frame, gt: &Frame) -> Result<AdversarialTerms> {
    check_same_dims("adversarial_losses", pred.dims(), gt.dims())?;
    let score = |d: &Discriminator, x| crate::models::discriminate(d, x);
    let (fr, ff) = (score(d_frame, gt)? as f64, score(d_frame, pred)? as f64);
    let (e_gt, e_pred) = (soft_edges(gt), soft_edges(pred));
    let er = crate::models::discriminate(d_edge, &e_gt)? as f64;
    let ef = crate::models::discriminate(d_edge, &e_pred)? as f64;
    Ok(AdversarialTerms {
        generator: -ff - ef,
        frame_critic: -(fr - ff),
        edge_critic: -(er - ef),
    })
}

pub fn synthesis_loss_node(tape: &mut Tape<f32>, pred: Var, gt: Var) -> Var {
    tape.mean_abs_diff(pred, gt)
}

pub fn flow_loss_node(tape: &mut Tape<f32>, i0: Var, i1: Var, f01: Var, f10: Var) -> Var {
    let w1 = tape.warp(i1, f01);
    let w0 = tape.warp(i0, f10);
    let a = tape.mean_abs_diff(i0, w1);
    let b = tape.mean_abs_diff(i1, w0);
    tape.add(a, b)
}

/// Generator-side adversarial loss for one critic on a batch of fakes.
pub fn generator_adversarial_node(
    tape: &mut Tape<f32>,
    critic: &Discriminator,
    fake: Var,
    form: AdversarialForm,
    mode: NormMode,
) -> Var {
    let out = critic.forward(tape, fake, mode);
    match form {
        AdversarialForm::Difference => {
            let m = tape.mean(out.score);
            tape.scale(m, -1.0)
        }
        AdversarialForm::CrossEntropy => {
            let neg = tape.scale(out.logits, -1.0);
            let sp = tape.softplus(neg);
            tape.mean(sp)
        }
    }
}

/// Critic loss on a real and a fake batch, plus the batch statistics of both
/// passes (real first) for running-average updates.
pub fn critic_loss_node(
    tape: &mut Tape<f32>,
    critic: &Discriminator,
    real: Var,
    fake: Var,
    form: AdversarialForm,
) -> (Var, Vec<BatchStats<f32>>) {
    let r = critic.forward(tape, real, NormMode::Train);
    let f = critic.forward(tape, fake, NormMode::Train);
    let loss = match form {
        AdversarialForm::Difference => {
            let rm = tape.mean(r.score);
            let fm = tape.mean(f.score);
            tape.sub(fm, rm)
        }
        AdversarialForm::CrossEntropy => {
            let neg = tape.scale(r.logits, -1.0);
            let a = tape.softplus(neg);
            let a = tape.mean(a);
            let b = tape.softplus(f.logits);
            let b = tape.mean(b);
            tape.add(a, b)
        }
    };
    let mut stats = r.stats;
    stats.extend(f.stats);
    (loss, stats)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub synthesis: f64,
    pub flow: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            synthesis: 1.0,
            flow: 1.0,
            adversarial: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("synthesis", self.synthesis), ("flow", self.flow), ("adversarial", self.adversarial)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("loss weight `{name}` must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_syn: f64,
    pub l_flow: f64,
    pub l_adv_frame: f64,
    pub l_adv_edge: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_syn: f64,
    pub l_flow: f64,
    pub l_adv_frame: f64,
    pub l_adv_edge: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(parts: LossParts, weights: LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let mut total = weights.synthesis * parts.l_syn + weights.flow * parts.l_flow;
    if weights.adversarial != 0.0 {
        total += weights.adversarial * (parts.l_adv_frame + parts.l_adv_edge);
    }
    Ok(LossReport {
        l_syn: parts.l_syn,
        l_flow: parts.l_flow,
        l_adv_frame: parts.l_adv_frame,
        l_adv_edge: parts.l_adv_edge,
        total,
        weights,
    })
}

pub const PSNR_CAP: f64 = 100.0;
const PSNR_CAP_MSE: f64 = 1e-10;

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    check_same_dims("mse", a.dims(), b.dims())?;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum();
    Ok(total / a.data().len() as f64)
}

/// Peak signal-to-noise ratio for unit peak, capped at 100 dB.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_CAP_MSE {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian of the SSIM window.
pub fn ssim_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filtering over every position where the window fits.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, &c)| c * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, &c)| c * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), unit
/// dynamic range, averaged over window positions and then over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_same_dims("ssim", a.dims(), b.dims())?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = ssim_window();
    let mut acc = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, oh, ow) = filter_valid(&x, h, w, &g);
        let (my, ..) = filter_valid(&y, h, w, &g);
        let (sxx, ..) = filter_valid(&xx, h, w, &g);
        let (syy, ..) = filter_valid(&yy, h, w, &g);
        let (sxy, ..) = filter_valid(&xy, h, w, &g);
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            sum += ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2));
        }
        acc += sum / (oh * ow) as f64;
    }
    Ok(acc / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_loss_examples() {
        let a = Frame::filled(4, 4, 0.3);
        assert_eq!(synthesis_loss(&a, &a).unwrap(), 0.0);
        let b = Frame::filled(4, 4, 0.4);
        assert!((synthesis_loss(&b, &a).unwrap() - 0.1).abs() < 1e-6);
        let gt = Frame::from_fn(4, 4, |y, _| if y < 2 { [0.2; 3] } else { [0.4; 3] });
        assert!((synthesis_loss(&Frame::filled(4, 4, 0.0), &gt).unwrap() - 0.3).abs() < 1e-6);
    }

    #[test]
    fn psnr_examples() {
        let a = Frame::filled(2, 2, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr_from_mse(1.0), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(LossParts::default(), w).unwrap().total, 0.0);
        let parts = LossParts {
            l_syn: 0.5,
            l_flow: 0.3,
            l_adv_frame: 0.1,
            l_adv_edge: 0.1,
        };
        assert!((total_loss(parts, w).unwrap().total - 1.0).abs() < 1e-12);
        let neg = LossWeights { flow: -1.0, ..w };
        assert!(total_loss(parts, neg).is_err());
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Frame::filled(10, 20, 0.5);
        assert!(ssim(&a, &a).is_err());
    }
}
