use ea_interp::flow::FlowMap;
use ea_interp::imaging::Frame;
use ea_interp::models::{Discriminator, DiscriminatorKind, DEFAULT_LEAKY_SLOPE};
use ea_interp::objective::{
    adversarial_losses, critic_loss_node, flow_loss, mse, psnr, psnr_from_mse, ssim, ssim_window, synthesis_loss, total_loss,
    AdversarialForm, LossParts, LossWeights, PSNR_CAP,
};
use ea_tensor::{Adam, AdamConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
    Frame::new(h, w, (0..3 * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn frame_pair(h: usize, w: usize) -> impl Strategy<Value = (Frame, Frame)> {
    let f = move || prop::collection::vec(0.0f32..=1.0, 3 * h * w).prop_map(move |d| Frame::new(h, w, d).unwrap());
    (f(), f())
}

/// Applies one pixel permutation to every channel.
fn permute(f: &Frame, perm: &[usize]) -> Frame {
    let (h, w) = f.dims();
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for c in 0..3 {
        for (dst, &src) in perm.iter().enumerate() {
            data[c * plane + dst] = f.plane(c)[src];
        }
    }
    Frame::new(h, w, data).unwrap()
}

/// Direct 2-D windowed SSIM over valid positions, no separability.
fn ssim_reference(a: &Frame, b: &Frame) -> f64 {
    let g1 = ssim_window();
    let (h, w) = a.dims();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for c in 0..3 {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let mut sum = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = g1[i] * g1[j];
                        let p = pa[(y + i) * w + x + j] as f64;
                        let q = pb[(y + i) * w + x + j] as f64;
                        mx += g * p;
                        my += g * q;
                        sxx += g * p * p;
                        syy += g * q * q;
                        sxy += g * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_and_mse_ignore_pixel_order((a, b) in frame_pair(4, 5), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let (pa, pb) = (permute(&a, &perm), permute(&b, &perm));
        prop_assert!((synthesis_loss(&a, &b).unwrap() - synthesis_loss(&pa, &pb).unwrap()).abs() < 1e-12);
        prop_assert!((mse(&a, &b).unwrap() - mse(&pa, &pb).unwrap()).abs() < 1e-12);
        let z = FlowMap::zeros(4, 5);
        let lf = flow_loss(&a, &b, &z, &z).unwrap();
        prop_assert!((lf - flow_loss(&pa, &pb, &z, &z).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_measures((a, b) in frame_pair(12, 13)) {
        prop_assert_eq!(synthesis_loss(&a, &b).unwrap(), synthesis_loss(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_window((a, b) in frame_pair(14, 12)) {
        prop_assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_self_is_one((a, _) in frame_pair(16, 16)) {
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_adversarial_weight_drops_the_term(
        syn in 0.0f64..2.0, fl in 0.0f64..2.0, af in -1.0f64..1.0, ae in -1.0f64..1.0, ws in 0.0f64..3.0, wf in 0.0f64..3.0
    ) {
        let parts = LossParts { l_syn: syn, l_flow: fl, l_adv_frame: af, l_adv_edge: ae };
        let r = total_loss(parts, LossWeights { synthesis: ws, flow: wf, adversarial: 0.0 }).unwrap();
        prop_assert_eq!(r.total, ws * syn + wf * fl);
        let r = total_loss(parts, LossWeights { synthesis: ws, flow: wf, adversarial: 0.5 }).unwrap();
        prop_assert!((r.total - (ws * syn + wf * fl + 0.5 * (af + ae))).abs() < 1e-12);
    }
}

#[test]
fn synthesis_loss_examples() {
    let a = Frame::filled(4, 4, 0.3);
    assert_eq!(synthesis_loss(&a, &a).unwrap(), 0.0);
    let b = Frame::filled(4, 4, 0.4);
    assert!((synthesis_loss(&b, &a).unwrap() - 0.1).abs() < 1e-7);
    let gt = Frame::from_fn(4, 4, |y, _| if y < 2 { [0.2; 3] } else { [0.4; 3] });
    assert!((synthesis_loss(&Frame::filled(4, 4, 0.0), &gt).unwrap() - 0.3).abs() < 1e-7);
}

#[test]
fn flow_loss_examples() {
    let z = FlowMap::zeros(6, 6);
    let c = Frame::filled(6, 6, 0.7);
    assert_eq!(flow_loss(&c, &c, &z, &z).unwrap(), 0.0);
    let lower = Frame::filled(6, 6, 0.5);
    assert!((flow_loss(&c, &lower, &z, &z).unwrap() - 0.4).abs() < 1e-6);

    // I1 is I0 shifted right by one pixel; only the border columns differ.
    let i0 = Frame::from_fn(6, 8, |y, x| [((x * 3 + y) % 7) as f32 / 7.0, x as f32 / 8.0, 0.5]);
    let i1 = Frame::from_fn(6, 8, |y, x| {
        let sx = x.saturating_sub(1);
        [((sx * 3 + y) % 7) as f32 / 7.0, sx as f32 / 8.0, 0.5]
    });
    let f01 = FlowMap::constant(6, 8, 1.0, 0.0);
    let f10 = FlowMap::constant(6, 8, -1.0, 0.0);
    let interior = |f: &Frame| Frame::from_fn(6, 4, |y, x| [0, 1, 2].map(|c| f.get(c, y, x + 2)));
    let w1 = ea_interp::flow::backward_warp(&i1, &f01).unwrap();
    let w0 = ea_interp::flow::backward_warp(&i0, &f10).unwrap();
    let cut = |f: &Frame| Frame::from_fn(6, 4, |y, x| [0, 1, 2].map(|c| f.get(c, y, x + 1)));
    assert_eq!(synthesis_loss(&cut(&i0), &cut(&w1)).unwrap(), 0.0);
    assert_eq!(synthesis_loss(&interior(&i1), &interior(&w0)).unwrap(), 0.0);
}

#[test]
fn total_loss_examples() {
    let zero = total_loss(LossParts::default(), LossWeights::default()).unwrap();
    assert_eq!(zero.total, 0.0);
    let parts = LossParts { l_syn: 0.5, l_flow: 0.3, l_adv_frame: 0.1, l_adv_edge: 0.1 };
    assert!((total_loss(parts, LossWeights::default()).unwrap().total - 1.0).abs() < 1e-12);
    let bad = LossWeights { adversarial: -1.0, ..LossWeights::default() };
    assert!(total_loss(parts, bad).is_err());
}

#[test]
fn psnr_examples() {
    let a = Frame::filled(8, 8, 0.25);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert_eq!(psnr_from_mse(0.01), 20.0);
    assert_eq!(psnr_from_mse(1.0), 0.0);
    assert_eq!(psnr_from_mse(0.999e-10), PSNR_CAP);
    assert!(psnr_from_mse(1e-10) <= PSNR_CAP);
    assert!((psnr_from_mse(1e-10) - 100.0).abs() < 1e-9);
    assert!(psnr_from_mse(2e-10) < PSNR_CAP);
}

#[test]
fn psnr_falls_with_noise_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = Frame::from_fn(16, 16, |y, x| [0.3 + 0.02 * (x % 5) as f32, 0.5, 0.4 + 0.01 * y as f32]);
    let dirs: Vec<f32> = (0..3 * 256).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let noisy = |amp: f32| {
        Frame::new(16, 16, base.data().iter().zip(&dirs).map(|(&v, &d)| (v + amp * d).clamp(0.0, 1.0)).collect()).unwrap()
    };
    let scores: Vec<f64> = [0.01, 0.05, 0.1].iter().map(|&a| psnr(&base, &noisy(a)).unwrap()).collect();
    assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
}

#[test]
fn ssim_examples() {
    let (a, b) = (Frame::filled(16, 16, 0.25), Frame::filled(16, 16, 0.75));
    let c1 = 1e-4;
    let closed = (2.0 * 0.25 * 0.75 + c1) / (0.25f64 * 0.25 + 0.75 * 0.75 + c1);
    assert!((ssim(&a, &b).unwrap() - closed).abs() < 1e-6);
    assert!((closed - 0.6001).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_frame(&mut rng, 20, 24);
    let inv = Frame::new(20, 24, x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!((ssim(&x, &inv).unwrap() - ssim(&inv, &x).unwrap()).abs() < 1e-12);
    assert!(ssim(&Frame::filled(10, 20, 0.5), &Frame::filled(10, 20, 0.5)).is_err());
}

#[test]
fn adversarial_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let df = Discriminator::build(DiscriminatorKind::Frame, 8, DEFAULT_LEAKY_SLOPE, 1).unwrap();
    let de = Discriminator::build(DiscriminatorKind::Edge, 8, DEFAULT_LEAKY_SLOPE, 2).unwrap();
    let gt = random_frame(&mut rng, 64, 64);
    let same = adversarial_losses(&df, &de, &gt, &gt).unwrap();
    assert_eq!(same.frame_critic, 0.0);
    assert_eq!(same.edge_critic, 0.0);
    for _ in 0..4 {
        let pred = random_frame(&mut rng, 64, 64);
        let t = adversarial_losses(&df, &de, &pred, &gt).unwrap();
        for v in [t.generator / 2.0, t.frame_critic, t.edge_critic] {
            assert!(v.is_finite() && v > -1.0 && v < 1.0);
        }
    }
}

#[test]
fn one_critic_step_does_not_shrink_the_margin() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut critic = Discriminator::build(DiscriminatorKind::Frame, 8, DEFAULT_LEAKY_SLOPE, 3).unwrap();
    let batch = |rng: &mut ChaCha8Rng| {
        let frames: Vec<Tensor<f32>> = (0..2).map(|_| random_frame(rng, 64, 64).to_tensor()).collect();
        Tensor::stack(&frames.iter().collect::<Vec<_>>()).unwrap()
    };
    let (real, fake) = (batch(&mut rng), batch(&mut rng));
    let loss = |critic: &Discriminator| {
        let mut tape = Tape::new();
        let (r, f) = (tape.input(real.clone()), tape.input(fake.clone()));
        let (l, _) = critic_loss_node(&mut tape, critic, r, f, AdversarialForm::Difference);
        let value = tape.value(l).data()[0];
        let grads = tape.backward(l).for_store(critic.store());
        (value, grads)
    };
    let (before, grads) = loss(&critic);
    let mut adam = Adam::new(critic.store(), AdamConfig::default());
    adam.step(critic.store_mut(), &grads, 1e-4);
    let (after, _) = loss(&critic);
    // the loss is D(fake) − D(real), so the margin is its negation
    assert!(-after >= -before, "margin fell from {} to {}", -before, -after);
}
