//! Finite-difference checks of every differentiable tape operation in f64.

use ea_tensor::{finite_difference, he_uniform, ParamKind, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.input(weights.clone());
    let p = tape.mul(y, w);
    tape.mean(p)
}

fn check(name: &str, x: &Tensor<f64>, build: impl Fn(&mut Tape<f64>, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut probe = Tape::new();
    let xv = probe.input(x.clone());
    let probe_out = build(&mut probe, xv);
    let out_shape = probe.shape(probe_out);
    let weights = random(&mut rng, out_shape, -1.0, 1.0);

    let mut tape = Tape::new();
    let xv = tape.input_with_grad(x.clone());
    let y = build(&mut tape, xv);
    let loss = weighted_sum(&mut tape, y, &weights);
    let analytic = tape.backward(loss).wrt(xv).cloned().unwrap();

    let numeric = finite_difference(x, 1e-6, |p| {
        let mut t = Tape::new();
        let v = t.input(p.clone());
        let y = build(&mut t, v);
        let l = weighted_sum(&mut t, y, &weights);
        t.value(l).data()[0]
    });
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / (a.abs().max(n.abs()).max(1e-4));
        assert!(err < 1e-4, "{name}: element {i}: analytic {a} vs numeric {n}");
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, [2, 3, 4, 4], -1.0, 1.0);
    check("leaky_relu", &x, |t, v| t.leaky_relu(v, 0.1));
    check("sigmoid", &x, |t, v| t.sigmoid(v));
    check("softplus", &x, |t, v| t.softplus(v));
    check("affine", &x, |t, v| t.affine(v, -2.5, 0.3));
    check("scale_samples", &x, |t, v| t.scale_samples(v, &[0.25, -3.0]));
    check("clamp", &x, |t, v| t.clamp(v, -0.5, 0.5));
    check("mul", &x, |t, v| t.mul(v, v));
    check("sub", &x, |t, v| {
        let s = t.sigmoid(v);
        t.sub(v, s)
    });
    check("spatial_mean", &x, |t, v| t.spatial_mean(v));
    check("mean_abs_diff", &x, |t, v| {
        let z = t.input(Tensor::full([2, 3, 4, 4], 0.05));
        t.mean_abs_diff(v, z)
    });
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, [2, 4, 6, 4], -1.0, 1.0);
    check("max_pool2", &x, |t, v| t.max_pool2(v));
    check("upsample2", &x, |t, v| t.upsample2(v));
    check("concat/slice", &x, |t, v| {
        let a = t.slice(v, 1, 2);
        let b = t.slice(v, 0, 3);
        t.concat(&[a, b, v])
    });
    check("mul_channel", &x, |t, v| {
        let m = t.slice(v, 3, 1);
        t.mul_channel(v, m)
    });
}

#[test]
fn convolution_and_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, [2, 3, 8, 8], -1.0, 1.0);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", he_uniform(&mut rng, [4, 3, 3, 3], 27), ParamKind::Trainable);
    let b = store.add("b", random(&mut rng, [1, 4, 1, 1], -0.1, 0.1), ParamKind::Trainable);
    let w2 = store.add("w2", he_uniform(&mut rng, [2, 3, 4, 4], 48), ParamKind::Trainable);
    let gamma = store.add("g", random(&mut rng, [1, 4, 1, 1], 0.5, 1.5), ParamKind::Trainable);
    let beta = store.add("be", random(&mut rng, [1, 4, 1, 1], -0.5, 0.5), ParamKind::Trainable);

    check("conv3x3", &x, |t, v| {
        let (w, b) = (t.param(&store, w), t.param(&store, b));
        t.conv2d(v, w, Some(b), 1, 1)
    });
    check("conv4x4s2", &x, |t, v| {
        let w = t.param(&store, w2);
        t.conv2d(v, w, None, 2, 1)
    });
    check("batch_norm_train", &x, |t, v| {
        let (w, g, be) = (t.param(&store, w), t.param(&store, gamma), t.param(&store, beta));
        let y = t.conv2d(v, w, None, 1, 1);
        t.batch_norm_train(y, g, be, 1e-5).0
    });
    check("batch_norm_eval", &x, |t, v| {
        let (w, g, be) = (t.param(&store, w), t.param(&store, gamma), t.param(&store, beta));
        let y = t.conv2d(v, w, None, 1, 1);
        t.batch_norm_eval(y, g, be, &[0.1, -0.2, 0.0, 0.3], &[1.0, 0.5, 2.0, 0.1], 1e-5)
    });

    // parameter gradients routed through the store
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let wv = tape.param(&store, w);
    let bv = tape.param(&store, b);
    let y = tape.conv2d(xv, wv, Some(bv), 1, 1);
    let loss = tape.mean(y);
    let grads = tape.backward(loss).for_store(&store);
    let numeric = finite_difference(store.get(w), 1e-6, |p| {
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let wv = t.input(p.clone());
        let bv = t.param(&store, b);
        let y = t.conv2d(xv, wv, Some(bv), 1, 1);
        let l = t.mean(y);
        t.value(l).data()[0]
    });
    let analytic = grads[w.index()].as_ref().unwrap();
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        assert!((a - n).abs() < 1e-7);
    }
    assert!(grads[gamma.index()].is_none());
}

#[test]
fn frozen_store_yields_no_param_grads_but_passes_input_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", he_uniform(&mut rng, [2, 1, 3, 3], 9), ParamKind::Trainable);
    let mut tape = Tape::new();
    tape.freeze(&store);
    let x = tape.input_with_grad(random(&mut rng, [1, 1, 5, 5], -1.0, 1.0));
    let wv = tape.param(&store, w);
    let y = tape.conv2d(x, wv, None, 1, 1);
    let l = tape.mean(y);
    let g = tape.backward(l);
    assert!(g.for_store(&store)[0].is_none());
    assert!(g.wrt(x).is_some());
}

#[test]
fn warp_gradients_away_from_gridlines() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let src = random(&mut rng, [1, 3, 8, 8], 0.0, 1.0);
        let mut flow = random(&mut rng, [1, 2, 8, 8], -2.5, 2.5);
        // keep sample points off integer gridlines and inside the image
        for y in 0..8 {
            for x in 0..8 {
                for (c, p) in [(0, x), (1, y)] {
                    let mut s = p as f64 + flow.at(0, c, y, x);
                    s = s.clamp(0.3, 6.7);
                    if (s - s.round()).abs() < 0.05 {
                        s += 0.1;
                    }
                    flow.set(0, c, y, x, s - p as f64);
                }
            }
        }
        let flow_c = flow.clone();
        check("warp wrt source", &src, move |t, v| {
            let f = t.input(flow_c.clone());
            t.warp(v, f)
        });
        let src_c = src.clone();
        check("warp wrt flow", &flow, move |t, v| {
            let s = t.input(src_c.clone());
            t.warp(s, v)
        });
    }
}

#[test]
fn soft_edge_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, [2, 3, 8, 8], 0.0, 1.0);
    check("soft_edges", &x, |t, v| t.soft_edges(v));
}
