use ea_interp::flow::{
    backward_warp, flow_to_color, intermediate_flows, naive_synthesize, read_flo, write_flo, FlowMap, IntermediateForm,
    SynthesisSide, TimePoint,
};
use ea_interp::imaging::Frame;
use ea_interp::Error;
use proptest::prelude::*;

fn flow(h: usize, w: usize) -> impl Strategy<Value = FlowMap> {
    prop::collection::vec(-30.0f32..30.0, 2 * h * w).prop_map(move |d| FlowMap::new(h, w, d).unwrap())
}

fn frame(h: usize, w: usize) -> impl Strategy<Value = Frame> {
    prop::collection::vec(0.0f32..=1.0, 3 * h * w).prop_map(move |d| Frame::new(h, w, d).unwrap())
}

/// Hue in degrees of an RGB color.
fn hue(c: [f32; 3]) -> f32 {
    let (r, g, b) = (c[0], c[1], c[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if max == r {
        60.0 * ((g - b) / d)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    h.rem_euclid(360.0)
}

proptest! {
    #[test]
    fn forward_form_scales_exactly(f01 in flow(4, 6), f10 in flow(4, 6), t in 0.0f32..=1.0) {
        let (ft0, ft1) = intermediate_flows(&f01, &f10, TimePoint::new(t).unwrap(), IntermediateForm::Forward).unwrap();
        for i in 0..f01.data().len() {
            prop_assert_eq!(ft0.data()[i], -t * f01.data()[i]);
            prop_assert_eq!(ft1.data()[i], (1.0 - t) * f01.data()[i]);
        }
    }

    #[test]
    fn forms_agree_for_antisymmetric_flows(f01 in flow(4, 6), t in 0.0f32..=1.0) {
        let f10 = f01.scaled(-1.0);
        let tp = TimePoint::new(t).unwrap();
        let (a0, a1) = intermediate_flows(&f01, &f10, tp, IntermediateForm::Forward).unwrap();
        let (s0, s1) = intermediate_flows(&f01, &f10, tp, IntermediateForm::Symmetric).unwrap();
        for i in 0..f01.data().len() {
            prop_assert!((a0.data()[i] - s0.data()[i]).abs() <= 1e-5 * (1.0 + a0.data()[i].abs()));
            prop_assert!((a1.data()[i] - s1.data()[i]).abs() <= 1e-5 * (1.0 + a1.data()[i].abs()));
        }
    }

    #[test]
    fn zero_flow_warp_is_bit_exact(src in frame(5, 7)) {
        prop_assert_eq!(backward_warp(&src, &FlowMap::zeros(5, 7)).unwrap(), src);
    }

    #[test]
    fn integer_shift_matches_index_oracle(src in frame(6, 8), du in -3i32..=3, dv in -3i32..=3) {
        let out = backward_warp(&src, &FlowMap::constant(6, 8, du as f32, dv as f32)).unwrap();
        for c in 0..3 {
            for y in 0..6i32 {
                for x in 0..8i32 {
                    let sy = (y + dv).clamp(0, 5) as usize;
                    let sx = (x + du).clamp(0, 7) as usize;
                    prop_assert_eq!(out.get(c, y as usize, x as usize), src.get(c, sy, sx));
                }
            }
        }
    }

    #[test]
    fn flo_round_trip_is_bitwise(f in flow(5, 7)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.flo");
        write_flo(&f, &p).unwrap();
        let g = read_flo(&p).unwrap();
        prop_assert_eq!(g.dims(), f.dims());
        for (a, b) in f.data().iter().zip(g.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn substitution_example() {
    let f01 = FlowMap::constant(3, 3, 8.0, 0.0);
    let f10 = FlowMap::constant(3, 3, -8.0, 0.0);
    let t = TimePoint::new(0.25).unwrap();
    for form in [IntermediateForm::Forward, IntermediateForm::Symmetric] {
        let (ft0, ft1) = intermediate_flows(&f01, &f10, t, form).unwrap();
        assert_eq!(ft0.at(1, 1), (-2.0, 0.0), "{form:?}");
        assert_eq!(ft1.at(1, 1), (6.0, 0.0), "{form:?}");
    }
}

#[test]
fn endpoints_give_zero_flows() {
    let f01 = FlowMap::constant(2, 2, 3.0, -1.5);
    let f10 = FlowMap::constant(2, 2, -2.0, 1.0);
    for form in [IntermediateForm::Forward, IntermediateForm::Symmetric] {
        let (ft0, _) = intermediate_flows(&f01, &f10, TimePoint::new(0.0).unwrap(), form).unwrap();
        assert!(ft0.data().iter().all(|&v| v == 0.0));
        let (_, ft1) = intermediate_flows(&f01, &f10, TimePoint::new(1.0).unwrap(), form).unwrap();
        assert!(ft1.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn time_outside_unit_interval_is_rejected() {
    assert!(TimePoint::new(-0.01).is_err());
    assert!(TimePoint::new(1.5).is_err());
    assert!(TimePoint::new(f32::NAN).is_err());
}

#[test]
fn naive_synthesis_cases() {
    let i0 = Frame::from_fn(4, 4, |y, x| [x as f32 / 4.0, y as f32 / 4.0, 0.3]);
    let i1 = Frame::from_fn(4, 4, |y, _| [0.9, 0.1, y as f32 / 8.0]);
    let f01 = FlowMap::constant(4, 4, 1.3, -0.7);
    let f10 = FlowMap::constant(4, 4, -0.4, 2.1);
    let form = IntermediateForm::default();
    let zero = TimePoint::new(0.0).unwrap();
    let one = TimePoint::new(1.0).unwrap();
    assert_eq!(naive_synthesize(&i0, &i1, &f01, &f10, zero, SynthesisSide::From0, form).unwrap(), i0);
    assert_eq!(naive_synthesize(&i0, &i1, &f01, &f10, one, SynthesisSide::From1, form).unwrap(), i1);
    let z = FlowMap::zeros(4, 4);
    assert_eq!(naive_synthesize(&i0, &i0, &z, &z, TimePoint::MIDDLE, SynthesisSide::Mean, form).unwrap(), i0);
}

#[test]
fn flo_byte_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.flo");
    write_flo(&FlowMap::zeros(1, 1), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(bytes.len(), 20);
    assert_eq!(&bytes[..4], b"PIEH");
    assert_eq!(f32::from_le_bytes(bytes[..4].try_into().unwrap()), 202021.25);

    let p = dir.path().join("wide.flo");
    let mut f = FlowMap::zeros(2, 3);
    f.set(1, 2, 0.5, -0.25);
    write_flo(&f, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
    assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    let last = &bytes[bytes.len() - 8..];
    assert_eq!(f32::from_le_bytes(last[..4].try_into().unwrap()), 0.5);
    assert_eq!(f32::from_le_bytes(last[4..].try_into().unwrap()), -0.25);
}

#[test]
fn flo_read_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.flo");
    std::fs::write(&p, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    assert!(matches!(read_flo(&p), Err(Error::BadFloMagic(..))));
    let p = dir.path().join("short.flo");
    std::fs::write(&p, b"PIEH\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00").unwrap();
    assert!(matches!(read_flo(&p), Err(Error::TruncatedFlo(..))));
}

#[test]
fn color_coding() {
    let white = flow_to_color(&FlowMap::zeros(3, 3), None);
    assert!(white.data().iter().all(|&v| v == 1.0));

    let px = |f: &Frame| [f.get(0, 0, 0), f.get(1, 0, 0), f.get(2, 0, 0)];
    for (u, v) in [(1.0, 0.0), (0.0, 1.0), (0.7, -0.7), (0.3, 0.9)] {
        let a = px(&flow_to_color(&FlowMap::constant(1, 1, u, v), None));
        let b = px(&flow_to_color(&FlowMap::constant(1, 1, -u, -v), None));
        let d = (hue(a) - hue(b)).rem_euclid(360.0);
        assert!((d - 180.0).abs() <= 30.0, "({u}, {v}): hue gap {d}");
    }

    let at_max = flow_to_color(&FlowMap::constant(1, 1, 2.0, 1.0), Some(5f32.sqrt()));
    let beyond = flow_to_color(&FlowMap::constant(1, 1, 6.0, 3.0), Some(5f32.sqrt()));
    for (a, b) in at_max.data().iter().zip(beyond.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}
