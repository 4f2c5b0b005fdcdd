use ea_interp::imaging::{canny_edges, load_image, quantize, save_edge_map, save_image, soft_edges, CannyParams, EdgeMap, Frame};
use ea_interp::Error;
use proptest::prelude::*;

fn rect_pattern(h: usize, w: usize, rects: &[(usize, usize, usize, usize, f32)], dy: usize, dx: usize) -> Frame {
    Frame::from_fn(h, w, |y, x| {
        let mut v = 0.3;
        for &(top, left, rh, rw, level) in rects {
            if y >= top + dy && y < top + dy + rh && x >= left + dx && x < left + dx + rw {
                v = level;
            }
        }
        [v, v * 0.5, 1.0 - v]
    })
}

fn rects() -> impl Strategy<Value = Vec<(usize, usize, usize, usize, f32)>> {
    prop::collection::vec((14usize..26, 14usize..26, 3usize..10, 3usize..10, 0.0f32..1.0), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn canny_output_is_binary(rs in rects(), sigma in 0.6f64..2.0) {
        let f = rect_pattern(48, 48, &rs, 0, 0);
        let e = canny_edges(&f, CannyParams { sigma, ..CannyParams::default() }).unwrap();
        prop_assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(e.dims(), f.dims());
    }

    #[test]
    fn soft_edges_lie_in_unit_interval(data in prop::collection::vec(0.0f32..=1.0, 3 * 12 * 9)) {
        let f = Frame::new(12, 9, data).unwrap();
        let e = soft_edges(&f);
        prop_assert!(e.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn canny_is_translation_equivariant(rs in rects(), dy in 0usize..5, dx in 0usize..5) {
        let (h, w) = (56, 56);
        let a = canny_edges(&rect_pattern(h, w, &rs, 0, 0), CannyParams::default()).unwrap();
        let b = canny_edges(&rect_pattern(h, w, &rs, dy, dx), CannyParams::default()).unwrap();
        for y in 6..h - 12 {
            for x in 6..w - 12 {
                prop_assert_eq!(a.get(y, x), b.get(y + dy, x + dx), "at ({}, {})", y, x);
            }
        }
    }

    #[test]
    fn png_round_trip_within_half_step(f in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f32..=1.0, 3 * h * w).prop_map(move |d| Frame::new(h, w, d).unwrap())
    })) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        save_image(&f, &p).unwrap();
        let g = load_image(&p).unwrap();
        let err = f.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(err <= 1.0 / 510.0 + 1e-6, "error {}", err);
    }
}

#[test]
fn eight_bit_values_scale_by_255() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("px.png");
    image::save_buffer(&p, &[255, 0, 128], 1, 1, image::ExtendedColorType::Rgb8).unwrap();
    let f = load_image(&p).unwrap();
    assert_eq!(f.get(0, 0, 0), 1.0);
    assert_eq!(f.get(1, 0, 0), 0.0);
    assert!((f.get(2, 0, 0) - 0.50196).abs() < 1e-5);
}

#[test]
fn sixteen_bit_and_gray_sources() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g16.png");
    let raw: Vec<u8> = [65535u16, 0].iter().flat_map(|v| v.to_ne_bytes()).collect();
    image::save_buffer(&p, &raw, 2, 1, image::ExtendedColorType::L16).unwrap();
    let f = load_image(&p).unwrap();
    for c in 0..3 {
        assert_eq!(f.get(c, 0, 0), 1.0);
        assert_eq!(f.get(c, 0, 1), 0.0);
    }
}

#[test]
fn reads_binary_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ppm");
    let mut bytes = b"P6\n2 1\n255\n".to_vec();
    bytes.extend([255, 0, 0, 0, 51, 255]);
    std::fs::write(&p, bytes).unwrap();
    let f = load_image(&p).unwrap();
    assert_eq!(f.dims(), (1, 2));
    assert_eq!(f.get(0, 0, 0), 1.0);
    assert!((f.get(1, 0, 1) - 0.2).abs() < 1e-6);
}

#[test]
fn load_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let e = load_image(&missing).unwrap_err();
    assert!(matches!(e, Error::Missing(_)));
    assert!(e.to_string().contains("nope.png"));

    let gif = dir.path().join("x.gif");
    std::fs::write(&gif, b"GIF89a\x01\x00\x01\x00\x00\x00\x00;").unwrap();
    let e = load_image(&gif).unwrap_err();
    assert!(matches!(e, Error::UnsupportedFormat(..)), "{e}");
    assert!(e.to_string().contains("x.gif"));

    let bad = dir.path().join("bad.png");
    std::fs::write(&bad, b"\x89PNG\r\n\x1a\n garbage").unwrap();
    let e = load_image(&bad).unwrap_err();
    assert!(matches!(e, Error::Corrupt(..)), "{e}");
    assert!(e.to_string().contains("bad.png"));
}

#[test]
fn saved_bytes_follow_rounding_rule() {
    assert_eq!(quantize(1.0), 255);
    assert_eq!(quantize(0.5), 128);
    assert_eq!(quantize(0.0), 0);
    assert_eq!(quantize(1.7), 255);
    assert_eq!(quantize(-0.2), 0);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("half.png");
    save_image(&Frame::filled(1, 1, 0.5), &p).unwrap();
    let img = image::open(&p).unwrap().into_rgb8();
    assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128]);
}

#[test]
fn edge_maps_save_as_gray() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.png");
    save_edge_map(&EdgeMap::new(1, 2, vec![0.0, 1.0]).unwrap(), &p).unwrap();
    let img = image::open(&p).unwrap();
    assert_eq!(img.color(), image::ColorType::L8);
    assert_eq!(img.into_luma8().into_raw(), vec![0, 255]);
}

#[test]
fn unwritable_path_is_reported() {
    let e = save_image(&Frame::filled(2, 2, 0.1), "/nonexistent-dir/x.png").unwrap_err();
    assert!(matches!(e, Error::Write(..)));
}
