use std::collections::HashSet;

use oneshot_core::augment::{
    adjust_brightness, augment_pipeline, overlay_blurred_circles, rotate_center, AugmentConfig,
};
use oneshot_core::image::Image;
use oneshot_core::seed;
use proptest::prelude::*;
use rand::Rng;

fn random_image(h: usize, w: usize, c: usize, s: u64) -> Image {
    let mut rng = seed::rng(s);
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn max_diff(a: &Image, b: &Image) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn rotation_identities() {
    let img = random_image(9, 9, 1, 1);
    assert_eq!(rotate_center(&img, 0.0, 0.0), img);
    assert!(max_diff(&rotate_center(&img, 360.0, 0.0), &img) < 1e-6);
}

#[test]
fn quarter_turns_match_index_permutation() {
    for n in [8, 9] {
        let img = random_image(n, n, 2, n as u64);
        let r = rotate_center(&img, 90.0, 0.0);
        let mut expect = img.clone();
        for y in 0..n {
            for x in 0..n {
                for c in 0..2 {
                    // counter-clockwise: the right column becomes the top row
                    expect.set(y, x, c, img.get(x, n - 1 - y, c));
                }
            }
        }
        assert!(max_diff(&r, &expect) < 1e-6, "n = {n}");
        let r180 = rotate_center(&img, 180.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                assert!((r180.get(y, x, 0) - img.get(n - 1 - y, n - 1 - x, 0)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn rotation_fills_background() {
    let img = Image::filled(10, 20, 1, 1.0);
    let r = rotate_center(&img, 90.0, 0.25);
    assert_eq!(r.shape(), img.shape());
    assert_eq!(r.get(0, 0, 0), 0.25);
    assert_eq!(r.get(5, 10, 0), 1.0);
}

#[test]
fn brightness_examples() {
    let img = random_image(4, 4, 1, 2);
    assert_eq!(adjust_brightness(&img, 0.0), img);
    assert!(adjust_brightness(&img, 1.0).data().iter().all(|&v| v == 1.0));
    let half = Image::filled(3, 3, 1, 0.5);
    assert!(adjust_brightness(&half, -0.3).data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
}

#[test]
fn circle_examples() {
    let img = Image::filled(16, 16, 1, 0.3);
    let (same, none) = overlay_blurred_circles(&img, 0, (2.0, 3.0), (0.2, 0.4), 1.0, 5);
    assert_eq!(same, img);
    assert!(none.is_empty());

    let (out, circles) = overlay_blurred_circles(&img, 1, (3.0, 3.0), (0.4, 0.4), 1.0, 6);
    let c = circles[0];
    let (y, x) = (c.y.floor() as usize, c.x.floor() as usize);
    assert!(out.get(y, x, 0) > img.get(y, x, 0));
    assert_eq!(out, overlay_blurred_circles(&img, 1, (3.0, 3.0), (0.4, 0.4), 1.0, 6).0);
}

#[test]
fn identity_pipeline_is_exact() {
    let img = random_image(12, 10, 1, 3);
    let cfg = AugmentConfig::identity();
    for i in 0..5 {
        assert_eq!(augment_pipeline(&img, &cfg, i).unwrap().0, img);
    }
}

#[test]
fn pipeline_determinism_and_diversity() {
    let img = random_image(12, 12, 1, 4);
    let cfg = AugmentConfig {
        seed: 17,
        ..Default::default()
    };
    let (a, rec) = augment_pipeline(&img, &cfg, 0).unwrap();
    assert_eq!(a, augment_pipeline(&img, &cfg, 0).unwrap().0);
    let sidecar = rec.to_sidecar("in/a.pgm");
    assert!(sidecar.starts_with("source = in/a.pgm\n"));
    assert!(sidecar.contains(&format!("seed = {}", rec.seed)));

    let mut seen = HashSet::new();
    for i in 0..1000 {
        let (out, _) = augment_pipeline(&img, &cfg, i).unwrap();
        seen.insert(out.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    assert!(seen.len() >= 999);
}

#[test]
fn invalid_config() {
    let cfg = AugmentConfig {
        circle_radius: (0.5, 2.0),
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
    let cfg = AugmentConfig {
        rotation: (5.0, -5.0),
        ..Default::default()
    };
    assert!(augment_pipeline(&Image::filled(4, 4, 1, 0.0), &cfg, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn pipeline_keeps_range_and_shape(
        s in 0u64..u64::MAX,
        rot in 0.0f64..180.0,
        br in 0.0f64..1.0,
        amp in 0.0f64..0.3,
        hi_circles in 0usize..4,
    ) {
        let img = random_image(8, 7, 1, s % 97);
        let cfg = AugmentConfig {
            rotation: (-rot, rot),
            brightness: (-br, br),
            circles: (0, hi_circles),
            circle_intensity: (-1.0, 1.0),
            contour_amplitude: amp,
            seed: s,
            ..Default::default()
        };
        let (out, _) = augment_pipeline(&img, &cfg, 0).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.in_unit_range());
    }
}
