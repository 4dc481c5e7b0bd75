mod common;

use common::{brute_force_render, gradient_check, random_scene, test_camera};
use dentoforge::gsplat::{render_scene, ParamGroup, Rasterizer};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiled_matches_brute_force(seed in any::<u64>(), n in 1usize..=64, w in 8usize..48, h in 8usize..48) {
        let scene = random_scene(seed, n);
        let mut cam = test_camera(32);
        cam.width = w;
        cam.height = h;
        cam.cx = w as f64 / 2.0;
        cam.cy = h as f64 / 2.0;
        let bg = Vector3::new(1.0, 1.0, 1.0);
        let frame = render_scene(&scene, &cam, bg).unwrap();
        let (img, trans) = brute_force_render(&scene, &cam, bg);
        prop_assert!(max_diff(&frame.image.data, &img.data) < 1e-5);
        prop_assert!(max_diff(&frame.transmittance, &trans) < 1e-9);
    }

    #[test]
    fn weights_partition_unity(seed in any::<u64>(), n in 1usize..=64) {
        let scene = random_scene(seed, n);
        let cam = test_camera(32);
        let frame = render_scene(&scene, &cam, Vector3::zeros()).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let s: f64 = frame.contributions(x, y).iter().map(|c| c.weight).sum();
                prop_assert!((s + frame.transmittance[y * 32 + x] - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn input_order_does_not_change_image() {
    for seed in 0..10 {
        let scene = random_scene(seed, 40);
        let cam = test_camera(32);
        let a = render_scene(&scene, &cam, Vector3::zeros()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = scene.clone();
        shuffled.teeth.reverse();
        for t in &mut shuffled.teeth {
            for i in (1..t.gaussians.len()).rev() {
                let j = rng.random_range(0..=i);
                t.gaussians.swap(i, j);
            }
        }
        let b = render_scene(&shuffled, &cam, Vector3::zeros()).unwrap();
        assert!(max_diff(&a.image.data, &b.image.data) < 1e-6);
    }
}

#[test]
fn repeated_renders_are_bit_identical() {
    let scene = random_scene(9, 64);
    let cam = test_camera(48);
    let r = Rasterizer::new(cam, Vector3::new(0.2, 0.3, 0.4)).unwrap();
    let a = r.render(&scene.refs()).unwrap();
    let b = r.render(&scene.refs()).unwrap();
    assert_eq!(a.image, b.image);
    let d: Vec<f64> = (0..a.image.data.len()).map(|i| (i as f64 * 0.37).sin()).collect();
    assert_eq!(a.backward(&scene.refs(), &d).unwrap(), b.backward(&scene.refs(), &d).unwrap());
}

#[test]
fn rendering_gradients_match_finite_differences() {
    for seed in 0..10 {
        let errs = gradient_check(seed);
        for (k, e) in errs.iter().enumerate() {
            assert!(*e < 1e-3, "seed {seed} group {}: rel err {e}", ParamGroup::ALL[k].name());
        }
    }
}
