use std::f64::consts::FRAC_PI_2;

use mrf_core::field::{self, ops};
use mrf_core::synth::{self, AffineParams, DeformationRegime, ElasticParams, ParamRange};
use mrf_core::Image;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dot_image(h: usize, w: usize, y: usize, x: usize) -> Image {
    let mut v = vec![0.0f32; h * w];
    v[y * w + x] = 1.0;
    Image::from_gray(v, h, w).unwrap()
}

/// Intensity-weighted centroid `(x, y)`.
fn centroid(img: &Image) -> (f64, f64) {
    let v = img.to_vec_f64().unwrap();
    let w = img.width();
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for (i, &p) in v.iter().enumerate() {
        sx += p * (i % w) as f64;
        sy += p * (i / w) as f64;
        s += p;
    }
    (sx / s, sy / s)
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    for regime in [DeformationRegime::slight(), DeformationRegime::severe()] {
        let src = synth::procedural_image(48, 64, &mut rng(1)).unwrap();
        let a = synth::synthesize_misaligned(&src, &regime, &mut rng(7)).unwrap();
        let b = synth::synthesize_misaligned(&src, &regime, &mut rng(7)).unwrap();
        assert_eq!(a.moving.to_vec().unwrap(), b.moving.to_vec().unwrap());
        assert_eq!(a.field.to_vec_f64().unwrap(), b.field.to_vec_f64().unwrap());
        assert_eq!((a.affine, a.elastic), (b.affine, b.elastic));
        let c = synth::synthesize_misaligned(&src, &regime, &mut rng(8)).unwrap();
        assert_ne!(a.moving.to_vec().unwrap(), c.moving.to_vec().unwrap());
    }
}

#[test]
fn ground_truth_field_reproduces_the_moving_image() {
    for (i, regime) in [DeformationRegime::slight(), DeformationRegime::moderate(), DeformationRegime::severe()]
        .into_iter()
        .enumerate()
    {
        for seed in 0..4u64 {
            let src = synth::procedural_image(64, 64, &mut rng(100 + seed)).unwrap();
            let m = synth::synthesize_misaligned(&src, &regime, &mut rng(seed * 31 + i as u64)).unwrap();
            let again = field::warp(&src, &m.field).unwrap().to_vec_f64().unwrap();
            let moving = m.moving.to_vec_f64().unwrap();
            let mae = again.iter().zip(&moving).map(|(a, b)| (a - b).abs()).sum::<f64>() / moving.len() as f64;
            assert!(mae <= 1e-3, "{} seed {seed}: {mae}", regime.name);
        }
    }
}

#[test]
fn sampled_parameters_stay_inside_published_ranges() {
    for regime in [DeformationRegime::slight(), DeformationRegime::moderate(), DeformationRegime::severe()] {
        let mut r = rng(42);
        for _ in 0..1000 {
            let (a, e) = regime.sample(&mut r);
            assert!(regime.contains(&a, &e), "{} {a:?} {e:?}", regime.name);
        }
    }
    let mut r = rng(3);
    for _ in 0..200 {
        let (a, e) = DeformationRegime::slight().sample(&mut r);
        assert_eq!(a.theta, 0.0);
        assert!(a.tx.abs() <= 0.01 && a.ty.abs() <= 0.01);
        assert_eq!(e.alpha, 1.0);
        let (a, _) = DeformationRegime::severe().sample(&mut r);
        assert!(a.theta.abs() <= 10f64.to_radians() + 1e-15);
        assert!((-0.02..=0.05).contains(&a.tx) && (-0.02..=0.05).contains(&a.ty));
        assert_eq!((a.cx, a.cy, a.sx, a.sy), (1.0, 1.0, 0.0, 0.0));
    }
}

#[test]
fn slight_translation_bound_moves_content_one_percent_of_half_width() {
    let (h, w) = (21, 200);
    let src = dot_image(h, w, 10, 100);
    let m = synth::affine_matrix(&AffineParams {
        tx: 0.01,
        ..AffineParams::identity()
    });
    let out = synth::warp_affine(&src, &m).unwrap();
    let (x0, y0) = centroid(&src);
    let (x1, y1) = centroid(&out);
    // output pixels sample the source 0.01 * W / 2 = 1 px to the right
    assert!((x0 - x1 - 1.0).abs() < 1e-6, "{x0} -> {x1}");
    assert!((y1 - y0).abs() < 1e-9);
}

#[test]
fn quarter_turn_moves_dot_to_hand_rotated_position() {
    let n = 8;
    let src = dot_image(n, n, 2, 5);
    let m = synth::affine_matrix(&AffineParams {
        theta: FRAC_PI_2,
        ..AffineParams::identity()
    });
    let out = synth::warp_affine(&src, &m).unwrap().to_vec_f64().unwrap();
    // the output at normalized (u, v) samples the source at (-v, u); source
    // pixel (5, 2) sits at (0.375, -0.375), so it appears at pixel (2, 2)
    let peak = out.iter().cloned().enumerate().fold((0, 0.0), |b, (i, p)| if p > b.1 { (i, p) } else { b });
    assert_eq!((peak.0 % n, peak.0 / n), (2, 2));
    assert!((peak.1 - 1.0).abs() < 1e-5);
}

fn mean_abs_gradient(f: &mrf_core::DisplacementField) -> f64 {
    let g = ops::spatial_gradient(&f.batched().unwrap()).unwrap();
    let sum = |t: &candle_core::Tensor| t.abs().unwrap().mean_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap();
    sum(&g.dx) + sum(&g.dy)
}

#[test]
fn wider_gaussian_gives_smoother_elastic_field() {
    // averaged over seeds: at a single seed the clamped border taps can
    // outweigh the extra smoothing
    let (mut narrow, mut wide) = (0.0, 0.0);
    for seed in 0..20u64 {
        let params = |sigma| ElasticParams { sigma, alpha: 1.0 };
        narrow += mean_abs_gradient(&synth::elastic_field(96, 96, &params(16.0), &mut rng(seed)).unwrap());
        wide += mean_abs_gradient(&synth::elastic_field(96, 96, &params(32.0), &mut rng(seed)).unwrap());
    }
    assert!(wide < narrow, "{wide} vs {narrow}");
}

#[test]
fn published_elastic_settings_stay_within_unit_displacement() {
    for seed in 0..5u64 {
        let f = synth::elastic_field(64, 80, &ElasticParams { sigma: 24.0, alpha: 1.0 }, &mut rng(seed)).unwrap();
        assert!(f.to_vec_f64().unwrap().iter().all(|d| d.abs() <= 1.0));
    }
}

#[test]
fn identity_regime_leaves_images_untouched() {
    let src = synth::procedural_image(32, 32, &mut rng(5)).unwrap();
    let m = synth::synthesize_misaligned(&src, &DeformationRegime::identity(), &mut rng(6)).unwrap();
    assert_eq!(m.moving.to_vec().unwrap(), src.to_vec().unwrap());
    assert!(m.field.to_vec_f64().unwrap().iter().all(|&d| d == 0.0));
}

#[test]
fn per_sample_seeds_follow_root_plus_index() {
    assert_eq!(synth::sample_seed(1000, 0), 1000);
    assert_eq!(synth::sample_seed(1000, 17), 1017);
    assert_eq!(synth::sample_seed(u64::MAX, 1), 0);
}

#[test]
fn regimes_resolve_by_name() {
    for name in ["slight", "moderate", "severe", "identity"] {
        assert_eq!(DeformationRegime::by_name(name).unwrap().name, name);
    }
    assert!(DeformationRegime::by_name("extreme").is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn range_samples_are_contained(lo in -5.0f64..5.0, span in 0.0f64..3.0, seed in 0u64..1000) {
        let r = ParamRange::new(lo, lo + span);
        let mut g = rng(seed);
        for _ in 0..50 {
            prop_assert!(r.contains(r.sample(&mut g)));
        }
    }

    #[test]
    fn dataset_generation_is_reproducible(seed in 0u64..10_000) {
        let src = synth::procedural_image(24, 24, &mut rng(seed)).unwrap();
        let regime = DeformationRegime::moderate();
        let a = synth::synthesize_misaligned(&src, &regime, &mut rng(synth::sample_seed(seed, 3))).unwrap();
        let b = synth::synthesize_misaligned(&src, &regime, &mut rng(synth::sample_seed(seed, 3))).unwrap();
        prop_assert_eq!(a.moving.to_vec().unwrap(), b.moving.to_vec().unwrap());
        prop_assert_eq!(a.field.to_vec_f64().unwrap(), b.field.to_vec_f64().unwrap());
    }
}
