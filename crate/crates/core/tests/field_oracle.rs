use candle_core::{DType, Device, Tensor, Var};
use mrf_core::field::{self, ops, DisplacementField, VelocityField};
use mrf_core::gradcheck::{self, Probe};
use mrf_core::synth::{self, DeformationRegime};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(state: &mut u64) -> f64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn uniform(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut s = seed;
    (0..n).map(|_| lo + (hi - lo) * splitmix(&mut s)).collect()
}

fn t4(v: Vec<f64>, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v, (1, c, h, w), &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Scalar bilinear sample with clamped (replicated) borders.
fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| img[r * w + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

fn warp_oracle(img: &[f64], field: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (field[y * w + x], field[h * w + y * w + x]);
            out.push(bilinear(img, h, w, y as f64 + dy, x as f64 + dx));
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn warp_matches_scalar_bilinear_oracle_on_fifty_cases() {
    for case in 0..50u64 {
        let img = uniform(case, 64, 0.0, 1.0);
        let fld = uniform(1000 + case, 128, -3.0, 3.0);
        let got = flat(&ops::warp(&t4(img.clone(), 1, 8, 8), &t4(fld.clone(), 2, 8, 8)).unwrap());
        let want = warp_oracle(&img, &fld, 8, 8);
        assert!(max_abs_diff(&got, &want) <= 1e-6, "case {case}");
    }
}

#[test]
fn upsampled_corner_matches_interpolation_oracle() {
    // half-pixel centers: fine index i samples coarse coordinate (i + 0.5) / 2 - 0.5
    let coarse = [0.0, 0.0, 0.0, 1.0];
    let mut v = coarse.to_vec();
    v.extend(coarse);
    let up = flat(&ops::upsample_field(&t4(v, 2, 2, 2), 2).unwrap());
    for y in 0..4 {
        for x in 0..4 {
            let src = |i: usize| ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
            let want = 2.0 * bilinear(&coarse, 2, 2, src(y), src(x));
            assert!((up[y * 4 + x] - want).abs() < 1e-12);
            assert!((up[16 + y * 4 + x] - want).abs() < 1e-12);
        }
    }
    assert!(ops::upsample_field(&t4(vec![0.0; 8], 2, 2, 2), 3).is_err());
}

#[test]
fn spatial_gradient_of_random_3x3() {
    let v = uniform(5, 9, -1.0, 1.0);
    let g = ops::spatial_gradient(&t4(v.clone(), 1, 3, 3)).unwrap();
    let (dx, dy) = (flat(&g.dx), flat(&g.dy));
    for y in 0..3 {
        for x in 0..3 {
            let ex = if x < 2 { v[y * 3 + x + 1] - v[y * 3 + x] } else { 0.0 };
            let ey = if y < 2 { v[(y + 1) * 3 + x] - v[y * 3 + x] } else { 0.0 };
            assert_eq!(dx[y * 3 + x], ex);
            assert_eq!(dy[y * 3 + x], ey);
        }
    }
}

#[test]
fn inverting_a_constant_velocity_negates_it() {
    let v = VelocityField::constant(2.0, 0.0, 12, 12).unwrap();
    let inv = field::invert_field(&v, 7).unwrap().to_vec_f64().unwrap();
    assert!(inv[..144].iter().all(|&d| (d + 2.0).abs() < 1e-5));
    assert!(inv[144..].iter().all(|&d| d.abs() < 1e-5));
    let zero = field::invert_field(&VelocityField::zeros(4, 4).unwrap(), 7).unwrap();
    assert!(zero.to_vec_f64().unwrap().iter().all(|&d| d == 0.0));
}

/// Slight-regime motion expressed as a velocity: the affine flow plus the elastic part.
fn slight_velocity(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (affine, elastic) = DeformationRegime::slight().sample(&mut rng);
    let flow = synth::affine_flow(size, size, &synth::affine_matrix(&affine)).unwrap();
    let el = synth::elastic_field(size, size, &elastic, &mut rng).unwrap();
    (flow.batched().unwrap() + el.batched().unwrap()).unwrap().to_dtype(DType::F64).unwrap()
}

#[test]
fn integration_is_inverse_consistent_on_slight_fields() {
    let size = 64;
    for seed in 0..5u64 {
        let v = slight_velocity(seed, size);
        let fwd = ops::integrate_velocity(&v, 7).unwrap();
        let bwd = ops::integrate_velocity(&v.neg().unwrap(), 7).unwrap();
        let residual = flat(&ops::compose(&fwd, &bwd).unwrap());
        let band = flat(&v).iter().fold(0.0f64, |m, d| m.max(d.abs())).ceil() as usize + 1;
        let (mut sum, mut n) = (0.0, 0.0);
        for y in band..size - band {
            for x in band..size - band {
                let i = y * size + x;
                sum += residual[i].hypot(residual[size * size + i]);
                n += 1.0;
            }
        }
        assert!(sum / n <= 0.1, "seed {seed}: {}", sum / n);
    }
}

#[test]
fn raw_field_files_carry_a_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    let f = DisplacementField::from_vec(uniform(9, 2 * 5 * 7, -4.0, 4.0).iter().map(|&v| v as f32).collect(), 5, 7)
        .unwrap();
    f.save_raw(&path).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("f.meta")).unwrap().trim(), "5 7 2");
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 5 * 7 * 2 * 4);
    // channel-last: the first two values are (dx, dy) of pixel (0, 0)
    let bytes = std::fs::read(&path).unwrap();
    let first = f32::from_le_bytes(bytes[4..8].try_into().unwrap());
    assert_eq!(first, f.to_vec_f64().unwrap()[35] as f32);
    let back = DisplacementField::load_raw(&path).unwrap();
    assert_eq!(back.to_vec_f64().unwrap(), f.to_vec_f64().unwrap());
}

fn weighted_sum(t: &Tensor, seed: u64) -> mrf_core::Result<Tensor> {
    let w = Tensor::from_vec(uniform(seed, t.elem_count(), -1.0, 1.0), t.shape(), &Device::Cpu)?;
    Ok((t * w)?.sum_all()?)
}

fn fractional(seed: u64, n: usize, span: f64) -> Vec<f64> {
    // keeps samples off the grid lines where bilinear weights have kinks
    uniform(seed, n, -span, span).into_iter().map(|d| d.trunc() + d.signum() * (0.2 + 0.6 * d.fract().abs())).collect()
}

#[test]
fn field_operations_pass_gradient_checks() {
    let var = |v: Vec<f64>, c: usize| Var::from_vec(v, (1, c, 6, 6), &Device::Cpu).unwrap();
    let img = var(uniform(1, 36, 0.0, 1.0), 1);
    let fld = var(fractional(2, 72, 1.5), 2);
    let r = gradcheck::check(&[img.clone(), fld.clone()], || weighted_sum(&ops::warp(&img, &fld)?, 3), 1e-4, Probe::All)
        .unwrap();
    assert!(r.relative_error <= 1e-4, "warp {r:?}");

    let small = Var::from_vec(uniform(4, 18, -1.0, 1.0), (1, 2, 3, 3), &Device::Cpu).unwrap();
    let r = gradcheck::check(&[small.clone()], || weighted_sum(&ops::upsample_field(&small, 2)?, 5), 1e-4, Probe::All)
        .unwrap();
    assert!(r.relative_error <= 1e-4, "upsample {r:?}");

    let f = var(fractional(6, 72, 1.5), 2);
    let g = var(fractional(7, 72, 1.5), 2);
    let r = gradcheck::check(&[f.clone(), g.clone()], || weighted_sum(&ops::compose(&f, &g)?, 8), 1e-4, Probe::All).unwrap();
    assert!(r.relative_error <= 1e-4, "compose {r:?}");

    let v = var(uniform(9, 72, -1.5, 1.5), 2);
    let r = gradcheck::check(&[v.clone()], || weighted_sum(&ops::integrate_velocity(&v, 7)?, 10), 1e-4, Probe::All).unwrap();
    assert!(r.relative_error <= 1e-4, "integrate {r:?}");

    let a = var(uniform(11, 72, -1.0, 1.0), 2);
    let r = gradcheck::check(
        &[a.clone()],
        || {
            let g = ops::spatial_gradient(&a)?;
            Ok((weighted_sum(&g.dx, 12)? + weighted_sum(&g.dy, 13)?)?)
        },
        1e-4,
        Probe::All,
    )
    .unwrap();
    assert!(r.relative_error <= 1e-4, "gradient {r:?}");
}

fn constant(dx: f64, dy: f64, h: usize, w: usize) -> Tensor {
    let mut v = vec![dx; h * w];
    v.extend(vec![dy; h * w]);
    t4(v, 2, h, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_field_warp_is_exact(seed in 0u64..10_000, h in 2usize..12, w in 2usize..12) {
        let img = t4(uniform(seed, h * w, 0.0, 1.0), 1, h, w);
        let out = ops::warp(&img, &constant(0.0, 0.0, h, w)).unwrap();
        prop_assert_eq!(flat(&out), flat(&img));
    }

    #[test]
    fn warp_agrees_with_oracle(seed in 0u64..10_000) {
        let img = uniform(seed, 64, 0.0, 1.0);
        let fld = uniform(seed ^ 0xABCD, 128, -10.0, 10.0);
        let got = flat(&ops::warp(&t4(img.clone(), 1, 8, 8), &t4(fld.clone(), 2, 8, 8)).unwrap());
        prop_assert!(max_abs_diff(&got, &warp_oracle(&img, &fld, 8, 8)) <= 1e-6);
    }

    #[test]
    fn upsampling_scales_constant_fields(dx in -5.0f64..5.0, dy in -5.0f64..5.0, log in 0u32..4) {
        let factor = 1usize << log;
        let up = flat(&ops::upsample_field(&constant(dx, dy, 3, 5), factor).unwrap());
        let n = 15 * factor * factor;
        prop_assert_eq!(up.len(), 2 * n);
        prop_assert!(up[..n].iter().all(|&v| (v - factor as f64 * dx).abs() < 1e-9));
        prop_assert!(up[n..].iter().all(|&v| (v - factor as f64 * dy).abs() < 1e-9));
    }

    #[test]
    fn constant_velocity_integrates_to_itself(dx in -3.0f64..3.0, dy in -3.0f64..3.0, steps in 1usize..9) {
        let (h, w) = (16, 16);
        let out = flat(&ops::integrate_velocity(&constant(dx, dy, h, w), steps).unwrap());
        let band = dx.abs().max(dy.abs()).ceil() as usize;
        for y in band..h - band {
            for x in band..w - band {
                prop_assert!((out[y * w + x] - dx).abs() < 1e-5);
                prop_assert!((out[h * w + y * w + x] - dy).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn composition_is_associative_on_constants(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0) {
        let (f, g, k) = (constant(a, b, 10, 10), constant(c, d, 10, 10), constant(b, -a, 10, 10));
        let left = flat(&ops::compose(&ops::compose(&f, &g).unwrap(), &k).unwrap());
        let right = flat(&ops::compose(&f, &ops::compose(&g, &k).unwrap()).unwrap());
        for y in 3..7 {
            for x in 3..7 {
                prop_assert!((left[y * 10 + x] - right[y * 10 + x]).abs() < 1e-6);
                prop_assert!((left[100 + y * 10 + x] - right[100 + y * 10 + x]).abs() < 1e-6);
            }
        }
    }
}
