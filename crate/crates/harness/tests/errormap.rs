use mrf_core::Image;
use mrf_harness::errormap::{error_map, hot, write_error_map};

fn ramp(h: usize, w: usize, k: f32) -> Image {
    Image::from_gray((0..h * w).map(|i| (i as f32 * k).sin() * 0.4 + 0.5).collect(), h, w).unwrap()
}

#[test]
fn identical_images_give_a_black_map() {
    let a = ramp(9, 13, 0.37);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.png");
    let map = write_error_map(&a, &a, &out).unwrap();
    assert!(map.iter().all(|&t| t == 0.0));
    let rgb = image::open(&out).unwrap().to_rgb8();
    assert_eq!(rgb.dimensions(), (13, 9));
    assert!(rgb.pixels().all(|p| p.0 == [0, 0, 0]));
}

#[test]
fn single_differing_pixel_is_the_only_hot_one() {
    let a = ramp(8, 8, 0.21);
    let mut v = a.to_vec().unwrap();
    v[3 * 8 + 5] += 0.1;
    let b = Image::from_gray(v, 8, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.png");
    write_error_map(&a, &b, &out).unwrap();
    let rgb = image::open(&out).unwrap().to_rgb8();
    for (x, y, p) in rgb.enumerate_pixels() {
        let want = if (x, y) == (5, 3) { [255, 255, 255] } else { [0, 0, 0] };
        assert_eq!(p.0, want, "pixel ({x}, {y})");
    }
}

#[test]
fn map_matches_normalized_absolute_difference() {
    let a = ramp(7, 11, 0.5);
    let b = ramp(7, 11, 0.9);
    let map = error_map(&a, &b).unwrap();
    let (va, vb) = (a.to_vec_f64().unwrap(), b.to_vec_f64().unwrap());
    let diff: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).collect();
    let lo = diff.iter().cloned().fold(f64::MAX, f64::min);
    let hi = diff.iter().cloned().fold(f64::MIN, f64::max);
    for (m, d) in map.iter().zip(&diff) {
        assert!((m - (d - lo) / (hi - lo)).abs() < 1e-12);
    }
}

#[test]
fn hot_colormap_anchor_points() {
    assert_eq!(hot(0.0), [0, 0, 0]);
    assert_eq!(hot(1.0 / 3.0), [255, 0, 0]);
    assert_eq!(hot(2.0 / 3.0), [255, 255, 0]);
    assert_eq!(hot(1.0), [255, 255, 255]);
    assert_eq!(hot(-1.0), [0, 0, 0]);
    assert_eq!(hot(2.0), [255, 255, 255]);
}

#[test]
fn size_mismatch_is_a_data_error() {
    let e = error_map(&ramp(4, 4, 0.1), &ramp(4, 5, 0.1)).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}
