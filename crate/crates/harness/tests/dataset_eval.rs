use std::path::Path;

use mrf_core::synth::DeformationRegime;
use mrf_core::{field, Image};
use mrf_harness::config::{Modality, RunConfig};
use mrf_harness::dataset::{self, DatasetManifest};
use mrf_harness::eval::{self, MISALIGNED, REGISTERED};
use mrf_harness::model::Model;

fn tiny(regime: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "reg.levels = 1\nreg.widths = 2,4\nreg.dff_hidden = 2\nreg.reduction = 2\n\
         tcf.channels = 4\ntcf.window = 4\ntcf.heads = 1\ntcf.reduction = 2\n\
         height = 48\nwidth = 48\ndata.count = 10\ndata.test_count = 3\nseed = 7",
    )
    .unwrap();
    cfg.regime = regime.into();
    cfg
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "moving", "fixed", "field_gt"] {
        let mut files: Vec<_> = std::fs::read_dir(root.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            out.push((f.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&f).unwrap()));
        }
    }
    out
}

#[test]
fn synthesis_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("slight");
    let a = dataset::synthesize(&cfg, &dir.path().join("a")).unwrap();
    let b = dataset::synthesize(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a.samples.len(), 10);
    assert_eq!((a.train.len(), a.test.len()), (7, 3));
    assert_eq!(a.samples, b.samples);
    let (ta, tb) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert_eq!(ta.len(), 1 + 1 + 10 * 4);
    assert_eq!(ta, tb);
}

#[test]
fn identity_regime_gives_moving_equal_to_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset::synthesize(&tiny("identity"), dir.path()).unwrap();
    for p in m.pairs(&m.train).unwrap() {
        assert_eq!(p.moving.to_vec().unwrap(), p.fixed.to_vec().unwrap());
    }
    let gt = m.ground_truth(&m.test[0]).unwrap();
    assert!(gt.to_vec_f64().unwrap().iter().all(|&d| d == 0.0));
}

#[test]
fn ground_truth_field_reproduces_moving() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset::synthesize(&tiny("severe"), dir.path()).unwrap();
    for name in &m.test {
        let p = &m.pairs(std::slice::from_ref(name)).unwrap()[0];
        let warped = field::warp(&p.fixed, &m.ground_truth(name).unwrap()).unwrap();
        let (a, b) = (warped.to_vec_f64().unwrap(), p.moving.to_vec_f64().unwrap());
        let mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        // png16 quantization on both sides, plus compounded interpolation
        assert!(mae <= 1e-3, "{name}: {mae}");
    }
}

#[test]
fn inverted_modality_flips_the_fixed_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny("identity");
    cfg.data.modality = Modality::Inverted;
    let m = dataset::synthesize(&cfg, dir.path()).unwrap();
    let p = &m.pairs(&m.test).unwrap()[0];
    for (f, mv) in p.fixed.to_vec().unwrap().iter().zip(p.moving.to_vec().unwrap()) {
        assert!((f + mv - 1.0).abs() < 1e-4);
    }
}

#[test]
fn source_directory_images_are_center_cropped() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir_all(&src).unwrap();
    let (h, w) = (60, 70);
    let img = Image::from_gray((0..h * w).map(|i| ((i % w) as f32) / w as f32).collect(), h, w).unwrap();
    img.save_png16(src.join("a.png")).unwrap();
    let mut cfg = tiny("identity");
    cfg.data.source = Some(src);
    let m = dataset::synthesize(&cfg, &dir.path().join("out")).unwrap();
    let p = &m.pairs(&m.train[..1]).unwrap()[0];
    assert_eq!(p.fixed.dims(), (1, 48, 48));
    let v = p.fixed.to_vec().unwrap();
    // columns 11..59 of the source
    assert!((v[0] - 11.0 / 70.0).abs() < 1e-4);
    assert!((v[47] - 58.0 / 70.0).abs() < 1e-4);
}

#[test]
fn manifest_load_rejects_missing_and_inconsistent_data() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(DatasetManifest::load(&dir.path().join("none")).unwrap_err().exit_code(), 3);

    let root = dir.path().join("d");
    let m = dataset::synthesize(&tiny("slight"), &root).unwrap();
    assert_eq!(DatasetManifest::load(&root).unwrap(), DatasetManifest::load(&root.join("manifest.json")).unwrap());
    std::fs::remove_file(root.join(&m.samples[4].fixed)).unwrap();
    assert_eq!(DatasetManifest::load(&root).unwrap_err().exit_code(), 3);

    let root = dir.path().join("e");
    let m = dataset::synthesize(&tiny("slight"), &root).unwrap();
    Image::constant(0.5, 40, 48).unwrap().save_png16(root.join(&m.samples[0].moving)).unwrap();
    let m = DatasetManifest::load(&root).unwrap();
    assert_eq!(m.pairs(&m.train).unwrap_err().exit_code(), 3);

    std::fs::write(root.join("manifest.json"), "{ not json").unwrap();
    assert_eq!(DatasetManifest::load(&root).unwrap_err().exit_code(), 3);
}

#[test]
fn identity_dataset_evaluates_to_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("identity");
    let m = dataset::synthesize(&cfg, dir.path()).unwrap();
    let rows = eval::evaluate_split(&Model::new(&cfg).unwrap(), &m).unwrap();
    assert_eq!(rows.len(), 2 * m.test.len());
    for r in &rows {
        assert!(r.report.mse < 1e-12, "{r:?}");
        assert!((r.report.ncc - 1.0).abs() < 1e-9, "{r:?}");
    }
    let s = eval::summarize(&rows).unwrap();
    assert_eq!(s.pairs, 3);
    assert_eq!(s.registered, s.misaligned);
}

#[test]
fn csv_and_json_outputs_are_stable() {
    assert_eq!(eval::csv_header(), "pair,method,mse,ncc,mi,cc,ssim,vif,qabf");
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("moderate");
    let m = dataset::synthesize(&cfg, &dir.path().join("d")).unwrap();
    let rows = eval::evaluate_split(&Model::new(&cfg).unwrap(), &m).unwrap();
    let csv_path = dir.path().join("m.csv");
    eval::write_csv(&csv_path, &rows).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], eval::csv_header());
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1].starts_with(&format!("{},{REGISTERED},", m.test[0])));
    assert!(lines[2].starts_with(&format!("{},{MISALIGNED},", m.test[0])));
    assert!(lines.iter().all(|l| l.split(',').count() == 9));

    let json_path = dir.path().join("s.json");
    eval::write_json(&json_path, &eval::summarize(&rows).unwrap()).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(v["pairs"], 3);
    for col in ["mse", "ncc", "mi", "cc", "ssim", "vif", "qabf"] {
        assert!(v["registered"][col].is_f64(), "{col}");
        assert!(v["misaligned"][col].is_f64(), "{col}");
    }
}

#[test]
fn regime_names_resolve() {
    for name in ["slight", "moderate", "severe", "identity"] {
        assert_eq!(tiny(name).regime().unwrap(), DeformationRegime::by_name(name).unwrap());
    }
}
