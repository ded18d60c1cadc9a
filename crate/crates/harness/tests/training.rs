use std::path::Path;

use candle_core::Var;
use mrf_core::Image;
use mrf_harness::config::{RunConfig, TrainMode};
use mrf_harness::dataset::{self, DatasetManifest};
use mrf_harness::model::Model;
use mrf_harness::train::{self, StepLosses, Trainer, TrainingSet};

fn tiny(h: usize, w: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "reg.levels = 1\nreg.widths = 2,4\nreg.dff_hidden = 2\nreg.reduction = 2\n\
         tcf.channels = 4\ntcf.window = 4\ntcf.heads = 1\ntcf.reduction = 2\n\
         data.count = 6\ndata.test_count = 2\noptim.batch = 2\noptim.iterations = 3\nregime = moderate",
    )
    .unwrap();
    cfg.height = h;
    cfg.width = w;
    cfg
}

fn synth(cfg: &RunConfig, dir: &Path) -> DatasetManifest {
    dataset::synthesize(cfg, &dir.join("data")).unwrap()
}

fn values(vars: &[Var]) -> Vec<Vec<f32>> {
    vars.iter().map(|v| v.flatten_all().unwrap().to_vec1::<f32>().unwrap()).collect()
}

fn trained(mode: TrainMode) -> (Model, Model) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(16, 16);
    cfg.train.mode = mode;
    let data = TrainingSet::from_manifest(&synth(&cfg, dir.path())).unwrap();
    let out = train::train(&cfg, &data).unwrap();
    (Model::new(&cfg).unwrap(), out.model)
}

#[test]
fn frozen_mode_leaves_registration_bit_identical() {
    let (before, after) = trained(TrainMode::Frozen);
    assert_eq!(values(&before.registration_vars()), values(&after.registration_vars()));
    assert_ne!(values(&before.fusion_vars()), values(&after.fusion_vars()));
}

#[test]
fn registration_mode_leaves_fusion_bit_identical() {
    let (before, after) = trained(TrainMode::Registration);
    assert_eq!(values(&before.fusion_vars()), values(&after.fusion_vars()));
    assert_ne!(values(&before.registration_vars()), values(&after.registration_vars()));
}

#[test]
fn joint_mode_updates_both_networks() {
    let (before, after) = trained(TrainMode::Joint);
    assert_ne!(values(&before.fusion_vars()), values(&after.fusion_vars()));
    assert_ne!(values(&before.registration_vars()), values(&after.registration_vars()));
}

#[test]
fn seeded_runs_reproduce_losses_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(16, 16);
    let data = TrainingSet::from_manifest(&synth(&cfg, dir.path())).unwrap();
    let a = train::train(&cfg, &data).unwrap().history;
    let b = train::train(&cfg, &data).unwrap().history;
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(train::train(&other, &data).unwrap().history, a);
}

#[test]
fn training_in_chunks_matches_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(16, 16);
    let data = TrainingSet::from_manifest(&synth(&cfg, dir.path())).unwrap();
    let whole = train::train(&cfg, &data).unwrap().history;
    let mut t = Trainer::new(Model::new(&cfg).unwrap()).unwrap();
    let mut parts = t.run(&data, 1).unwrap();
    parts.extend(t.run(&data, 2).unwrap());
    assert_eq!(parts, whole);
    assert_eq!(t.steps(), 3);
}

#[test]
fn run_writes_curves_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(16, 16);
    cfg.optim.iterations = 4;
    cfg.train.checkpoint_every = 2;
    cfg.train.log_every = 3;
    let manifest = synth(&cfg, dir.path());
    let out = dir.path().join("run");
    let outcome = train::run(&cfg, &manifest, &out).unwrap();
    let steps: Vec<usize> = outcome.history.iter().map(|r| r.step).collect();
    assert_eq!(steps, [0, 3]);
    let csv = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(StepLosses::HEADER));
    assert_eq!(lines.count(), 2);
    for stem in ["step-000002", "step-000004", "final"] {
        let (model, meta) = Model::load(&out.join(stem)).unwrap();
        assert_eq!(model.config, cfg);
        assert_eq!(meta.input, (16, 16));
    }
    let (_, meta) = Model::load(&out.join("final")).unwrap();
    assert_eq!(meta.iteration, 4);
    assert_eq!(meta.final_loss, outcome.history.last().unwrap().total);
}

#[test]
fn non_divisible_sizes_are_padded_and_cropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(14, 10);
    cfg.set("reg.levels", "2").unwrap();
    cfg.set("reg.widths", "2,4,4").unwrap();
    cfg.optim.iterations = 1;
    let manifest = synth(&cfg, dir.path());
    let out = dir.path().join("run");
    train::run(&cfg, &manifest, &out).unwrap();
    let text = std::fs::read_to_string(out.join("final.manifest")).unwrap();
    assert!(text.contains("checkpoint.input = 14x10"), "{text}");
    assert!(text.contains("checkpoint.padded = 16x12"), "{text}");

    let (model, _) = Model::load(&out.join("final")).unwrap();
    let pair = &manifest.pairs(&manifest.test).unwrap()[0];
    let (field, registered) = model.register(&pair.fixed, &pair.moving).unwrap();
    assert_eq!((field.height(), field.width()), (14, 10));
    assert_eq!(registered.dims(), (1, 14, 10));
    let v = registered.to_vec().unwrap();
    assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn untrained_model_registers_to_identity_at_any_size() {
    let cfg = tiny(16, 16);
    let model = Model::new(&cfg).unwrap();
    let moving = Image::from_gray((0..13 * 7).map(|i| (i % 11) as f32 / 10.0).collect(), 13, 7).unwrap();
    let fixed = Image::constant(0.5, 13, 7).unwrap();
    let (field, registered) = model.register(&fixed, &moving).unwrap();
    assert!(field.to_vec_f64().unwrap().iter().all(|&d| d == 0.0));
    assert_eq!(registered.to_vec().unwrap(), moving.to_vec().unwrap());
}

#[test]
fn init_registration_loads_pretrained_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(16, 16);
    cfg.train.mode = TrainMode::Registration;
    let manifest = synth(&cfg, dir.path());
    let out = dir.path().join("pre");
    let pre = train::run(&cfg, &manifest, &out).unwrap().model;

    let mut frozen = cfg.clone();
    frozen.train.mode = TrainMode::Frozen;
    frozen.seed = 99;
    frozen.train.init_registration = Some(out.join("final"));
    let start = train::initial_model(&frozen).unwrap();
    assert_eq!(values(&start.registration_vars()), values(&pre.registration_vars()));
    assert_ne!(values(&start.fusion_vars()), values(&pre.fusion_vars()));
}

#[test]
fn size_mismatch_in_register_is_a_data_error() {
    let model = Model::new(&tiny(16, 16)).unwrap();
    let a = Image::constant(0.5, 8, 8).unwrap();
    let b = Image::constant(0.5, 8, 9).unwrap();
    assert_eq!(model.register(&a, &b).err().unwrap().exit_code(), 3);
    assert_eq!(model.fuse(&a, &b).err().unwrap().exit_code(), 3);
}
