//! Joint training against training fusion on a frozen registration network.
//!
//! Both branches start from the same registration weights and the same fresh
//! fusion network, then run the same number of steps: the frozen branch
//! updates fusion from `L_fus` alone, the joint branch updates both networks
//! from `L_reg + balance * L_fus`.

use std::path::Path;

use mrf_core::metrics::MetricReport;

use crate::config::{RunConfig, TrainMode};
use crate::dataset::{DatasetManifest, Pair};
use crate::error::{HarnessError, Result};
use crate::eval::{self, MISALIGNED, REGISTERED};
use crate::model::Model;
use crate::train::{self, TrainingSet};

pub const COMPARISON_FILE: &str = "joint_vs_frozen.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub frozen: MetricReport,
    pub joint: MetricReport,
    pub misaligned: MetricReport,
}

/// Trains one branch of the study from `start`'s registration weights.
pub fn branch(start: &Model, mode: TrainMode, data: &TrainingSet, iterations: usize) -> Result<Model> {
    let mut cfg = start.config.clone();
    cfg.train.mode = mode;
    cfg.train.init_registration = None;
    let model = Model::new(&cfg)?;
    model.set_registration_weights(&start.registration_weights()?)?;
    Ok(train::train_model(model, data, iterations)?.model)
}

/// Runs both branches for `iterations` steps and evaluates them on `test`.
pub fn joint_vs_frozen(start: &Model, data: &TrainingSet, test: &[Pair], iterations: usize) -> Result<StudyResult> {
    let mut means = Vec::new();
    for mode in [TrainMode::Frozen, TrainMode::Joint] {
        let rows = eval::evaluate(&branch(start, mode, data, iterations)?, test)?;
        means.push((
            eval::mean_of(&rows, REGISTERED).ok_or_else(|| HarnessError::data("empty test split"))?,
            eval::mean_of(&rows, MISALIGNED).ok_or_else(|| HarnessError::data("empty test split"))?,
        ));
    }
    Ok(StudyResult {
        frozen: means[0].0,
        joint: means[1].0,
        misaligned: means[0].1,
    })
}

/// The full study with artifacts: registration-only pretraining for
/// `optim.iterations` steps (skipped when `train.init_registration` is set),
/// then both branches for `train.finetune_iterations` steps. Writes
/// `joint_vs_frozen.csv` with `misaligned`, `frozen` and `joint` columns.
pub fn run(cfg: &RunConfig, manifest: &DatasetManifest, out: &Path) -> Result<StudyResult> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let data = TrainingSet::from_manifest(manifest)?;
    let mut pre = cfg.clone();
    pre.train.mode = TrainMode::Registration;
    let start = if cfg.train.init_registration.is_some() {
        train::initial_model(&pre)?
    } else {
        train::train(&pre, &data)?.model
    };
    let test = manifest.pairs(&manifest.test)?;
    let result = joint_vs_frozen(&start, &data, &test, cfg.train.finetune_iterations)?;
    eval::write_comparison(
        &out.join(COMPARISON_FILE),
        &[
            ("misaligned".into(), result.misaligned),
            ("frozen".into(), result.frozen),
            ("joint".into(), result.joint),
        ],
    )?;
    Ok(result)
}
