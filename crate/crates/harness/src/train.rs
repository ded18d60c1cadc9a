//! Mini-batch Adam training in the three modes of [`TrainMode`].

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use mrf_core::losses::{self, GaussianPyramid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TrainMode};
use crate::dataset::{self, DatasetManifest};
use crate::error::{HarnessError, Result};
use crate::model::{CheckpointMeta, Model};

/// Added to the run seed for the batch sampler's stream.
const SAMPLER_SEED_OFFSET: u64 = 0xBA7C_4000;

/// Scalar losses of one step. Terms that the mode does not compute are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub reg: f64,
    pub similarity: f64,
    pub smooth: f64,
    pub fusion: f64,
    pub total: f64,
}

impl StepLosses {
    pub const HEADER: &'static str = "step,l_reg,l_sim,l_smooth,l_fus,total";

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.reg, self.similarity, self.smooth, self.fusion, self.total
        )
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Every `log_every`-th step plus the last one.
    pub history: Vec<StepLosses>,
}

impl TrainOutcome {
    pub fn last(&self) -> Option<&StepLosses> {
        self.history.last()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Training tensors of one split.
pub struct TrainingSet {
    pub fixed: Tensor,
    pub moving: Tensor,
}

impl TrainingSet {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let pairs = manifest.pairs(&manifest.train)?;
        let (fixed, moving) = dataset::stack(&pairs, DType::F32)?;
        Ok(Self { fixed, moving })
    }

    pub fn len(&self) -> usize {
        self.fixed.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        let d = self.fixed.dims();
        (d[2], d[3])
    }
}

/// A model with its optimizer and batch sampler state.
pub struct Trainer {
    pub model: Model,
    opt: AdamW,
    sampler: ChaCha8Rng,
    psi: GaussianPyramid,
    step: usize,
}

impl Trainer {
    /// Optimizes the parameter set that `model.config.train.mode` selects.
    pub fn new(model: Model) -> Result<Self> {
        let cfg = &model.config;
        let vars = match cfg.train.mode {
            TrainMode::Joint => [model.registration_vars(), model.fusion_vars()].concat(),
            TrainMode::Frozen => model.fusion_vars(),
            TrainMode::Registration => model.registration_vars(),
        };
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.optim.lr,
                beta1: cfg.optim.beta1,
                beta2: cfg.optim.beta2,
                eps: cfg.optim.eps,
                weight_decay: 0.0,
            },
        )?;
        Ok(Self {
            psi: GaussianPyramid {
                levels: cfg.feature_levels,
            },
            sampler: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SAMPLER_SEED_OFFSET)),
            opt,
            model,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// One Adam update on a batch drawn with replacement from `data`.
    pub fn step(&mut self, data: &TrainingSet) -> Result<StepLosses> {
        if data.is_empty() {
            return Err(HarnessError::data("empty training split"));
        }
        let model = &self.model;
        let cfg = &model.config;
        let idx: Vec<u32> = (0..cfg.optim.batch)
            .map(|_| self.sampler.random_range(0..data.len()) as u32)
            .collect();
        let idx = Tensor::from_vec(idx, cfg.optim.batch, &Device::Cpu)?;
        let fixed = data.fixed.index_select(&idx, 0)?;
        let moving = data.moving.index_select(&idx, 0)?;
        let target = model.target(&fixed)?;

        let out = model.register_batch(&target, &moving)?;
        let reg = losses::loss_reg_total(&out, &target, &moving, &self.psi, &cfg.loss, cfg.pyramid.steps)?;
        let mut rec = StepLosses {
            step: self.step,
            reg: scalar(&reg.total)?,
            similarity: scalar(&reg.similarity)?,
            smooth: scalar(&reg.smooth)?,
            fusion: f64::NAN,
            total: f64::NAN,
        };
        let total = match cfg.train.mode {
            TrainMode::Registration => reg.total,
            mode => {
                let ir = if mode == TrainMode::Frozen {
                    out.registered.detach()
                } else {
                    out.registered.clone()
                };
                let fused = model.fusion.forward(&ir, &fixed)?;
                let fus = losses::loss_fusion_total(&fused, &ir, &fixed, &cfg.loss)?.total;
                rec.fusion = scalar(&fus)?;
                if mode == TrainMode::Frozen {
                    fus
                } else {
                    (reg.total + (fus * cfg.balance)?)?
                }
            }
        };
        rec.total = scalar(&total)?;
        if !rec.total.is_finite() {
            return Err(HarnessError::data(format!("loss diverged at step {}: {rec:?}", self.step)));
        }
        self.opt.backward_step(&total)?;
        self.step += 1;
        Ok(rec)
    }

    /// Runs `iterations` steps, keeping every `log_every`-th record and the last.
    pub fn run(&mut self, data: &TrainingSet, iterations: usize) -> Result<Vec<StepLosses>> {
        let every = self.model.config.train.log_every;
        let mut history = Vec::new();
        for i in 0..iterations {
            let rec = self.step(data)?;
            if rec.step % every == 0 || i + 1 == iterations {
                history.push(rec);
            }
        }
        Ok(history)
    }
}

/// Fresh model (plus `train.init_registration` when set) for `cfg`.
pub fn initial_model(cfg: &RunConfig) -> Result<Model> {
    let model = Model::new(cfg)?;
    if let Some(init) = &cfg.train.init_registration {
        model.load_registration(init)?;
    }
    Ok(model)
}

/// Runs `cfg.optim.iterations` steps from [`initial_model`].
pub fn train(cfg: &RunConfig, data: &TrainingSet) -> Result<TrainOutcome> {
    train_model(initial_model(cfg)?, data, cfg.optim.iterations)
}

/// Continues training `model` for `iterations` steps under its own configuration.
pub fn train_model(model: Model, data: &TrainingSet, iterations: usize) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model)?;
    let history = trainer.run(data, iterations)?;
    Ok(TrainOutcome {
        model: trainer.model,
        history,
    })
}

/// `train` plus on-disk artifacts in `out`: `losses.csv`, `final.*` and, when
/// `train.checkpoint_every > 0`, `step-NNNNNN.*` checkpoints.
pub fn run(cfg: &RunConfig, manifest: &DatasetManifest, out: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let data = TrainingSet::from_manifest(manifest)?;
    let (h, w) = data.size();
    let mut trainer = Trainer::new(initial_model(cfg)?)?;
    let every = cfg.train.checkpoint_every;
    let mut history = Vec::new();
    let meta = |t: &Trainer, history: &[StepLosses]| CheckpointMeta {
        iteration: t.steps(),
        input: (h, w),
        padded: t.model.padded_size(h, w),
        final_loss: history.last().map_or(f64::NAN, |r| r.total),
    };
    for i in 0..cfg.optim.iterations {
        let rec = trainer.step(&data)?;
        if rec.step % cfg.train.log_every == 0 || i + 1 == cfg.optim.iterations {
            history.push(rec);
        }
        if every > 0 && trainer.steps() % every == 0 {
            let stem = out.join(format!("step-{:06}", trainer.steps()));
            trainer.model.save(&stem, &meta(&trainer, &history))?;
        }
    }
    trainer.model.save(&out.join("final"), &meta(&trainer, &history))?;
    write_history(&out.join("losses.csv"), &history)?;
    Ok(TrainOutcome {
        model: trainer.model,
        history,
    })
}

pub fn write_history(path: &Path, history: &[StepLosses]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut text = String::from(StepLosses::HEADER);
    text.push('\n');
    for r in history {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| HarnessError::io(path, e))
}
