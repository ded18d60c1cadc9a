//! Run configuration as flat `key = value` text with dotted namespaces.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are an error, so a
//! typo never silently falls back to a default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mrf_core::losses::LossWeights;
use mrf_core::nn::{PyramidConfig, TcfConfig, Translator};
use mrf_core::synth::DeformationRegime;

use crate::error::{HarnessError, Result};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "MRF_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Registration and fusion update together from `L_reg + balance * L_fus`.
    Joint,
    /// Registration parameters stay fixed; only `L_fus` updates fusion.
    Frozen,
    /// Only the registration network and `L_reg`.
    Registration,
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "frozen" => Ok(TrainMode::Frozen),
            "registration" => Ok(TrainMode::Registration),
            _ => Err(format!("unknown training mode `{s}` (joint | frozen | registration)")),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Joint => "joint",
            TrainMode::Frozen => "frozen",
            TrainMode::Registration => "registration",
        })
    }
}

/// What the `fixed` image of a synthesized pair looks like.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    /// Same intensities as the source.
    Mono,
    /// `1 - source`, so registration needs the inversion translator.
    Inverted,
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mono" => Ok(Modality::Mono),
            "inverted" => Ok(Modality::Inverted),
            _ => Err(format!("unknown modality `{s}` (mono | inverted)")),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Mono => "mono",
            Modality::Inverted => "inverted",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Pairs written by `synth`.
    pub count: usize,
    /// The last `test_count` pairs form the evaluation split.
    pub test_count: usize,
    /// Directory of source PNGs; procedural images when absent.
    pub source: Option<PathBuf>,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    /// Pairs drawn (with replacement) per step.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Loss-curve rows are kept every `log_every` steps.
    pub log_every: usize,
    /// Intermediate checkpoints every this many steps; 0 keeps only the last.
    pub checkpoint_every: usize,
    /// Registration weights to start from (required in frozen mode to be meaningful).
    pub init_registration: Option<PathBuf>,
    /// Steps of each branch in the joint-vs-frozen comparison.
    pub finetune_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub regime: String,
    pub height: usize,
    pub width: usize,
    pub data: DataConfig,
    pub pyramid: PyramidConfig,
    pub translator: Translator,
    pub tcf: TcfConfig,
    pub loss: LossWeights,
    /// Weight of `L_fus` relative to `L_reg` in joint mode.
    pub balance: f64,
    /// Levels of the Gaussian feature pyramid in the similarity loss.
    pub feature_levels: usize,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regime: "slight".into(),
            height: 64,
            width: 64,
            data: DataConfig {
                count: 20,
                test_count: 5,
                source: None,
                modality: Modality::Mono,
            },
            pyramid: PyramidConfig::default(),
            translator: Translator::Identity,
            tcf: TcfConfig::default(),
            loss: LossWeights::default(),
            balance: 1.0,
            feature_levels: 3,
            optim: OptimConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                iterations: 2000,
                batch: 8,
            },
            train: TrainConfig {
                mode: TrainMode::Joint,
                log_every: 1,
                checkpoint_every: 0,
                init_registration: None,
                finetune_iterations: 200,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| HarnessError::config(format!("{key} = {value}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse::<usize>(key, v.trim())).collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every key in serialization order.
    pub const KEYS: [&'static str; 39] = [
        "seed",
        "regime",
        "height",
        "width",
        "data.count",
        "data.test_count",
        "data.source",
        "data.modality",
        "reg.levels",
        "reg.widths",
        "reg.steps",
        "reg.dff_hidden",
        "reg.reduction",
        "reg.dff",
        "reg.pff",
        "reg.translator",
        "tcf.channels",
        "tcf.window",
        "tcf.heads",
        "tcf.reduction",
        "tcf.depth",
        "loss.lambda_rev",
        "loss.lambda_sm",
        "loss.lambda_ssim",
        "loss.lambda_jg",
        "loss.lambda_svs",
        "loss.balance",
        "loss.feature_levels",
        "optim.lr",
        "optim.beta1",
        "optim.beta2",
        "optim.eps",
        "optim.iterations",
        "optim.batch",
        "train.mode",
        "train.log_every",
        "train.checkpoint_every",
        "train.init_registration",
        "train.finetune_iterations",
    ];

    /// Sets one key; the value is trimmed first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "regime" => self.regime = v.to_string(),
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "data.count" => self.data.count = parse(key, v)?,
            "data.test_count" => self.data.test_count = parse(key, v)?,
            "data.source" => self.data.source = optional_path(v),
            "data.modality" => self.data.modality = parse(key, v)?,
            "reg.levels" => self.pyramid.levels = parse(key, v)?,
            "reg.widths" => self.pyramid.widths = parse_list(key, v)?,
            "reg.steps" => self.pyramid.steps = parse(key, v)?,
            "reg.dff_hidden" => self.pyramid.dff_hidden = parse(key, v)?,
            "reg.reduction" => self.pyramid.reduction = parse(key, v)?,
            "reg.dff" => self.pyramid.dff = parse(key, v)?,
            "reg.pff" => self.pyramid.pff = parse(key, v)?,
            "reg.translator" => self.translator = parse(key, v)?,
            "tcf.channels" => self.tcf.channels = parse(key, v)?,
            "tcf.window" => self.tcf.window = parse(key, v)?,
            "tcf.heads" => self.tcf.heads = parse(key, v)?,
            "tcf.reduction" => self.tcf.reduction = parse(key, v)?,
            "tcf.depth" => self.tcf.depth = parse(key, v)?,
            "loss.lambda_rev" => self.loss.lambda_rev = parse(key, v)?,
            "loss.lambda_sm" => self.loss.lambda_sm = parse(key, v)?,
            "loss.lambda_ssim" => self.loss.lambda_ssim = parse(key, v)?,
            "loss.lambda_jg" => self.loss.lambda_jg = parse(key, v)?,
            "loss.lambda_svs" => self.loss.lambda_svs = parse(key, v)?,
            "loss.balance" => self.balance = parse(key, v)?,
            "loss.feature_levels" => self.feature_levels = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.iterations" => self.optim.iterations = parse(key, v)?,
            "optim.batch" => self.optim.batch = parse(key, v)?,
            "train.mode" => self.train.mode = parse(key, v)?,
            "train.log_every" => self.train.log_every = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.init_registration" => self.train.init_registration = optional_path(v),
            "train.finetune_iterations" => self.train.finetune_iterations = parse(key, v)?,
            _ => return Err(HarnessError::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = &self.pyramid;
        Some(match key {
            "seed" => self.seed.to_string(),
            "regime" => self.regime.clone(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "data.count" => self.data.count.to_string(),
            "data.test_count" => self.data.test_count.to_string(),
            "data.source" => path_text(&self.data.source),
            "data.modality" => self.data.modality.to_string(),
            "reg.levels" => p.levels.to_string(),
            "reg.widths" => p.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            "reg.steps" => p.steps.to_string(),
            "reg.dff_hidden" => p.dff_hidden.to_string(),
            "reg.reduction" => p.reduction.to_string(),
            "reg.dff" => p.dff.to_string(),
            "reg.pff" => p.pff.to_string(),
            "reg.translator" => self.translator.to_string(),
            "tcf.channels" => self.tcf.channels.to_string(),
            "tcf.window" => self.tcf.window.to_string(),
            "tcf.heads" => self.tcf.heads.to_string(),
            "tcf.reduction" => self.tcf.reduction.to_string(),
            "tcf.depth" => self.tcf.depth.to_string(),
            "loss.lambda_rev" => self.loss.lambda_rev.to_string(),
            "loss.lambda_sm" => self.loss.lambda_sm.to_string(),
            "loss.lambda_ssim" => self.loss.lambda_ssim.to_string(),
            "loss.lambda_jg" => self.loss.lambda_jg.to_string(),
            "loss.lambda_svs" => self.loss.lambda_svs.to_string(),
            "loss.balance" => self.balance.to_string(),
            "loss.feature_levels" => self.feature_levels.to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.eps" => self.optim.eps.to_string(),
            "optim.iterations" => self.optim.iterations.to_string(),
            "optim.batch" => self.optim.batch.to_string(),
            "train.mode" => self.train.mode.to_string(),
            "train.log_every" => self.train.log_every.to_string(),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "train.init_registration" => path_text(&self.train.init_registration),
            "train.finetune_iterations" => self.train.finetune_iterations.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Replaces the seed with `MRF_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    /// Canonical text form; `parse` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).unwrap_or_default());
            out.push('\n');
        }
        out
    }

    pub fn regime(&self) -> Result<DeformationRegime> {
        DeformationRegime::by_name(&self.regime).ok_or_else(|| {
            HarnessError::config(format!(
                "unknown regime `{}` (slight | moderate | severe | identity)",
                self.regime
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::config(m));
        self.regime()?;
        if self.height == 0 || self.width == 0 {
            return bad(format!("image size {}x{} is empty", self.height, self.width));
        }
        if self.data.test_count >= self.data.count {
            return bad(format!(
                "data.test_count {} leaves no training pairs out of {}",
                self.data.test_count, self.data.count
            ));
        }
        self.pyramid.validate().map_err(|e| HarnessError::config(e.to_string()))?;
        self.tcf.validate().map_err(|e| HarnessError::config(e.to_string()))?;
        self.loss.validate().map_err(|e| HarnessError::config(e.to_string()))?;
        if !(self.balance.is_finite() && self.balance >= 0.0) {
            return bad(format!("loss.balance {} must be finite and non-negative", self.balance));
        }
        if self.feature_levels == 0 {
            return bad("loss.feature_levels must be positive".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad(format!("optimizer settings out of range: {o:?}"));
        }
        if o.batch == 0 {
            return bad("optim.batch must be positive".into());
        }
        if self.train.log_every == 0 {
            return bad("train.log_every must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_optimizer() {
        let c = RunConfig::default();
        assert_eq!((c.optim.lr, c.optim.beta1, c.optim.beta2), (1e-3, 0.9, 0.999));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 9\nreg.widths = 4, 8,8\nreg.levels=2\nloss.lambda_sm = 0.125 # comment\nreg.dff = interp-only\ndata.source = imgs/a b")
            .unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.pyramid.widths, vec![4, 8, 8]);
        assert_eq!(back.data.source, Some(PathBuf::from("imgs/a b")));
    }

    #[test]
    fn every_key_reads_back() {
        let c = RunConfig::default();
        for key in RunConfig::KEYS {
            let v = c.get(key).unwrap();
            let mut d = RunConfig::default();
            d.set(key, &v).unwrap();
            assert_eq!(d, c, "{key}");
        }
    }

    #[test]
    fn errors_are_config_errors() {
        for text in ["nope = 1", "seed = -1", "seed 3", "train.mode = both", "regime = extreme", "data.test_count = 20"] {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
    }
}
