//! The registration and fusion networks of one run, with input padding and
//! checkpoint files.
//!
//! A checkpoint `stem` is two files: `stem.safetensors` with every parameter
//! and `stem.manifest` with the full run configuration followed by
//! `checkpoint.*` lines.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use mrf_core::nn::layers::reflect_pad;
use mrf_core::nn::{FusionNet, ParamStore, RegistrationNet, RegistrationOutput};
use mrf_core::{DisplacementField, Image};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

/// Added to the run seed for the fusion network's parameter stream.
const FUSION_SEED_OFFSET: u64 = 0x5EED_F0F0;

/// Bookkeeping stored next to the configuration in a checkpoint manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub iteration: usize,
    /// Training image size.
    pub input: (usize, usize),
    /// Size after reflect padding to the pyramid divisor.
    pub padded: (usize, usize),
    pub final_loss: f64,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        format!(
            "checkpoint.iteration = {}\ncheckpoint.input = {}x{}\ncheckpoint.padded = {}x{}\ncheckpoint.final_loss = {}\n",
            self.iteration, self.input.0, self.input.1, self.padded.0, self.padded.1, self.final_loss
        )
    }
}

fn parse_size(v: &str) -> Option<(usize, usize)> {
    let (h, w) = v.trim().split_once('x')?;
    Some((h.parse().ok()?, w.parse().ok()?))
}

/// Splits manifest text into the run configuration and the checkpoint fields.
pub fn parse_manifest(text: &str) -> Result<(RunConfig, CheckpointMeta)> {
    let mut config_text = String::new();
    let mut meta = CheckpointMeta {
        iteration: 0,
        input: (0, 0),
        padded: (0, 0),
        final_loss: f64::NAN,
    };
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            config_text.push_str(line);
            config_text.push('\n');
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = || HarnessError::config(format!("checkpoint manifest: bad `{line}`"));
        match key {
            "checkpoint.iteration" => meta.iteration = value.parse().map_err(|_| bad())?,
            "checkpoint.input" => meta.input = parse_size(value).ok_or_else(bad)?,
            "checkpoint.padded" => meta.padded = parse_size(value).ok_or_else(bad)?,
            "checkpoint.final_loss" => meta.final_loss = value.parse().map_err(|_| bad())?,
            _ => {
                config_text.push_str(line);
                config_text.push('\n');
            }
        }
    }
    Ok((RunConfig::parse(&config_text)?, meta))
}

/// `stem` with any checkpoint extension removed.
pub fn checkpoint_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("safetensors" | "manifest") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Extra rows and columns that bring `n` up to a multiple of `d`.
pub fn pad_amount(n: usize, d: usize) -> usize {
    (d - n % d) % d
}

pub struct Model {
    pub config: RunConfig,
    reg_params: ParamStore,
    fus_params: ParamStore,
    pub registration: RegistrationNet,
    pub fusion: FusionNet,
}

impl Model {
    /// Freshly initialized `f32` networks.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut reg_params = ParamStore::new(config.seed, DType::F32);
        let registration = RegistrationNet::new(&mut reg_params, &config.pyramid)?;
        let mut fus_params = ParamStore::new(config.seed.wrapping_add(FUSION_SEED_OFFSET), DType::F32);
        let fusion = FusionNet::new(&mut fus_params, &config.tcf)?;
        Ok(Self {
            config: config.clone(),
            reg_params,
            fus_params,
            registration,
            fusion,
        })
    }

    pub fn registration_params(&self) -> &ParamStore {
        &self.reg_params
    }

    pub fn fusion_params(&self) -> &ParamStore {
        &self.fus_params
    }

    pub fn registration_vars(&self) -> Vec<Var> {
        self.reg_params.vars()
    }

    pub fn fusion_vars(&self) -> Vec<Var> {
        self.fus_params.vars()
    }

    /// The registration target: `fixed` passed through the configured translator.
    pub fn target(&self, fixed: &Tensor) -> Result<Tensor> {
        Ok(self.config.translator.apply(fixed)?)
    }

    /// Padded size of an `h x w` input.
    pub fn padded_size(&self, h: usize, w: usize) -> (usize, usize) {
        let d = self.config.pyramid.divisor();
        (h + pad_amount(h, d), w + pad_amount(w, d))
    }

    /// Registers batched `[B, 1, H, W]` tensors of any size. Inputs are reflect
    /// padded at the bottom and right; `final_field`, `final_velocity` and
    /// `registered` are cropped back, the per-scale fields are left padded.
    pub fn register_batch(&self, target: &Tensor, moving: &Tensor) -> Result<RegistrationOutput> {
        let (_, _, h, w) = target.dims4()?;
        let (ph, pw) = self.padded_size(h, w);
        if (ph, pw) == (h, w) {
            return Ok(self.registration.forward(target, moving)?);
        }
        let pad = |t: &Tensor| reflect_pad(t, ph - h, pw - w);
        let out = self.registration.forward(&pad(target)?, &pad(moving)?)?;
        let crop = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(2, 0, h)?.narrow(3, 0, w)?) };
        Ok(RegistrationOutput {
            final_field: crop(&out.final_field)?,
            final_velocity: crop(&out.final_velocity)?,
            registered: crop(&out.registered)?,
            subfields: out.subfields,
            fused_fields: out.fused_fields,
        })
    }

    /// Registers `moving` onto `fixed`, returning the field and the registered image.
    pub fn register(&self, fixed: &Image, moving: &Image) -> Result<(DisplacementField, Image)> {
        if (fixed.height(), fixed.width()) != (moving.height(), moving.width()) {
            return Err(HarnessError::data(format!(
                "fixed is {}x{}, moving is {}x{}",
                fixed.height(),
                fixed.width(),
                moving.height(),
                moving.width()
            )));
        }
        let load = |img: &Image| -> Result<Tensor> { Ok(img.to_gray()?.to_dtype(DType::F32)?.batched()?) };
        let out = self.register_batch(&self.target(&load(fixed)?)?, &load(moving)?)?;
        let field = DisplacementField::from_tensor(out.final_field.squeeze(0)?)?;
        let registered = Image::from_tensor(out.registered.squeeze(0)?)?.clamp01()?;
        Ok((field, registered))
    }

    /// Fuses aligned infrared and visible images.
    pub fn fuse(&self, ir: &Image, vis: &Image) -> Result<Image> {
        if (ir.height(), ir.width()) != (vis.height(), vis.width()) {
            return Err(HarnessError::data(format!(
                "infrared is {}x{}, visible is {}x{}",
                ir.height(),
                ir.width(),
                vis.height(),
                vis.width()
            )));
        }
        Ok(self.fusion.fuse(ir, vis)?.clamp01()?)
    }

    /// Writes `stem.safetensors` and `stem.manifest`.
    pub fn save(&self, stem: &Path, meta: &CheckpointMeta) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (name, var) in self.reg_params.named().iter().chain(self.fus_params.named()) {
            map.insert(name.clone(), var.as_tensor().to_dtype(DType::F32)?);
        }
        candle_core::safetensors::save(&map, with_suffix(stem, "safetensors"))?;
        let manifest = with_suffix(stem, "manifest");
        std::fs::write(&manifest, self.config.to_text() + &meta.to_text()).map_err(|e| HarnessError::io(&manifest, e))
    }

    /// Rebuilds the exact run configuration and weights stored under `stem`.
    pub fn load(stem: &Path) -> Result<(Self, CheckpointMeta)> {
        let stem = checkpoint_stem(stem);
        let manifest = with_suffix(&stem, "manifest");
        let text = std::fs::read_to_string(&manifest).map_err(|e| HarnessError::io(&manifest, e))?;
        let (config, meta) = parse_manifest(&text)?;
        let model = Self::new(&config)?;
        let map = Self::read_weights(&stem)?;
        model.reg_params.load_map(&map)?;
        model.fus_params.load_map(&map)?;
        Ok((model, meta))
    }

    /// Copies of the registration parameters by name.
    pub fn registration_weights(&self) -> Result<HashMap<String, Tensor>> {
        self.reg_params
            .named()
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn set_registration_weights(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        Ok(self.reg_params.load_map(map)?)
    }

    /// Overwrites only the registration weights from a checkpoint.
    pub fn load_registration(&self, stem: &Path) -> Result<()> {
        let map = Self::read_weights(&checkpoint_stem(stem))?;
        self.reg_params.load_map(&map).map_err(|e| HarnessError::data(format!("{}: {e}", stem.display())))
    }

    fn read_weights(stem: &Path) -> Result<HashMap<String, Tensor>> {
        let path = with_suffix(stem, "safetensors");
        if !path.is_file() {
            return Err(HarnessError::data(format!("missing {}", path.display())));
        }
        Ok(candle_core::safetensors::load(&path, &Device::Cpu)?)
    }
}
