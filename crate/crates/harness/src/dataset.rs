//! On-disk dataset layout: `moving/`, `fixed/` and `field_gt/` hold one file per
//! pair (`NNNNN.png`, `NNNNN.bin` plus its `.meta` sidecar), indexed by
//! `manifest.json`.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use mrf_core::synth::{self, DeformationRegime};
use mrf_core::{DisplacementField, Image};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Modality, RunConfig};
use crate::error::{HarnessError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One registration triple, paths relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub name: String,
    pub moving: PathBuf,
    pub fixed: PathBuf,
    /// Displacement with `warp(fixed source, field) = moving`.
    pub field: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub height: usize,
    pub width: usize,
    pub regime: String,
    pub seed: u64,
    pub samples: Vec<Triple>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// A loaded pair.
#[derive(Debug, Clone)]
pub struct Pair {
    pub name: String,
    pub moving: Image,
    pub fixed: Image,
}

fn source_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::data(format!("no PNG files in {}", dir.display())));
    }
    Ok(files)
}

fn center_crop(img: &Image, h: usize, w: usize) -> Result<Image> {
    let (_, ih, iw) = img.dims();
    if ih < h || iw < w {
        return Err(HarnessError::data(format!("source image {ih}x{iw} is smaller than {h}x{w}")));
    }
    let (top, left) = ((ih - h) / 2, (iw - w) / 2);
    Ok(Image::from_tensor(img.tensor().narrow(1, top, h)?.narrow(2, left, w)?)?)
}

fn modality_view(src: &Image, modality: Modality) -> Result<Image> {
    Ok(match modality {
        Modality::Mono => src.clone(),
        Modality::Inverted => Image::from_tensor(src.tensor().affine(-1.0, 1.0)?)?,
    })
}

/// Writes `cfg.data.count` misaligned pairs under `out` and returns the manifest.
///
/// Pair `i` draws everything (procedural source and deformation) from a
/// generator seeded with `sample_seed(cfg.seed, i)`.
pub fn synthesize(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let regime: DeformationRegime = cfg.regime()?;
    let sources = cfg.data.source.as_deref().map(source_images).transpose()?;
    for sub in ["moving", "fixed", "field_gt"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| HarnessError::io(&d, e))?;
    }
    let mut samples = Vec::with_capacity(cfg.data.count);
    for i in 0..cfg.data.count {
        let mut rng = ChaCha8Rng::seed_from_u64(synth::sample_seed(cfg.seed, i as u64));
        let src = match &sources {
            Some(files) => center_crop(&Image::load_png(&files[i % files.len()])?.to_gray()?, cfg.height, cfg.width)?,
            None => synth::procedural_image(cfg.height, cfg.width, &mut rng)?,
        };
        let m = synth::synthesize_misaligned(&src, &regime, &mut rng)?;
        let name = format!("{i:05}");
        let t = Triple {
            moving: PathBuf::from("moving").join(format!("{name}.png")),
            fixed: PathBuf::from("fixed").join(format!("{name}.png")),
            field: PathBuf::from("field_gt").join(format!("{name}.bin")),
            name,
        };
        m.moving.save_png16(out.join(&t.moving))?;
        modality_view(&src, cfg.data.modality)?.save_png16(out.join(&t.fixed))?;
        m.field.save_raw(out.join(&t.field))?;
        samples.push(t);
    }
    let split = cfg.data.count - cfg.data.test_count;
    let manifest = DatasetManifest {
        height: cfg.height,
        width: cfg.width,
        regime: regime.name.clone(),
        seed: cfg.seed,
        train: samples[..split].iter().map(|s| s.name.clone()).collect(),
        test: samples[split..].iter().map(|s| s.name.clone()).collect(),
        samples,
        root: out.to_path_buf(),
    };
    manifest.save()?;
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| HarnessError::io(&cfg_path, e))?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| HarnessError::data(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))
    }

    /// Loads `path` (a manifest file or the directory holding one) and checks
    /// that every listed file exists with the recorded size.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| HarnessError::data(format!("{}: {e}", file.display())))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        for name in self.train.iter().chain(&self.test) {
            if !self.samples.iter().any(|s| &s.name == name) {
                return Err(HarnessError::data(format!("split lists unknown pair {name}")));
            }
        }
        for s in &self.samples {
            for p in [&s.moving, &s.fixed, &s.field] {
                if !self.root.join(p).is_file() {
                    return Err(HarnessError::data(format!("missing {}", self.root.join(p).display())));
                }
            }
        }
        Ok(())
    }

    fn triple(&self, name: &str) -> Result<&Triple> {
        self.samples
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| HarnessError::data(format!("no pair named {name}")))
    }

    /// Loads the images of `names`, checking their sizes against the manifest.
    pub fn pairs(&self, names: &[String]) -> Result<Vec<Pair>> {
        names
            .iter()
            .map(|name| {
                let t = self.triple(name)?;
                let moving = Image::load_png(self.root.join(&t.moving))?;
                let fixed = Image::load_png(self.root.join(&t.fixed))?;
                for img in [&moving, &fixed] {
                    if (img.height(), img.width()) != (self.height, self.width) {
                        return Err(HarnessError::data(format!(
                            "pair {name}: image is {}x{}, manifest says {}x{}",
                            img.height(),
                            img.width(),
                            self.height,
                            self.width
                        )));
                    }
                }
                Ok(Pair {
                    name: name.clone(),
                    moving,
                    fixed,
                })
            })
            .collect()
    }

    pub fn ground_truth(&self, name: &str) -> Result<DisplacementField> {
        let f = DisplacementField::load_raw(self.root.join(&self.triple(name)?.field))?;
        if (f.height(), f.width()) != (self.height, self.width) {
            return Err(HarnessError::data(format!("field of {name} has the wrong size")));
        }
        Ok(f)
    }
}

/// Stacks pairs into `[N, 1, H, W]` fixed and moving tensors of `dtype`.
pub fn stack(pairs: &[Pair], dtype: DType) -> Result<(Tensor, Tensor)> {
    if pairs.is_empty() {
        return Err(HarnessError::data("no pairs to stack"));
    }
    let batch = |f: &dyn Fn(&Pair) -> &Image| -> Result<Tensor> {
        let parts = pairs
            .iter()
            .map(|p| Ok(f(p).to_gray()?.tensor().to_dtype(dtype)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts, 0)?)
    };
    Ok((batch(&|p| &p.fixed)?, batch(&|p| &p.moving)?))
}
