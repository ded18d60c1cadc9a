use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mrf_core::Image;
use mrf_harness::config::RunConfig;
use mrf_harness::dataset::{self, DatasetManifest};
use mrf_harness::error::{HarnessError, Result};
use mrf_harness::model::{checkpoint_stem, Model};
use mrf_harness::{errormap, eval, study, train};

/// Registration and fusion of misaligned infrared/visible image pairs.
///
/// Configuration is layered: built-in defaults, then `--config`, then the
/// `MRF_SEED` environment variable, then each `--set` in order.
#[derive(Parser, Debug)]
#[command(name = "mrf", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set optim.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic misaligned dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write checkpoints and loss curves.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run the joint-vs-frozen comparison instead of a single training run.
        #[arg(long)]
        compare_frozen: bool,
    },
    /// Register one moving image onto a fixed image.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Registered image (PNG).
        #[arg(long)]
        out: PathBuf,
        /// Also write the displacement field as raw `f32`.
        #[arg(long)]
        field: Option<PathBuf>,
    },
    /// Fuse an aligned infrared/visible pair.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics on a dataset's test split, one CSV and JSON per checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// One or more checkpoints; several also produce `comparison.csv`.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Heat map of the absolute difference of two images.
    Errormap {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_image(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(HarnessError::data(format!("no such image {}", path.display())));
    }
    Ok(Image::load_png(path)?)
}

fn label(path: &Path) -> String {
    let stem = checkpoint_stem(path);
    let parent = stem.parent().and_then(|p| p.file_name()).map(|p| p.to_string_lossy().into_owned());
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match parent {
        Some(p) => format!("{p}/{name}"),
        None => name,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { out } => {
            let cfg = resolve_config(cli)?;
            let m = dataset::synthesize(&cfg, out)?;
            println!("wrote {} pairs to {}", m.samples.len(), out.display());
        }
        Command::Train {
            data,
            out,
            compare_frozen,
        } => {
            let cfg = resolve_config(cli)?;
            let manifest = DatasetManifest::load(data)?;
            if *compare_frozen {
                let r = study::run(&cfg, &manifest, out)?;
                println!(
                    "registered mse: frozen {:.6}, joint {:.6} (misaligned {:.6})",
                    r.frozen.mse, r.joint.mse, r.misaligned.mse
                );
            } else {
                let outcome = train::run(&cfg, &manifest, out)?;
                if let Some(last) = outcome.last() {
                    println!("step {}: total loss {:.6}", last.step, last.total);
                }
            }
        }
        Command::Register {
            checkpoint,
            fixed,
            moving,
            out,
            field,
        } => {
            let (model, _) = Model::load(checkpoint)?;
            let (phi, registered) = model.register(&load_image(fixed)?, &load_image(moving)?)?;
            registered.save_png(out)?;
            if let Some(path) = field {
                phi.save_raw(path)?;
            }
        }
        Command::Fuse { checkpoint, ir, vis, out } => {
            let (model, _) = Model::load(checkpoint)?;
            model.fuse(&load_image(ir)?, &load_image(vis)?)?.save_png(out)?;
        }
        Command::Eval { data, checkpoint, out } => {
            let manifest = DatasetManifest::load(data)?;
            std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
            let mut runs = Vec::new();
            for (i, ck) in checkpoint.iter().enumerate() {
                let (model, _) = Model::load(ck)?;
                let rows = eval::evaluate_split(&model, &manifest)?;
                let summary = eval::summarize(&rows)?;
                let name = if checkpoint.len() == 1 { "metrics".to_string() } else { format!("metrics-{i}") };
                eval::write_csv(&out.join(format!("{name}.csv")), &rows)?;
                eval::write_json(&out.join(format!("{name}.json")), &summary)?;
                println!(
                    "{}: registered mse {:.6} (misaligned {:.6}) over {} pairs",
                    ck.display(),
                    summary.registered.mse,
                    summary.misaligned.mse,
                    summary.pairs
                );
                runs.push((label(ck), eval::mean_of(&rows, eval::REGISTERED).expect("rows")));
            }
            if runs.len() > 1 {
                eval::write_comparison(&out.join("comparison.csv"), &runs)?;
            }
        }
        Command::Errormap { a, b, out } => {
            errormap::write_error_map(&load_image(a)?, &load_image(b)?, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
