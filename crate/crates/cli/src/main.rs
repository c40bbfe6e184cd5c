//! `csfm`: dataset preparation, training, evaluation and mask rendering for
//! compressed-sensing fluorescence microscopy.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csfm_core::data::{self, Dataset, Item, Split, SplitCounts, SynthKind};
use csfm_core::error::ErrorClass;
use csfm_core::mask::{self, BaselineKind, ProbabilisticMask};
use csfm_core::noise::SeededRng;
use csfm_core::train::{self, EvalRecon, MaskChoice, Reconstructor};
use csfm_core::{Error, Result};

use config::RunConfig;

/// RNG stream for baseline masks with a random component.
const STREAM_BASELINE: u64 = 30;

#[derive(Parser)]
#[command(name = "csfm", version, about = "Compressed-sensing fluorescence microscopy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set mask_lr=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// gaussian_blobs or piecewise_constant
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        /// Ground-truth peak intensity.
        #[arg(long)]
        peak: Option<f64>,
        /// Leading items labelled train.
        #[arg(long)]
        train: Option<usize>,
        /// Items after the training block labelled val; the rest are test.
        #[arg(long)]
        val: Option<usize>,
    },
    /// Crop a directory of raw FOV acquisitions into a dataset.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Directory with one subdirectory per FOV.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train a reconstructor, and a mask when `--mask learned`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth` or `prepare`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        /// Measurements per coefficient.
        #[arg(long)]
        s: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        /// learned, R, LS, HH or U
        #[arg(long)]
        mask: Option<String>,
        /// unet or identity
        #[arg(long)]
        recon: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// simulated or raw
        #[arg(long)]
        mode: Option<String>,
    },
    /// Score a mask and reconstructor on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Reconstructor checkpoint; required for `--recon unet`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mask_file: PathBuf,
        /// unet or tvw
        #[arg(long)]
        recon: Option<String>,
        #[arg(long)]
        s: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Write a baseline mask file.
    Mask {
        #[command(flatten)]
        common: Common,
        /// R, LS, HH or U
        #[arg(long)]
        kind: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// Render a mask as an 8-bit grayscale image in 2D-sequency order.
    RenderMask {
        #[arg(long)]
        mask_file: PathBuf,
        #[arg(long)]
        ordering: Option<String>,
        /// Output PGM path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_assignments(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

const TRAIN_KEYS: &[&str] = &[
    "seed", "alpha", "s", "mode", "noise_a", "noise_b", "noiseless", "denominator", "mask", "recon", "tau", "lr",
    "beta1", "beta2", "adam_eps", "mask_lr", "epochs", "batch", "levels", "base_channels", "growth", "skip",
    "residual", "intensity_scale",
];
const EVAL_KEYS: &[&str] = &[
    "recon", "s", "mode", "noise_a", "noise_b", "noiseless", "split", "eval_seed", "psnr_peak", "lambda_tv",
    "lambda_w", "tvw_iters", "tvw_inner", "tvw_tol",
];

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let kind: SynthKind = cfg.get("kind")?;
    let count: usize = cfg.get("count")?;
    let train: usize = cfg.get("train")?;
    let val: usize = cfg.get("val")?;
    let ds = data::synth_dataset(kind, count, cfg.get("side")?, cfg.get("peak")?, cfg.get("seed")?)?;
    let ds = data::assign_splits(ds, train.min(count), val.min(count - train.min(count)))?;
    create_dir(out)?;
    ds.save(out)?;
    cfg.write(out, &["seed", "kind", "count", "side", "peak", "train", "val"], &[])?;
    log::info!("wrote {} images to {}", ds.len(), out.display());
    Ok(())
}

fn list_fov_dirs(input: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!("{}: no FOV directories", input.display())));
    }
    Ok(dirs)
}

fn cmd_prepare(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let mut items = Vec::new();
    for dir in list_fov_dirs(input)? {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let stack = data::load_fov(&dir)?;
        items.push(Item::from_frames(name.clone(), name, Split::Train, stack));
    }
    let source = Dataset { items };
    let counts = SplitCounts {
        train: cfg.get("train")?,
        val: cfg.get("val")?,
        test: cfg.get("test")?,
    };
    let ds = data::crop_and_split(&source, cfg.get("grid")?, counts, cfg.get("seed")?)?;
    create_dir(out)?;
    ds.save(out)?;
    cfg.write(out, &["seed", "grid", "train", "val", "test"], &[("input", path_str(input))])?;
    log::info!("wrote {} crops to {}", ds.len(), out.display());
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let ds = Dataset::load(dir)?;
    if ds.split(split).is_empty() {
        return Err(Error::Format(format!("{}: no {split} items", dir.display())));
    }
    Ok(ds)
}

fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let tcfg = cfg.train()?;
    let ds = load_split(data_dir, Split::Train)?;
    let items = ds.split(Split::Train);
    let side = items[0].truth.side();
    let mask_name = cfg.raw("mask").to_string();
    let choice = if mask_name == "learned" {
        MaskChoice::Learned
    } else {
        let kind: BaselineKind = mask_name.parse()?;
        let mut rng = SeededRng::new(tcfg.seed, STREAM_BASELINE).rng();
        MaskChoice::Fixed(mask::baseline_mask(kind, tcfg.alpha, side, &mut rng)?)
    };
    log::info!("training on {} images, mask {mask_name}", items.len());
    let res = train::train_with(&items, choice, &tcfg)?;
    create_dir(out)?;
    res.recon.save(&out.join("recon.ckpt"))?;
    mask::write_mask(&out.join("mask.bin"), &res.mask, side, &mask_name)?;
    mask::write_mask_pgm(&out.join("mask.pgm"), &res.mask, side)?;
    train::write_loss_csv(&out.join("loss.csv"), &res.losses)?;
    cfg.write(out, TRAIN_KEYS, &[("data", path_str(data_dir))])?;
    if let Some(last) = res.losses.last() {
        log::info!("final loss {}", last.loss);
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, data_dir: &Path, checkpoint: Option<&Path>, mask_file: &Path, out: &Path) -> Result<()> {
    let split: Split = match cfg.raw("split") {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Error::invalid(format!("split must be train, val or test, got `{other}`"))),
    };
    let ecfg = cfg.eval()?;
    let ds = load_split(data_dir, split)?;
    let items = ds.split(split);
    let (mask, manifest): (ProbabilisticMask, _) = mask::read_mask(mask_file)?;
    let side = items[0].truth.side();
    if manifest.side != side {
        return Err(Error::Shape(format!(
            "mask is for {0}x{0} images, dataset has {1}x{1}",
            manifest.side, side
        )));
    }
    let tvw;
    let net;
    let recon = match cfg.raw("recon") {
        "tvw" => {
            tvw = cfg.tvw()?;
            EvalRecon::Tvw(&tvw)
        }
        "unet" | "identity" => {
            net = match checkpoint {
                Some(p) => Reconstructor::load(p)?,
                None if cfg.raw("recon") == "identity" => Reconstructor::Identity,
                None => return Err(Error::invalid("--checkpoint is required for the unet reconstructor")),
            };
            EvalRecon::Net(&net)
        }
        other => return Err(Error::invalid(format!("recon must be unet, identity or tvw, got `{other}`"))),
    };
    let report = train::evaluate(&items, &mask, &manifest.kind, recon, &ecfg)?;
    create_dir(out)?;
    report.write_rows_csv(&out.join("per_image.csv"))?;
    train::write_summary_csv(&out.join("summary.csv"), std::slice::from_ref(&report))?;
    let mut extra = vec![("data", path_str(data_dir)), ("mask_file", path_str(mask_file))];
    if let Some(p) = checkpoint {
        extra.push(("checkpoint", path_str(p)));
    }
    cfg.write(out, EVAL_KEYS, &extra)?;
    let s = report.summary();
    println!(
        "{} / {}: PSNR {:.3} ± {:.3} dB, SSIM {:.4} ± {:.4} (n = {})",
        report.mask, report.recon, s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std, s.n
    );
    Ok(())
}

fn cmd_mask(cfg: &RunConfig, kind: &str, out: &Path) -> Result<()> {
    let kind: BaselineKind = kind.parse()?;
    let side: usize = cfg.get("side")?;
    let alpha: f64 = cfg.get("alpha")?;
    let mut rng = SeededRng::new(cfg.get("seed")?, STREAM_BASELINE).rng();
    let m = mask::baseline_mask(kind, alpha, side, &mut rng)?;
    create_dir(out)?;
    mask::write_mask(&out.join("mask.bin"), &m, side, kind.code())?;
    mask::write_mask_pgm(&out.join("mask.pgm"), &m, side)?;
    cfg.write(out, &["seed", "alpha", "side"], &[("kind", kind.code().to_string())])
}

fn cmd_render(mask_file: &Path, ordering: &str, out: &Path) -> Result<()> {
    if ordering != "2d-sequency" {
        return Err(Error::invalid(format!("unsupported ordering `{ordering}`")));
    }
    let (m, manifest) = mask::read_mask(mask_file)?;
    if manifest.side * manifest.side != m.len() {
        return Err(Error::Shape(format!("{} coefficients do not form a square", m.len())));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    mask::write_mask_pgm(out, &m, manifest.side)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            kind,
            count,
            side,
            peak,
            train,
            val,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("kind", kind),
                    ("count", opt(&count)),
                    ("side", opt(&side)),
                    ("peak", opt(&peak)),
                    ("train", opt(&train)),
                    ("val", opt(&val)),
                ],
            )?;
            cmd_synth(&cfg, &common.out)
        }
        Command::Prepare {
            common,
            input,
            grid,
            train,
            val,
            test,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("grid", opt(&grid)),
                    ("train", opt(&train)),
                    ("val", opt(&val)),
                    ("test", opt(&test)),
                ],
            )?;
            cmd_prepare(&cfg, &input, &common.out)
        }
        Command::Train {
            common,
            data,
            alpha,
            s,
            tau,
            mask,
            recon,
            epochs,
            mode,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("alpha", opt(&alpha)),
                    ("s", opt(&s)),
                    ("tau", opt(&tau)),
                    ("mask", mask),
                    ("recon", recon),
                    ("epochs", opt(&epochs)),
                    ("mode", mode),
                ],
            )?;
            cmd_train(&cfg, &data, &common.out)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            mask_file,
            recon,
            s,
            mode,
        } => {
            let cfg = resolve(&common, &[("recon", recon), ("s", opt(&s)), ("mode", mode)])?;
            cmd_eval(&cfg, &data, checkpoint.as_deref(), &mask_file, &common.out)
        }
        Command::Mask {
            common,
            kind,
            alpha,
            side,
        } => {
            let cfg = resolve(&common, &[("alpha", opt(&alpha)), ("side", opt(&side))])?;
            cmd_mask(&cfg, &kind, &common.out)
        }
        Command::RenderMask { mask_file, ordering, out } => {
            cmd_render(&mask_file, ordering.as_deref().unwrap_or("2d-sequency"), &out)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
