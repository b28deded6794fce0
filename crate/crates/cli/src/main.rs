//! `spach` — train, run and verify the volumetric denoising transformer.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use spach_core::data::{
    cnr, dose_reduce, generate_phantom, psnr, read_volume, ssim, write_volume, PhantomSpec,
    RoiSpec,
};
use spach_core::model::{load_weights, param_count, ModelConfig};
use spach_core::train::{denoise_volume, parse_config_file, train};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "spach", version, about = "Dual-path 3D transformer for volumetric denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic phantoms from a key=value config file
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Denoise an SPV volume with trained weights
    Denoise {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a PSNR/SSIM/CNR table for a prediction against a reference
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// JSON ROI file (as written by `phantom`) enabling CNR rows
        #[arg(long)]
        rois: Option<PathBuf>,
    },
    /// Run the fp64 finite-difference verification suite
    Gradcheck,
    /// Print model parameter counts (sweeps C over 6..48 when --C is omitted)
    Params {
        #[arg(long = "C")]
        channels: Option<usize>,
    },
    /// Generate a phantom: clean volume, low-dose input and ROI file
    Phantom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume extents as D,H,W
        #[arg(long, default_value = "24,24,24")]
        dims: String,
        #[arg(long, default_value_t = 0.25)]
        dose_fraction: f64,
        #[arg(long, default_value_t = 25.0)]
        dose_scale: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// ROI sidecar written by `phantom` and consumed by `eval --rois`.
#[derive(Serialize, Deserialize)]
struct RoiFile {
    reference: Option<RoiSpec>,
    tumors: Vec<RoiSpec>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { config } => {
            let (train_cfg, model_cfg) =
                parse_config_file(&config).context("reading training config")?;
            println!(
                "training C={} window={} crop={} for {} epochs x {} steps",
                model_cfg.base_channels,
                model_cfg.window,
                train_cfg.crop_size,
                train_cfg.epochs,
                train_cfg.steps_per_epoch
            );
            let report = train(&train_cfg, &model_cfg)?;
            println!("first step loss   {:.6}", report.first_step_loss);
            println!("tail mean loss    {:.6}", report.tail_mean_loss);
            println!("noisy val psnr    {:.3} dB", report.noisy_val_psnr);
            println!("final val psnr    {:.3} dB", report.final_val_psnr);
            println!("final val ssim    {:.4}", report.final_val_ssim);
            println!("metrics csv       {}", report.csv_path.display());
            println!("final checkpoint  {}", train_cfg.out_dir.join("final.spw").display());
            Ok(())
        }
        Command::Denoise { weights, input, out } => {
            let w = load_weights(&weights).context("loading weights")?;
            let volume = read_volume(&input).context("reading input volume")?;
            let denoised = denoise_volume(&w, &volume)?;
            write_volume(&denoised, &out).context("writing output volume")?;
            println!("denoised {} -> {}", input.display(), out.display());
            Ok(())
        }
        Command::Eval { pred, reference, rois } => {
            let p = read_volume(&pred).context("reading prediction")?;
            let r = read_volume(&reference).context("reading reference")?;
            println!("{:<16} value", "metric");
            println!("{:<16} {}", "psnr_db", psnr(&p, &r)?);
            println!("{:<16} {}", "ssim", ssim(&p, &r)?);
            if let Some(path) = rois {
                let text = std::fs::read_to_string(&path).context("reading ROI file")?;
                let file: RoiFile = serde_json::from_str(&text).context("parsing ROI file")?;
                let reference_roi = file
                    .reference
                    .ok_or_else(|| anyhow::anyhow!("ROI file has no reference region"))?;
                for tumor in &file.tumors {
                    let value = cnr(&p, tumor, &reference_roi)?;
                    println!("cnr[{}]{:<pad$} {}", tumor.label, "", value,
                        pad = 16usize.saturating_sub(5 + tumor.label.len()));
                }
            }
            Ok(())
        }
        Command::Gradcheck => {
            let reports = spach_core::gradcheck::full_suite();
            let mut failed = 0usize;
            for r in &reports {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "{status}  {:<26} max_rel_err={:.3e}  tol={:.0e}  coords={}",
                    r.name, r.max_rel_err, r.tolerance, r.coords_checked
                );
                if !r.passed() {
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", reports.len(), failed);
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
            Ok(())
        }
        Command::Params { channels } => {
            let sweep: Vec<usize> = match channels {
                Some(c) => vec![c],
                None => vec![6, 12, 24, 36, 48],
            };
            for c in sweep {
                let config = ModelConfig::with_channels(c);
                config.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
                println!("C={c} params={}", param_count(&config));
            }
            Ok(())
        }
        Command::Phantom { seed, dims, dose_fraction, dose_scale, out_dir } => {
            let parts: Vec<usize> = dims
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .context("parsing --dims as D,H,W")?;
            if parts.len() != 3 {
                bail!("--dims needs exactly three extents, got {dims}");
            }
            let spec =
                PhantomSpec { seed, dims: [parts[0], parts[1], parts[2]], ..PhantomSpec::default() };
            let phantom = generate_phantom(&spec)?;
            let noisy = dose_reduce(&phantom.volume, dose_fraction, dose_scale, seed ^ 0x5eed);
            std::fs::create_dir_all(&out_dir)?;
            write_volume(&phantom.volume, &out_dir.join("clean.spv"))?;
            write_volume(&noisy, &out_dir.join("input.spv"))?;
            let rois = RoiFile { reference: phantom.reference, tumors: phantom.tumors };
            std::fs::write(out_dir.join("rois.json"), serde_json::to_string_pretty(&rois)?)?;
            println!("wrote clean.spv, input.spv, rois.json to {}", out_dir.display());
            Ok(())
        }
    }
}
