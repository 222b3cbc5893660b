//! Command-line front end for the codec simulator.
//!
//! Subcommands: `gen-data` (synthetic dataset), `train` (staged strategies),
//! `eval` (PSNR-vs-SNR with repeated trials), `sweep` (the TrainXTransY
//! matrix), `gradcheck` (finite-difference oracle suite), `reconstruct`
//! (single-image round trip for visual inspection). Exit code 0 on success,
//! nonzero with a one-line diagnostic otherwise. `SAFE_THREADS` bounds the
//! evaluation worker count (0 or unset = all cores).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use safe_core::channel::{ChannelKind, ChannelSpec};
use safe_core::config::{synthetic_spec_from_file, TrainSettings};
use safe_core::data;
use safe_core::data::SyntheticSpec;
use safe_core::eval::{self, EvalConfig};
use safe_core::net::load_checkpoint;
use safe_core::rng::Rng;
use safe_core::tensor::gradcheck;
use safe_core::train;

#[derive(Parser)]
#[command(name = "safe-sim", version, about = "Bandwidth-adaptive image codec simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PPM dataset.
    GenData {
        /// Plain-text spec file (keys: count, height, width, seed).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for the .ppm files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with one of the staged strategies.
    Train {
        /// Training strategy.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        strategy: u8,
        /// Plain-text config file; every key has a default.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of .ppm training images.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoints, reports, materialized test split).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: PSNR vs SNR over repeated trials, to CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of .ppm test images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "awgn")]
        channel: ChannelKind,
        /// Comma-separated SNR grid in dB.
        #[arg(long, default_value = "0,5,10,15,20", value_delimiter = ',')]
        snrs: Vec<f64>,
        /// Subset policy: 1 transmits branch 0, 2 transmits all branches.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 2)]
        trans: u8,
        /// Pipeline level (defaults to --trans): 1 evaluates the level-1
        /// groups, 2 the groups stage B installed.
        #[arg(long)]
        trainx: Option<u8>,
        #[arg(long, default_value_t = 32)]
        trials: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        csv: PathBuf,
        /// Skip the channel entirely (autoencoder reference).
        #[arg(long, default_value_t = false)]
        noiseless: bool,
    },
    /// Evaluate the full TrainXTransY matrix into one CSV.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "awgn")]
        channel: ChannelKind,
        #[arg(long, default_value = "0,5,10,15,20", value_delimiter = ',')]
        snrs: Vec<f64>,
        #[arg(long, default_value_t = 32)]
        trials: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run the finite-difference gradient oracle over every op.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Transmit one image through the pipeline and write the reconstruction.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input .ppm image.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output .ppm reconstruction.
        #[arg(long)]
        out: PathBuf,
        /// Channel SNR in dB.
        #[arg(long)]
        snr: f64,
        #[arg(long, default_value = "awgn")]
        channel: ChannelKind,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 2)]
        trans: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec = match spec {
                Some(p) => synthetic_spec_from_file(&p)?,
                None => SyntheticSpec::default(),
            };
            let ds = data::synth_dataset(&spec)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("create {}", out.display()))?;
            for i in 0..ds.len() {
                let t = safe_core::Tensor::from_vec(
                    &[3, ds.height(), ds.width()],
                    ds.sample(i).to_vec(),
                )?;
                data::save_ppm(&t, &out.join(format!("img_{i:05}.ppm")))?;
            }
            println!(
                "wrote {} images ({}x{}, seed {}) to {}",
                ds.len(),
                ds.width(),
                ds.height(),
                spec.seed,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Train { strategy, config, data: data_dir, out } => {
            let settings = match config {
                Some(p) => TrainSettings::from_file(&p)?,
                None => TrainSettings::default(),
            };
            let dataset = data::load_dir(&data_dir)?;
            let parts = data::split(&dataset, &settings.split_fractions(), settings.seed)?;
            let (train_set, val_set, test_set) = (&parts[0], &parts[1], &parts[2]);
            let net_config = settings.safe_config(dataset.height(), dataset.width());
            let plan = settings.train_plan(strategy);

            std::fs::create_dir_all(&out).with_context(|| format!("create {}", out.display()))?;
            let test_dir = out.join("test");
            std::fs::create_dir_all(&test_dir)?;
            for i in 0..test_set.len() {
                let t = safe_core::Tensor::from_vec(
                    &[3, test_set.height(), test_set.width()],
                    test_set.sample(i).to_vec(),
                )?;
                data::save_ppm(&t, &test_dir.join(format!("img_{i:05}.ppm")))?;
            }

            let (_, reports) = train::run(train_set, val_set, &net_config, &plan, Some(&out))?;
            for r in &reports {
                println!(
                    "{}: {} epochs ({}), initial val {:.6e}, best val {:.6e} at epoch {}, {:.1}s",
                    r.stage,
                    r.stop_epoch,
                    r.stop_reason,
                    r.initial_val_loss,
                    r.best_val_loss,
                    r.best_epoch,
                    r.wall_seconds
                );
            }
            println!(
                "checkpoints and reports in {}, test split in {}",
                out.display(),
                test_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            checkpoint,
            data: data_dir,
            channel,
            snrs,
            trans,
            trainx,
            trials,
            seed,
            csv,
            noiseless,
        } => {
            let net = load_checkpoint(&checkpoint)?;
            let dataset = data::load_dir(&data_dir)?;
            let cfg = EvalConfig {
                channel,
                snrs_db: snrs,
                trans,
                train_x: trainx.unwrap_or(trans),
                trials,
                seed,
                noiseless,
                threads: 0, // 0 = SAFE_THREADS env or all cores
            };
            let records = eval::evaluate(&net, &dataset, &cfg)?;
            eval::write_csv(&records, &csv)?;
            for r in &records {
                println!(
                    "strategy {} train{}trans{} {} snr {:>6.1} dB: psnr {:.4} +/- {:.4} dB ({} trials)",
                    r.strategy, r.train_x, r.trans_y, r.channel, r.snr_db, r.mean_psnr_db, r.std_psnr_db, r.trials
                );
            }
            println!("csv written to {}", csv.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Sweep {
            checkpoint,
            data: data_dir,
            channel,
            snrs,
            trials,
            seed,
            csv,
        } => {
            let net = load_checkpoint(&checkpoint)?;
            let dataset = data::load_dir(&data_dir)?;
            let records =
                eval::sweep(&net, &dataset, channel, &snrs, trials, seed, 0)?;
            eval::write_csv(&records, &csv)?;
            println!("{} records written to {}", records.len(), csv.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Gradcheck { points, tolerance, seed } => {
            let reports = gradcheck::standard_suite(points, tolerance, seed);
            let mut ok = true;
            for r in &reports {
                println!("{r}");
                ok &= r.passed();
            }
            if ok {
                Ok(ExitCode::SUCCESS)
            } else {
                bail!("gradient check failed");
            }
        }

        Command::Reconstruct {
            checkpoint,
            input,
            out,
            snr,
            channel,
            trans,
            seed,
        } => {
            let net = load_checkpoint(&checkpoint)?;
            let img = data::load_ppm(&input)?;
            let shape = img.shape();
            let (h, w) = (shape[1], shape[2]);
            let expected = net.config().input_hw;
            if (h, w) != expected {
                bail!(
                    "{} is {h}x{w} but the checkpoint expects {}x{}",
                    input.display(),
                    expected.0,
                    expected.1
                );
            }
            let batched = safe_core::Tensor::from_vec(&[1, 3, h, w], img.to_vec())?;
            let spec = ChannelSpec::new(channel, snr)?;
            let subset: Vec<usize> = if trans == 1 {
                vec![0]
            } else {
                (0..net.config().branches).collect()
            };
            let run = net.forward_pipeline_routed(
                &batched,
                Some(&spec),
                &subset,
                trans,
                &mut Rng::from_seed(seed),
            )?;
            let recon = run.reconstruction.clamped(0.0, 1.0);
            let flat = safe_core::Tensor::from_vec(&[3, h, w], recon.to_vec())?;
            data::save_ppm(&flat, &out)?;
            let quality = eval::psnr(&batched, &recon)?;
            println!(
                "reconstructed {} -> {} ({} at {snr} dB, {} branches, psnr {quality:.4} dB)",
                input.display(),
                out.display(),
                channel,
                subset.len()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
