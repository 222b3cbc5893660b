//! PSNR metrics, repeated-trial SNR sweeps, and CSV emission.
//!
//! Evaluation runs the end-to-end pipeline once per test image per trial;
//! each image is its own transmission with independent channel realizations
//! per branch. The per-trial value is the image-averaged PSNR, and a sweep
//! record carries mean and population standard deviation across trials.
//! Trials parallelize across a worker pool with per-trial derived seeds, so
//! results are independent of the worker count.
//!
//! CSV schema (sorted by all key fields, numbers at 4 decimal places,
//! saturated values as the literal token `inf`):
//!
//! ```text
//! strategy,trainX,transY,channel,snr_db,mean_psnr_db,std_psnr_db,trials
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::channel::{ChannelKind, ChannelSpec};
use crate::data::ImageDataset;
use crate::net::{NetError, SafeNetwork};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint/data mismatch: {0}")]
    Mismatch(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Peak signal-to-noise ratio in dB with peak 1.0 (images are normalized);
/// identical inputs saturate to `f64::INFINITY`, reported as `inf` in CSV.
pub fn psnr(reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<f64, EvalError> {
    if reference.shape() != test.shape() {
        return Err(EvalError::InvalidConfig(format!(
            "psnr shapes differ: {:?} vs {:?}",
            reference.shape(),
            test.shape()
        )));
    }
    let a = reference.to_vec();
    let b = test.to_vec();
    let mse: f64 = a
        .iter()
        .zip(&b)
        .map(|(&u, &v)| {
            let d = (u - v) as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// One sweep to run: channel, SNR grid, subset policy, repeat count.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub channel: ChannelKind,
    pub snrs_db: Vec<f64>,
    /// Subset policy: 1 transmits branch 0 only, 2 transmits all branches.
    pub trans: u8,
    /// Which trained level's pipeline decodes (Train1 keeps the originals,
    /// Train2 uses the groups its strategy installed). Defaults to `trans`.
    pub train_x: u8,
    pub trials: u32,
    pub seed: u64,
    /// Skip normalization and channel noise entirely (the autoencoder path);
    /// records carry `snr_db = inf`.
    pub noiseless: bool,
    /// Worker bound for parallel trials; 0 = `SAFE_THREADS` env or all cores.
    pub threads: usize,
}

impl EvalConfig {
    pub fn new(channel: ChannelKind, snrs_db: Vec<f64>, trans: u8, trials: u32, seed: u64) -> Self {
        EvalConfig {
            channel,
            snrs_db,
            train_x: trans,
            trans,
            trials,
            seed,
            noiseless: false,
            threads: 0,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.trials == 0 {
            return Err(EvalError::InvalidConfig("trials must be >= 1".into()));
        }
        if !self.noiseless && self.snrs_db.is_empty() {
            return Err(EvalError::InvalidConfig("snr list must be non-empty".into()));
        }
        if self.snrs_db.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::InvalidConfig("snr values must be finite".into()));
        }
        if !(1..=2).contains(&self.trans) || !(1..=2).contains(&self.train_x) {
            return Err(EvalError::InvalidConfig(format!(
                "trans and train_x must be 1 or 2, got {} and {}",
                self.trans, self.train_x
            )));
        }
        Ok(())
    }
}

/// One row of evaluation output.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub strategy: u8,
    pub train_x: u8,
    pub trans_y: u8,
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub mean_psnr_db: f64,
    pub std_psnr_db: f64,
    pub trials: u32,
}

fn worker_count(requested: usize) -> usize {
    let n = if requested > 0 {
        requested
    } else {
        std::env::var("SAFE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0)
    };
    if n > 0 {
        n
    } else {
        std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1)
    }
}

/// Evaluates a network over a test set: for every SNR and trial, a fresh
/// generator derived from `(seed, trial)` drives one pipeline run per image,
/// and the image-averaged PSNRs aggregate into mean/std across trials.
pub fn evaluate(
    net: &SafeNetwork,
    dataset: &ImageDataset,
    cfg: &EvalConfig,
) -> Result<Vec<SweepRecord>, EvalError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(EvalError::InvalidConfig("dataset is empty".into()));
    }
    let (h, w) = net.config().input_hw;
    if dataset.height() != h || dataset.width() != w {
        return Err(EvalError::Mismatch(format!(
            "checkpoint expects {h}x{w} images, dataset is {}x{}",
            dataset.height(),
            dataset.width()
        )));
    }
    let subset: Vec<usize> = if cfg.trans == 1 {
        vec![0]
    } else {
        (0..net.config().branches).collect()
    };
    if cfg.train_x == 2 && net.config().branches < 2 {
        return Err(EvalError::Mismatch(
            "train_x 2 requires a two-branch checkpoint".into(),
        ));
    }

    // Each worker rebuilds its own network copy from bytes; the graph type is
    // single-threaded by design.
    let bytes = Arc::new(net.to_bytes());
    let snr_points: Vec<Option<f64>> = if cfg.noiseless {
        vec![None]
    } else {
        cfg.snrs_db.iter().copied().map(Some).collect()
    };

    let threads = worker_count(cfg.threads).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvalError::InvalidConfig(format!("worker pool: {e}")))?;

    // trial-major results: per_trial[t][k] = image-averaged PSNR at snr k
    let per_trial: Vec<Result<Vec<f64>, EvalError>> = pool.install(|| {
        use rayon::prelude::*;
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let net = SafeNetwork::from_bytes(&bytes)?;
                let mut out = Vec::with_capacity(snr_points.len());
                for snr in &snr_points {
                    let spec = snr
                        .map(|s| ChannelSpec::new(cfg.channel, s))
                        .transpose()
                        .map_err(NetError::from)?;
                    let mut rng = Rng::from_seed(derive_seed(cfg.seed, &[t as u64]));
                    let mut sum = 0.0f64;
                    for i in 0..dataset.len() {
                        let img = dataset.sample_tensor(i);
                        let run = net.forward_pipeline_routed(
                            &img,
                            spec.as_ref(),
                            &subset,
                            cfg.train_x,
                            &mut rng,
                        )?;
                        let recon = run.reconstruction.clamped(0.0, 1.0);
                        sum += psnr(&img, &recon)?;
                    }
                    out.push(sum / dataset.len() as f64);
                }
                Ok(out)
            })
            .collect()
    });

    let mut trial_values: Vec<Vec<f64>> = Vec::with_capacity(cfg.trials as usize);
    for r in per_trial {
        trial_values.push(r?);
    }

    let mut records = Vec::with_capacity(snr_points.len());
    for (k, snr) in snr_points.iter().enumerate() {
        let vals: Vec<f64> = trial_values.iter().map(|v| v[k]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = if mean.is_finite() {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        } else {
            0.0
        };
        records.push(SweepRecord {
            strategy: net.strategy(),
            train_x: cfg.train_x,
            trans_y: cfg.trans,
            channel: cfg.channel,
            snr_db: snr.unwrap_or(f64::INFINITY),
            mean_psnr_db: mean,
            std_psnr_db: std,
            trials: cfg.trials,
        });
    }
    sort_records(&mut records);
    Ok(records)
}

/// Runs the TrainXTransY matrix — (1,1), (2,1), (2,2) — over one channel and
/// SNR grid, with the same seed for every cell.
pub fn sweep(
    net: &SafeNetwork,
    dataset: &ImageDataset,
    channel: ChannelKind,
    snrs_db: &[f64],
    trials: u32,
    seed: u64,
    threads: usize,
) -> Result<Vec<SweepRecord>, EvalError> {
    let mut cells: Vec<(u8, u8)> = vec![(1, 1)];
    if net.config().branches >= 2 {
        cells.push((2, 1));
        cells.push((2, 2));
    }
    let mut records = Vec::new();
    for (train_x, trans) in cells {
        let cfg = EvalConfig {
            channel,
            snrs_db: snrs_db.to_vec(),
            trans,
            train_x,
            trials,
            seed,
            noiseless: false,
            threads,
        };
        records.extend(evaluate(net, dataset, &cfg)?);
    }
    sort_records(&mut records);
    Ok(records)
}

fn sort_records(records: &mut [SweepRecord]) {
    records.sort_by(|a, b| {
        (a.strategy, a.train_x, a.trans_y, a.channel)
            .cmp(&(b.strategy, b.train_x, b.trans_y, b.channel))
            .then(a.snr_db.partial_cmp(&b.snr_db).expect("snr is not NaN"))
    });
}

const CSV_HEADER: &str = "strategy,trainX,transY,channel,snr_db,mean_psnr_db,std_psnr_db,trials";

/// Writes records (re-sorted by all key fields) with 4-decimal numbers.
pub fn write_csv(records: &[SweepRecord], path: &Path) -> Result<(), EvalError> {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &sorted {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{}\n",
            r.strategy, r.train_x, r.trans_y, r.channel, r.snr_db, r.mean_psnr_db, r.std_psnr_db, r.trials
        ));
    }
    fs::write(path, out).map_err(|e| EvalError::Csv(format!("write {}: {e}", path.display())))
}

/// Parses a CSV produced by [`write_csv`].
pub fn parse_csv(path: &Path) -> Result<Vec<SweepRecord>, EvalError> {
    let text =
        fs::read_to_string(path).map_err(|e| EvalError::Csv(format!("read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(EvalError::Csv(format!(
                "unexpected header {other:?} (expected '{CSV_HEADER}')"
            )))
        }
    }
    let mut records = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(EvalError::Csv(format!(
                "line {}: expected 8 fields, got {}",
                no + 2,
                fields.len()
            )));
        }
        let parse_err = |what: &str| EvalError::Csv(format!("line {}: bad {what}", no + 2));
        records.push(SweepRecord {
            strategy: fields[0].parse().map_err(|_| parse_err("strategy"))?,
            train_x: fields[1].parse().map_err(|_| parse_err("trainX"))?,
            trans_y: fields[2].parse().map_err(|_| parse_err("transY"))?,
            channel: fields[3].parse().map_err(EvalError::Csv)?,
            snr_db: fields[4].parse().map_err(|_| parse_err("snr_db"))?,
            mean_psnr_db: fields[5].parse().map_err(|_| parse_err("mean_psnr_db"))?,
            std_psnr_db: fields[6].parse().map_err(|_| parse_err("std_psnr_db"))?,
            trials: fields[7].parse().map_err(|_| parse_err("trials"))?,
        });
    }
    Ok(records)
}
