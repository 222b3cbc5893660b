//! MSE training with Adam, early stopping, and the three staged strategies.
//!
//! Every strategy first trains the level-1 network (trunk, branch-0 coders,
//! combining decoder) with branch 1 zero-filled (stage A), then hands off to
//! a stage B that brings branch 1 up:
//!
//! - Strategy 1 freezes everything from stage A and trains only the branch-1
//!   coder pair.
//! - Strategy 2 additionally clones the combining decoder to `sc_decoder_2`
//!   (trained at a low rate) so the level-1 decode path is never disturbed.
//! - Strategy 3 clones trunk and decoder (`sm_encoder_2`, `sc_decoder_2`,
//!   both low rate) and trains them together with the branch-1 coders; only
//!   the branch-0 coders stay frozen.
//!
//! At the stage hand-off the final conv of `sfr_decoder.1` is zeroed, so the
//! two-branch pipeline initially reproduces the stage-A computation exactly
//! and training can only improve on it.
//!
//! Training is strictly sequential and fully determined by `(seed, plan,
//! data)`. Channel noise is drawn fresh per batch and per branch; validation
//! noise comes from a fixed stream independent of epoch and stage, so
//! validation losses are comparable across both.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::channel::{ChannelError, ChannelKind, ChannelSpec};
use crate::data::ImageDataset;
use crate::net::{save_checkpoint, NetError, SafeConfig, SafeNetwork};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{ops, Parameter, TensorError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

// Tags for deriving independent noise streams from the plan seed.
const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_TRAIN_CHAN: u64 = 3;
const TAG_VAL_CHAN: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("no learning rate configured for parameter '{0}'")]
    NoLearningRate(String),
    #[error("transfer: {0}")]
    Transfer(String),
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Group-name-pattern to learning-rate map. A pattern matches a parameter
/// whose dotted name equals it or continues it after a dot; the longest
/// match wins, later entries win ties.
#[derive(Debug, Clone, Default)]
pub struct LrMap {
    entries: Vec<(String, f64)>,
}

impl LrMap {
    pub fn new() -> Self {
        LrMap::default()
    }

    pub fn with(mut self, pattern: impl Into<String>, lr: f64) -> Self {
        self.entries.push((pattern.into(), lr));
        self
    }

    pub fn insert(&mut self, pattern: impl Into<String>, lr: f64) {
        self.entries.push((pattern.into(), lr));
    }

    pub fn rate_for(&self, name: &str) -> Option<f64> {
        let mut best: Option<(usize, f64)> = None;
        for (pat, lr) in &self.entries {
            let matches = name == pat
                || (name.len() > pat.len()
                    && name.starts_with(pat.as_str())
                    && name.as_bytes()[pat.len()] == b'.');
            if matches {
                match best {
                    Some((len, _)) if pat.len() < len => {}
                    _ => best = Some((pat.len(), *lr)),
                }
            }
        }
        best.map(|(_, lr)| lr)
    }
}

/// What and how to train.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub strategy: u8,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub train_snr_db: f64,
    pub channel: ChannelKind,
    /// Stage-A rate, also used where a strategy gives no prescription.
    pub lr: f64,
    /// Stage-B rate for the branch-1 coder pair.
    pub lr_high: f64,
    /// Stage-B rate for transferred/cloned groups.
    pub lr_low: f64,
    /// Strategy 3 only: alternate epochs re-fit the cloned common layers on
    /// the single-branch task.
    pub alternate_levels: bool,
    /// Per-group overrides appended to every stage's rate map.
    pub lr_overrides: Vec<(String, f64)>,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            strategy: 2,
            batch_size: 64,
            patience: 20,
            max_epochs: 200,
            seed: 7,
            train_snr_db: 10.0,
            channel: ChannelKind::Awgn,
            lr: 1e-4,
            lr_high: 1e-4,
            lr_low: 1e-5,
            alternate_levels: false,
            lr_overrides: Vec::new(),
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(1..=3).contains(&self.strategy) {
            return Err(TrainError::InvalidPlan(format!(
                "strategy must be 1, 2 or 3, got {}",
                self.strategy
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidPlan("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidPlan("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::InvalidPlan("max_epochs must be >= 1".into()));
        }
        for (what, lr) in [("lr", self.lr), ("lr_high", self.lr_high), ("lr_low", self.lr_low)] {
            if !(lr > 0.0) {
                return Err(TrainError::InvalidPlan(format!("{what} must be > 0, got {lr}")));
            }
        }
        if let Some((pat, lr)) = self.lr_overrides.iter().find(|(_, lr)| !(*lr > 0.0)) {
            return Err(TrainError::InvalidPlan(format!(
                "override rate for '{pat}' must be > 0, got {lr}"
            )));
        }
        if !self.train_snr_db.is_finite() {
            return Err(TrainError::InvalidPlan("train_snr_db must be finite".into()));
        }
        Ok(())
    }
}

/// Adam moments; slots are keyed by parameter name and survive freezes.
#[derive(Debug, Default)]
pub struct AdamState {
    t: u64,
    slots: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction over the given parameters, using each
/// parameter's group-matched learning rate. Untrainable parameters are left
/// untouched; gradients of updated parameters are cleared afterward.
pub fn adam_step(
    params: &mut [&mut Parameter],
    state: &mut AdamState,
    lr_map: &LrMap,
) -> Result<(), TrainError> {
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for p in params.iter_mut() {
        if !p.trainable() {
            continue;
        }
        let lr = lr_map
            .rate_for(p.name())
            .ok_or_else(|| TrainError::NoLearningRate(p.name().to_string()))?;
        let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let (m, v) = state
            .slots
            .entry(p.name().to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        p.update_data(|data| {
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = (BETA1 as f32) * m[i] + (1.0 - BETA1 as f32) * g;
                v[i] = (BETA2 as f32) * v[i] + (1.0 - BETA2 as f32) * g * g;
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                data[i] -= (lr * m_hat / (v_hat.sqrt() + EPSILON)) as f32;
            }
        });
        p.zero_grad();
    }
    Ok(())
}

/// Makes every parameter of a group untrainable.
pub fn freeze_group(net: &mut SafeNetwork, group: &str) -> Result<(), TrainError> {
    net.set_group_trainable(group, false)?;
    Ok(())
}

/// Makes every parameter of a group trainable again.
pub fn unfreeze_group(net: &mut SafeNetwork, group: &str) -> Result<(), TrainError> {
    net.set_group_trainable(group, true)?;
    Ok(())
}

/// Copies parameter values from `src` into `dst` position-wise (no aliasing).
pub fn transfer_group(net: &mut SafeNetwork, src: &str, dst: &str) -> Result<(), TrainError> {
    let src_params: Vec<(String, Vec<usize>, Vec<f32>)> = net
        .group(src)?
        .params()
        .into_iter()
        .map(|p| (p.name().to_string(), p.shape(), p.data()))
        .collect();
    let dst_block = net.group_mut(dst)?;
    let mut dst_params = dst_block.params_mut();
    if dst_params.len() != src_params.len() {
        return Err(TrainError::Transfer(format!(
            "group '{src}' has {} parameters, '{dst}' has {}",
            src_params.len(),
            dst_params.len()
        )));
    }
    for (pos, ((src_name, src_shape, src_data), dst_p)) in
        src_params.iter().zip(dst_params.iter_mut()).enumerate()
    {
        if *src_shape != dst_p.shape() {
            return Err(TrainError::Transfer(format!(
                "shape mismatch at position {pos}: '{src_name}' is {src_shape:?}, '{}' is {:?}",
                dst_p.name(),
                dst_p.shape()
            )));
        }
        dst_p.set_data(src_data);
    }
    Ok(())
}

/// Early-stopping decision over a validation-loss history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the best (strictly lowest, first occurrence) loss lies more
/// than `patience` entries in the past.
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    if history.is_empty() {
        return StopDecision::Continue;
    }
    let mut best_idx = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < history[best_idx] {
            best_idx = i;
        }
    }
    if history.len() - 1 - best_idx > patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::Patience => write!(f, "patience"),
            StopReason::MaxEpochs => write!(f, "max_epochs"),
        }
    }
}

/// Outcome of one training stage. The validation series has exactly
/// `stop_epoch` entries (one per completed epoch); the pre-training
/// evaluation is kept separately in `initial_val_loss`.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stage: String,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Epoch of the best validation loss; 0 means the initial snapshot.
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    pub wall_seconds: f64,
    pub checkpoint_path: Option<PathBuf>,
}

/// Writes a report as a line-oriented plain-text table: comment lines start
/// with `#`, data rows are `epoch train_loss val_loss`.
pub fn write_report(report: &TrainReport, path: &Path) -> Result<(), TrainError> {
    let mut out = String::new();
    out.push_str(&format!("# stage {}\n", report.stage));
    out.push_str(&format!("# initial_val_loss {:.6e}\n", report.initial_val_loss));
    out.push_str("# epoch train_loss val_loss\n");
    for (i, (t, v)) in report.train_losses.iter().zip(&report.val_losses).enumerate() {
        out.push_str(&format!("{} {:.6e} {:.6e}\n", i + 1, t, v));
    }
    out.push_str(&format!("# stop_epoch {}\n", report.stop_epoch));
    out.push_str(&format!("# stop_reason {}\n", report.stop_reason));
    out.push_str(&format!("# best_epoch {}\n", report.best_epoch));
    out.push_str(&format!("# best_val_loss {:.6e}\n", report.best_val_loss));
    out.push_str(&format!("# wall_seconds {:.3}\n", report.wall_seconds));
    if let Some(p) = &report.checkpoint_path {
        out.push_str(&format!("# checkpoint {}\n", p.display()));
    }
    fs::write(path, out).map_err(|e| TrainError::Report(format!("write {}: {e}", path.display())))
}

/// Groups whose parameters a stage updates, with their rate map.
struct StageSpec {
    name: &'static str,
    subset: Vec<usize>,
    train_x: u8,
    update_groups: Vec<String>,
    lr_map: LrMap,
    alternate: bool,
}

fn param_snapshot(net: &SafeNetwork) -> Vec<Vec<f32>> {
    net.params().iter().map(|p| p.data()).collect()
}

fn restore_snapshot(net: &mut SafeNetwork, snapshot: &[Vec<f32>]) {
    for (p, data) in net.params_mut().iter_mut().zip(snapshot) {
        p.set_data(data);
    }
}

/// Mean Eq-style loss of the stage's pipeline over a dataset, with the fixed
/// validation noise stream (independent of epoch and stage).
fn validate_loss(
    net: &SafeNetwork,
    data: &ImageDataset,
    plan: &TrainPlan,
    subset: &[usize],
    train_x: u8,
) -> Result<f64, TrainError> {
    let spec = ChannelSpec::new(plan.channel, plan.train_snr_db)?;
    let idxs: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (b, chunk) in idxs.chunks(plan.batch_size).enumerate() {
        let batch = data.batch_tensor(chunk);
        let mut rng = Rng::from_seed(derive_seed(plan.seed, &[TAG_VAL_CHAN, b as u64]));
        let run = net.forward_pipeline_routed(&batch, Some(&spec), subset, train_x, &mut rng)?;
        let loss = ops::mse_loss(&run.reconstruction, &batch)?.item() as f64;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

fn run_stage(
    net: &mut SafeNetwork,
    train: &ImageDataset,
    val: &ImageDataset,
    plan: &TrainPlan,
    stage: StageSpec,
    stage_tag: u64,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::InvalidPlan(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let started = Instant::now();
    let spec = ChannelSpec::new(plan.channel, plan.train_snr_db)?;
    let mut state = AdamState::new();

    let initial_val = validate_loss(net, val, plan, &stage.subset, stage.train_x)?;
    let mut best_val = initial_val;
    let mut best_epoch = 0usize;
    let mut best_params = param_snapshot(net);

    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    // The stopping history starts with the initial evaluation, so a stage
    // that never improves on its hand-off still stops after `patience`.
    let mut history = vec![initial_val];

    for epoch in 1..=plan.max_epochs {
        // Strategy 3's optional correction: odd epochs run the normal
        // two-branch task, even epochs re-fit the cloned common layers on the
        // single-branch task.
        let correction_epoch = stage.alternate && epoch % 2 == 0;
        let (subset, active_groups): (&[usize], Option<[&str; 2]>) = if correction_epoch {
            (&[0], Some(["sm_encoder_2", "sc_decoder_2"]))
        } else {
            (&stage.subset, None)
        };

        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::from_seed(derive_seed(plan.seed, &[TAG_SHUFFLE, stage_tag, epoch as u64]))
            .shuffle(&mut order);

        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(plan.batch_size).enumerate() {
            let batch = train.batch_tensor(chunk);
            let mut rng = Rng::from_seed(derive_seed(
                plan.seed,
                &[TAG_TRAIN_CHAN, stage_tag, epoch as u64, b as u64],
            ));
            let run = net.forward_pipeline_routed(&batch, Some(&spec), subset, stage.train_x, &mut rng)?;
            let loss = ops::mse_loss(&run.reconstruction, &batch)?;
            epoch_loss += loss.item() as f64 * chunk.len() as f64;
            seen += chunk.len();
            loss.backward()?;

            {
                let mut params: Vec<&mut Parameter> = net
                    .params_mut()
                    .into_iter()
                    .filter(|p| {
                        stage.update_groups.iter().any(|g| owns(g, p.name()))
                            && active_groups
                                .map(|ag| ag.iter().any(|g| owns(g, p.name())))
                                .unwrap_or(true)
                    })
                    .collect();
                adam_step(&mut params, &mut state, &stage.lr_map)?;
            }
            // Drop gradients on parameters outside this epoch's update set
            // (branch coders on correction epochs).
            for p in net.params() {
                p.zero_grad();
            }
        }
        train_losses.push(epoch_loss / seen.max(1) as f64);

        let val_loss = validate_loss(net, val, plan, &stage.subset, stage.train_x)?;
        val_losses.push(val_loss);
        history.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = param_snapshot(net);
        }
        if early_stop_check(&history, plan.patience) == StopDecision::Stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    restore_snapshot(net, &best_params);
    Ok(TrainReport {
        stage: stage.name.to_string(),
        stop_epoch: val_losses.len(),
        train_losses,
        val_losses,
        initial_val_loss: initial_val,
        best_val_loss: best_val,
        best_epoch,
        stop_reason,
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint_path: None,
    })
}

fn owns(group: &str, param_name: &str) -> bool {
    param_name.len() > group.len()
        && param_name.starts_with(group)
        && param_name.as_bytes()[group.len()] == b'.'
}

fn stage_a_groups() -> Vec<String> {
    vec![
        "sm_encoder".to_string(),
        "sfe_encoder.0".to_string(),
        "sfr_decoder.0".to_string(),
        "sc_decoder".to_string(),
    ]
}

fn stage_a_spec(plan: &TrainPlan) -> StageSpec {
    let groups = stage_a_groups();
    let mut lr_map = LrMap::new();
    for g in &groups {
        lr_map.insert(g.clone(), plan.lr);
    }
    for (pat, lr) in &plan.lr_overrides {
        lr_map.insert(pat.clone(), *lr);
    }
    StageSpec {
        name: "stage_a",
        subset: vec![0],
        train_x: 1,
        update_groups: groups,
        lr_map,
        alternate: false,
    }
}

fn two_branch_subset(config: &SafeConfig) -> Vec<usize> {
    (0..config.branches).collect()
}

/// Zeroes the last conv of the branch-1 recovery decoder so the two-branch
/// pipeline starts exactly at the stage-A optimum.
fn zero_branch1_output(net: &mut SafeNetwork) -> Result<(), TrainError> {
    net.group_mut("sfr_decoder.1")?.zero_last_conv();
    Ok(())
}

fn checkpoint_to(
    net: &SafeNetwork,
    out_dir: Option<&Path>,
    file: &str,
    report: &mut TrainReport,
) -> Result<(), TrainError> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)
            .map_err(|e| TrainError::Report(format!("create {}: {e}", dir.display())))?;
        let path = dir.join(file);
        save_checkpoint(net, &path)?;
        report.checkpoint_path = Some(path);
        let report_path = dir.join(format!("report_{}.txt", report.stage));
        write_report(report, &report_path)?;
    }
    Ok(())
}

fn prepare(
    config: &SafeConfig,
    plan: &TrainPlan,
    strategy: u8,
) -> Result<SafeNetwork, TrainError> {
    plan.validate()?;
    if plan.strategy != strategy {
        return Err(TrainError::InvalidPlan(format!(
            "plan.strategy is {}, expected {strategy}",
            plan.strategy
        )));
    }
    if config.branches < 2 {
        return Err(TrainError::InvalidPlan(
            "staged strategies require at least two branches".into(),
        ));
    }
    let mut rng = Rng::from_seed(derive_seed(plan.seed, &[TAG_INIT]));
    let net = SafeNetwork::build(config, &mut rng)?;
    Ok(net)
}

/// Strategy 1: train level 1, freeze it, then train only the branch-1 coder
/// pair with both branches live.
pub fn run_strategy1(
    train: &ImageDataset,
    val: &ImageDataset,
    config: &SafeConfig,
    plan: &TrainPlan,
    out_dir: Option<&Path>,
) -> Result<(SafeNetwork, Vec<TrainReport>), TrainError> {
    let mut net = prepare(config, plan, 1)?;
    net.set_strategy(1);

    let mut report_a = run_stage(&mut net, train, val, plan, stage_a_spec(plan), 1)?;
    checkpoint_to(&net, out_dir, "stage_a.ckpt", &mut report_a)?;

    for g in stage_a_groups() {
        freeze_group(&mut net, &g)?;
    }
    zero_branch1_output(&mut net)?;

    let mut lr_map = LrMap::new()
        .with("sfe_encoder.1", plan.lr)
        .with("sfr_decoder.1", plan.lr);
    for (pat, lr) in &plan.lr_overrides {
        lr_map.insert(pat.clone(), *lr);
    }
    let stage_b = StageSpec {
        name: "stage_b",
        subset: two_branch_subset(config),
        train_x: 2,
        update_groups: vec!["sfe_encoder.1".into(), "sfr_decoder.1".into()],
        lr_map,
        alternate: false,
    };
    let mut report_b = run_stage(&mut net, train, val, plan, stage_b, 2)?;
    checkpoint_to(&net, out_dir, "final.ckpt", &mut report_b)?;
    Ok((net, vec![report_a, report_b]))
}

/// Strategy 2: as strategy 1, but the combining decoder is transferred to a
/// second instance that trains at a low rate while the branch-1 coders train
/// at a high rate. Level-1 transmissions keep decoding through the original.
pub fn run_strategy2(
    train: &ImageDataset,
    val: &ImageDataset,
    config: &SafeConfig,
    plan: &TrainPlan,
    out_dir: Option<&Path>,
) -> Result<(SafeNetwork, Vec<TrainReport>), TrainError> {
    let mut net = prepare(config, plan, 2)?;
    net.set_strategy(2);

    let mut report_a = run_stage(&mut net, train, val, plan, stage_a_spec(plan), 1)?;
    checkpoint_to(&net, out_dir, "stage_a.ckpt", &mut report_a)?;

    net.install_sc_decoder_alt();
    for g in stage_a_groups() {
        freeze_group(&mut net, &g)?;
    }
    unfreeze_group(&mut net, "sc_decoder_2")?;
    zero_branch1_output(&mut net)?;

    let mut lr_map = LrMap::new()
        .with("sfe_encoder.1", plan.lr_high)
        .with("sfr_decoder.1", plan.lr_high)
        .with("sc_decoder_2", plan.lr_low);
    for (pat, lr) in &plan.lr_overrides {
        lr_map.insert(pat.clone(), *lr);
    }
    let stage_b = StageSpec {
        name: "stage_b",
        subset: two_branch_subset(config),
        train_x: 2,
        update_groups: vec![
            "sfe_encoder.1".into(),
            "sfr_decoder.1".into(),
            "sc_decoder_2".into(),
        ],
        lr_map,
        alternate: false,
    };
    let mut report_b = run_stage(&mut net, train, val, plan, stage_b, 2)?;
    checkpoint_to(&net, out_dir, "final.ckpt", &mut report_b)?;
    Ok((net, vec![report_a, report_b]))
}

/// Strategy 3: freeze only the branch-0 coders; clone trunk and decoder and
/// train the clones (low rate) together with the branch-1 coders (high rate).
/// The two-branch pipeline then runs through the clones, while single-branch
/// transmission keeps the originals.
pub fn run_strategy3(
    train: &ImageDataset,
    val: &ImageDataset,
    config: &SafeConfig,
    plan: &TrainPlan,
    out_dir: Option<&Path>,
) -> Result<(SafeNetwork, Vec<TrainReport>), TrainError> {
    let mut net = prepare(config, plan, 3)?;
    net.set_strategy(3);

    let mut report_a = run_stage(&mut net, train, val, plan, stage_a_spec(plan), 1)?;
    checkpoint_to(&net, out_dir, "stage_a.ckpt", &mut report_a)?;

    net.install_sm_encoder_alt();
    net.install_sc_decoder_alt();
    freeze_group(&mut net, "sfe_encoder.0")?;
    freeze_group(&mut net, "sfr_decoder.0")?;
    unfreeze_group(&mut net, "sm_encoder_2")?;
    unfreeze_group(&mut net, "sc_decoder_2")?;
    zero_branch1_output(&mut net)?;

    let mut lr_map = LrMap::new()
        .with("sm_encoder_2", plan.lr_low)
        .with("sfe_encoder.1", plan.lr_high)
        .with("sfr_decoder.1", plan.lr_high)
        .with("sc_decoder_2", plan.lr_low);
    for (pat, lr) in &plan.lr_overrides {
        lr_map.insert(pat.clone(), *lr);
    }
    let stage_b = StageSpec {
        name: "stage_b",
        subset: two_branch_subset(config),
        train_x: 2,
        update_groups: vec![
            "sm_encoder_2".into(),
            "sfe_encoder.1".into(),
            "sfr_decoder.1".into(),
            "sc_decoder_2".into(),
        ],
        lr_map,
        alternate: plan.alternate_levels,
    };
    let mut report_b = run_stage(&mut net, train, val, plan, stage_b, 2)?;
    checkpoint_to(&net, out_dir, "final.ckpt", &mut report_b)?;
    Ok((net, vec![report_a, report_b]))
}

/// Dispatches on `plan.strategy`.
pub fn run(
    train: &ImageDataset,
    val: &ImageDataset,
    config: &SafeConfig,
    plan: &TrainPlan,
    out_dir: Option<&Path>,
) -> Result<(SafeNetwork, Vec<TrainReport>), TrainError> {
    match plan.strategy {
        1 => run_strategy1(train, val, config, plan, out_dir),
        2 => run_strategy2(train, val, config, plan, out_dir),
        3 => run_strategy3(train, val, config, plan, out_dir),
        s => Err(TrainError::InvalidPlan(format!("unknown strategy {s}"))),
    }
}

/// Validation loss of an arbitrary network under a plan's channel settings,
/// using the same fixed validation noise stream as training.
pub fn validation_loss(
    net: &SafeNetwork,
    val: &ImageDataset,
    plan: &TrainPlan,
    subset: &[usize],
    train_x: u8,
) -> Result<f64, TrainError> {
    validate_loss(net, val, plan, subset, train_x)
}
