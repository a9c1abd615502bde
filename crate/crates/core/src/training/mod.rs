//! Losses, optimizer and the training loop.

mod loss;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{motion_loss, mpjpe_loss, total_loss, LossConfig, LossTerms};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::dataio::WindowedDataset;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::metrics;
use crate::network::{save_checkpoint, HDFormer};
use crate::numerics::{Tape, Tensor};

/// Everything that shapes a training run apart from the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Stops after this many optimizer steps, possibly mid-epoch.
    pub max_steps: Option<u64>,
    /// Windows per forward pass during validation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            max_steps: None,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        self.loss.validate(frames)?;
        self.optimizer.validate()?;
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Side outputs of a run.
#[derive(Debug, Clone, Default)]
pub struct TrainSetup {
    /// Seed for shuffling and dropout.
    pub seed: u64,
    /// JSON-lines log, one record per epoch.
    pub log_path: Option<PathBuf>,
    /// Receives `best.ckpt` and `last.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stored in every checkpoint header.
    pub extra: serde_json::Value,
    /// Multiplies validation errors, e.g. to report millimetres for
    /// normalised targets. `None` means 1.
    pub target_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Optimizer steps completed so far.
    pub steps: u64,
    pub loss: f64,
    pub position_loss: f64,
    pub motion_loss: f64,
    pub val_mpjpe: Option<f64>,
    /// Seconds spent in this epoch.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.step_losses.last().copied()
    }
}

/// MPJPE of `model` on every window of `ds`, evaluated without dropout.
pub fn evaluate_mpjpe(model: &HDFormer, ds: &WindowedDataset, batch: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluate", "dataset has no windows"));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = ds.batch(chunk)?;
        let pred = model.predict(&x)?;
        total += metrics::mpjpe(&pred, &y)? * chunk.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

struct StepLoss {
    total: f64,
    position: f64,
    motion: f64,
}

fn train_step(
    model: &mut HDFormer,
    x: Tensor,
    y: Tensor,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let mut cx = Ctx {
        tape: &mut tape,
        vars: &vars,
        train: true,
        rng,
        recorder: None,
    };
    let xv = cx.tape.constant(x);
    let yv = cx.tape.constant(y);
    let pred = model.forward(&mut cx, xv)?;
    let terms = total_loss(&mut tape, pred, yv, &cfg.loss)?;
    let value = |v| tape.value(v).data()[0];
    let loss = StepLoss {
        total: value(terms.total),
        position: value(terms.position),
        motion: terms.motion.map_or(0.0, value),
    };
    if !loss.total.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss at step {} (position {}, motion {})",
            model.state.step + 1,
            loss.position,
            loss.motion
        )));
    }
    let grads = tape.backward(terms.total)?;
    let params = model.params_mut();
    params.store_grads(&grads, &vars);
    opt.step(params, lr)?;
    params.zero_grads();
    model.state.step += 1;
    Ok(loss)
}

/// Runs the epoch schedule on `train_ds`, validating on `val_ds` after each
/// epoch. The outcome depends only on the model, data, config and seed.
pub fn train(
    model: &mut HDFormer,
    train_ds: &WindowedDataset,
    val_ds: Option<&WindowedDataset>,
    cfg: &TrainConfig,
    setup: &TrainSetup,
) -> Result<TrainReport> {
    cfg.validate(model.config().frames)?;
    if train_ds.is_empty() {
        return Err(Error::Training("training set has no windows".into()));
    }
    if train_ds.frames != model.config().frames || train_ds.joints != model.config().joints {
        return Err(Error::Config(format!(
            "dataset windows are {}x{} but the model expects {}x{}",
            train_ds.frames,
            train_ds.joints,
            model.config().frames,
            model.config().joints
        )));
    }
    let mut log = match &setup.log_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    if let Some(dir) = &setup.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let scale = setup.target_scale.unwrap_or(1.0);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(setup.seed);
    dropout_rng.set_stream(1);
    let mut opt = Optimizer::new(&cfg.optimizer, model.params());
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: None,
    };
    let mut best = f64::INFINITY;
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let budget = cfg.max_steps.unwrap_or(u64::MAX);

    for epoch in 0..cfg.optimizer.epochs {
        if opt.steps() >= budget {
            break;
        }
        let started = Instant::now();
        let lr = cfg.optimizer.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut pos, mut mot, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            let (x, y) = train_ds.batch(chunk)?;
            let l = train_step(model, x, y, cfg, &mut opt, lr, &mut dropout_rng)?;
            report.step_losses.push(l.total);
            sum += l.total;
            pos += l.position;
            mot += l.motion;
            batches += 1;
            if opt.steps() >= budget {
                break;
            }
        }
        let val = val_ds
            .map(|v| evaluate_mpjpe(model, v, cfg.eval_batch).map(|e| e * scale))
            .transpose()?;
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            lr,
            steps: opt.steps(),
            loss: sum / n,
            position_loss: pos / n,
            motion_loss: mot / n,
            val_mpjpe: val,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} lr {lr:.3e} loss {:.6} val {}",
            record.loss,
            val.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
        if let Some(w) = log.as_mut() {
            let line =
                serde_json::to_string(&record).map_err(|e| Error::Training(e.to_string()))?;
            let p = setup.log_path.as_ref().expect("log path set");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(p, e))?;
        }
        let score = val.unwrap_or(record.loss);
        if score < best {
            best = score;
            report.best_epoch = Some(epoch);
            if let Some(dir) = &setup.checkpoint_dir {
                save_checkpoint(dir.join("best.ckpt"), model, &setup.extra)?;
            }
        }
        report.epochs.push(record);
        if opt.steps() >= budget {
            break;
        }
    }
    if let Some(dir) = &setup.checkpoint_dir {
        save_checkpoint(dir.join("last.ckpt"), model, &setup.extra)?;
    }
    Ok(report)
}
