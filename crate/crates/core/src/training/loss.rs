use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Weighting of the position and motion terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Frame offsets at which temporal displacements are compared.
    pub intervals: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            intervals: vec![1],
        }
    }
}

impl LossConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "loss.lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.intervals.is_empty() && self.lambda > 0.0 {
            return Err(Error::Config(
                "loss.intervals is empty but loss.lambda > 0".into(),
            ));
        }
        if let Some(&d) = self.intervals.iter().find(|&&d| d == 0 || d >= frames) {
            return Err(Error::Config(format!(
                "loss.intervals entry {d} must lie in 1..{frames}"
            )));
        }
        Ok(())
    }
}

fn same_poses(op: &'static str, tape: &Tape, pred: Var, gt: Var) -> Result<Vec<usize>> {
    let (ps, gs) = (tape.shape(pred), tape.shape(gt));
    if ps != gs {
        return Err(Error::shape(op, ps, gs));
    }
    if ps.len() != 4 || ps[3] != 3 {
        return Err(Error::invalid(
            op,
            format!("expected [B, T, J, 3], got {ps:?}"),
        ));
    }
    Ok(ps.to_vec())
}

/// Mean Euclidean distance over every joint of every frame.
pub fn mpjpe_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    same_poses("mpjpe_loss", tape, pred, gt)?;
    let d = tape.sub(pred, gt)?;
    let n = tape.norm_lastdim(d);
    Ok(tape.mean(n))
}

/// Mean over intervals, frames and joints of the error between predicted and
/// true displacements `p[t + d] - p[t]`.
pub fn motion_loss(tape: &mut Tape, pred: Var, gt: Var, intervals: &[usize]) -> Result<Var> {
    let shape = same_poses("motion_loss", tape, pred, gt)?;
    let t = shape[1];
    if t < 2 {
        return Err(Error::invalid(
            "motion_loss",
            format!("needs at least 2 frames, got {t}"),
        ));
    }
    if intervals.is_empty() {
        return Err(Error::invalid("motion_loss", "no intervals given"));
    }
    // displacement errors only depend on the per-frame error e = pred - gt
    let e = tape.sub(pred, gt)?;
    let mut total: Option<Var> = None;
    for &d in intervals {
        if d == 0 || d >= t {
            return Err(Error::invalid(
                "motion_loss",
                format!("interval {d} outside 1..{t}"),
            ));
        }
        let late = tape.narrow(e, 1, d, t - d)?;
        let early = tape.narrow(e, 1, 0, t - d)?;
        let diff = tape.sub(late, early)?;
        let n = tape.norm_lastdim(diff);
        let m = tape.mean(n);
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    let total = total.expect("at least one interval");
    Ok(tape.scale(total, 1.0 / intervals.len() as f64))
}

/// Vars of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub position: Var,
    pub motion: Option<Var>,
}

/// `position + lambda * motion`; the motion term is skipped when `lambda == 0`.
pub fn total_loss(tape: &mut Tape, pred: Var, gt: Var, cfg: &LossConfig) -> Result<LossTerms> {
    let position = mpjpe_loss(tape, pred, gt)?;
    if cfg.lambda == 0.0 {
        return Ok(LossTerms {
            total: position,
            position,
            motion: None,
        });
    }
    let motion = motion_loss(tape, pred, gt, &cfg.intervals)?;
    let weighted = tape.scale(motion, cfg.lambda);
    let total = tape.add(position, weighted)?;
    Ok(LossTerms {
        total,
        position,
        motion: Some(motion),
    })
}
