//! Evaluation protocols on `[..., J, 3]` pose tensors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<usize> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, pred.shape(), gt.shape()));
    }
    if pred.shape().last() != Some(&3) || pred.rank() < 2 {
        return Err(Error::invalid(
            op,
            format!("expected [..., J, 3] poses, got {:?}", pred.shape()),
        ));
    }
    Ok(pred.shape()[pred.rank() - 2])
}

fn joint_errors<'a>(pred: &'a Tensor, gt: &'a Tensor) -> impl Iterator<Item = f64> + 'a {
    pred.data()
        .chunks_exact(3)
        .zip(gt.data().chunks_exact(3))
        .map(|(a, b)| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            d.sqrt()
        })
}

/// Mean Euclidean joint error.
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mpjpe", pred, gt)?;
    let n = pred.numel() / 3;
    Ok(joint_errors(pred, gt).sum::<f64>() / n as f64)
}

/// Per-frame Procrustes result.
#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub value: f64,
    /// Frames whose joints were coincident; they are scored without alignment.
    pub degenerate_frames: usize,
}

/// MPJPE after aligning each frame of `pred` to `gt` with the optimal
/// similarity transform (rotation, uniform scale, translation).
pub fn p_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(p_mpjpe_detailed(pred, gt)?.value)
}

pub fn p_mpjpe_detailed(pred: &Tensor, gt: &Tensor) -> Result<Aligned> {
    let joints = check_pair("p_mpjpe", pred, gt)?;
    let per_frame = joints * 3;
    let mut total = 0.0;
    let mut degenerate = 0;
    for (p, g) in pred
        .data()
        .chunks_exact(per_frame)
        .zip(gt.data().chunks_exact(per_frame))
    {
        let p: Vec<Vector3<f64>> = p.chunks_exact(3).map(Vector3::from_column_slice).collect();
        let g: Vec<Vector3<f64>> = g.chunks_exact(3).map(Vector3::from_column_slice).collect();
        let aligned = match align(&p, &g) {
            Some(a) => a,
            None => {
                degenerate += 1;
                p
            }
        };
        total += aligned
            .iter()
            .zip(&g)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>();
    }
    let n = pred.numel() / 3;
    Ok(Aligned {
        value: total / n as f64,
        degenerate_frames: degenerate,
    })
}

/// Similarity transform of `pred` that best matches `gt` in least squares.
fn align(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Option<Vec<Vector3<f64>>> {
    let n = pred.len() as f64;
    let mu_p = pred.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;
    let p0: Vec<_> = pred.iter().map(|v| v - mu_p).collect();
    let g0: Vec<_> = gt.iter().map(|v| v - mu_g).collect();
    let norm_p = p0.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    let norm_g = g0.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    if norm_p < 1e-12 || norm_g < 1e-12 {
        return None;
    }
    // cross-covariance between centred, unit-norm point sets
    let mut h = Matrix3::zeros();
    for (a, b) in p0.iter().zip(&g0) {
        h += (a / norm_p) * (b / norm_g).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    let mut v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        // reflection: flip the axis of the smallest singular value
        let k = s.imin();
        v.column_mut(k).neg_mut();
        s[k] = -s[k];
        r = v * u.transpose();
    }
    let scale = s.sum() * norm_g / norm_p;
    Some(p0.iter().map(|a| scale * (r * a) + mu_g).collect())
}

/// Percentage of joints whose error is at most `threshold`.
pub fn pck(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64> {
    check_pair("pck", pred, gt)?;
    let n = pred.numel() / 3;
    let hits = joint_errors(pred, gt).filter(|&e| e <= threshold).count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// `0, 5, ..., 150` millimetres.
pub fn default_auc_thresholds() -> Vec<f64> {
    (0..=30).map(|i| 5.0 * i as f64).collect()
}

/// Mean PCK over `thresholds`.
pub fn auc(pred: &Tensor, gt: &Tensor, thresholds: &[f64]) -> Result<f64> {
    check_pair("auc", pred, gt)?;
    if thresholds.is_empty() {
        return Err(Error::invalid("auc", "threshold grid is empty"));
    }
    let errors: Vec<f64> = joint_errors(pred, gt).collect();
    let n = errors.len() as f64;
    let total: f64 = thresholds
        .iter()
        .map(|&t| 100.0 * errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .sum();
    Ok(total / thresholds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pck_threshold: f64,
    pub auc_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pck_threshold: 150.0,
            auc_thresholds: default_auc_thresholds(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
    /// Number of scored poses (frames).
    pub samples: usize,
}

impl Scores {
    pub fn compute(pred: &Tensor, gt: &Tensor, cfg: &EvalConfig) -> Result<Self> {
        let joints = check_pair("evaluate", pred, gt)?;
        Ok(Self {
            mpjpe: mpjpe(pred, gt)?,
            p_mpjpe: p_mpjpe(pred, gt)?,
            pck: pck(pred, gt, cfg.pck_threshold)?,
            auc: auc(pred, gt, &cfg.auc_thresholds)?,
            samples: pred.numel() / (3 * joints),
        })
    }
}

/// Per-action scores with two aggregates: weighted by sample count, and the
/// unweighted mean over actions used by action-averaged benchmark tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_action: BTreeMap<String, Scores>,
    pub overall: Scores,
    pub action_mean: Scores,
}

impl EvalReport {
    pub fn from_actions(actions: &[(String, Tensor, Tensor)], cfg: &EvalConfig) -> Result<Self> {
        let mut per_action = BTreeMap::new();
        for (name, pred, gt) in actions {
            let s = Scores::compute(pred, gt, cfg)?;
            if per_action.insert(name.clone(), s).is_some() {
                return Err(Error::invalid(
                    "evaluate",
                    format!("action `{name}` listed twice"),
                ));
            }
        }
        Self::from_scores(per_action)
    }

    pub fn from_scores(per_action: BTreeMap<String, Scores>) -> Result<Self> {
        let total: usize = per_action.values().map(|s| s.samples).sum();
        if total == 0 {
            return Err(Error::invalid("evaluate", "no samples to evaluate"));
        }
        let k = per_action.len() as f64;
        let combine = |w: &dyn Fn(&Scores) -> f64, div: f64| {
            let f =
                |g: fn(&Scores) -> f64| per_action.values().map(|s| w(s) * g(s)).sum::<f64>() / div;
            Scores {
                mpjpe: f(|s| s.mpjpe),
                p_mpjpe: f(|s| s.p_mpjpe),
                pck: f(|s| s.pck),
                auc: f(|s| s.auc),
                samples: total,
            }
        };
        let overall = combine(&|s| s.samples as f64, total as f64);
        let action_mean = combine(&|_| 1.0, k);
        Ok(Self {
            per_action,
            overall,
            action_mean,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<20} {:>9} {:>9} {:>7} {:>7} {:>8}",
            "action", "mpjpe", "p-mpjpe", "pck", "auc", "samples"
        );
        let mut row = |name: &str, s: &Scores| {
            let _ = writeln!(
                out,
                "{name:<20} {:>9.3} {:>9.3} {:>7.2} {:>7.2} {:>8}",
                s.mpjpe, s.p_mpjpe, s.pck, s.auc, s.samples
            );
        };
        for (name, s) in &self.per_action {
            row(name, s);
        }
        row("overall", &self.overall);
        row("action mean", &self.action_mean);
        out
    }
}
