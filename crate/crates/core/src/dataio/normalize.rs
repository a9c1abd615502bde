use serde::{Deserialize, Serialize};

use super::PoseSequence;
use crate::error::{Error, Result};

/// Mean distance of non-root joints from the root, over all frames of all
/// sequences.
pub fn displacement_scale(seqs: &[&PoseSequence], root: usize) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in seqs {
        for t in 0..s.frames() {
            let r = s.point(t, root);
            for j in (0..s.joints()).filter(|&j| j != root) {
                let d2: f64 = s
                    .point(t, j)
                    .iter()
                    .zip(r)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                sum += d2.sqrt();
                n += 1;
            }
        }
    }
    if n == 0 || sum == 0.0 {
        return Err(Error::invalid(
            "displacement_scale",
            "no non-degenerate root-relative joints",
        ));
    }
    Ok(sum / n as f64)
}

/// Root-centring followed by division by a dataset-wide scale, kept separate
/// for 2D inputs and 3D targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub root: usize,
    pub scale_2d: f64,
    pub scale_3d: f64,
}

impl Normalizer {
    pub fn fit(inputs: &[&PoseSequence], targets: &[&PoseSequence], root: usize) -> Result<Self> {
        Ok(Self {
            root,
            scale_2d: displacement_scale(inputs, root)?,
            scale_3d: displacement_scale(targets, root)?,
        })
    }

    pub fn identity(root: usize) -> Self {
        Self {
            root,
            scale_2d: 1.0,
            scale_3d: 1.0,
        }
    }

    fn scale(&self, channels: usize) -> f64 {
        if channels == 2 {
            self.scale_2d
        } else {
            self.scale_3d
        }
    }

    /// Returns the normalised sequence and the removed per-frame root positions.
    pub fn normalize(&self, seq: &PoseSequence) -> (PoseSequence, Vec<f64>) {
        let (c, jn) = (seq.channels(), seq.joints());
        let s = self.scale(c);
        let mut out = seq.clone();
        let mut roots = Vec::with_capacity(seq.frames() * c);
        for t in 0..seq.frames() {
            let root: Vec<f64> = seq.point(t, self.root).to_vec();
            let frame = &mut out.data_mut()[t * jn * c..(t + 1) * jn * c];
            for p in frame.chunks_exact_mut(c) {
                for (v, r) in p.iter_mut().zip(&root) {
                    *v = (*v - r) / s;
                }
            }
            roots.extend(root);
        }
        (out, roots)
    }

    /// Inverse of [`Normalizer::normalize`]; without `roots` the output stays
    /// root-relative.
    pub fn denormalize(&self, seq: &PoseSequence, roots: Option<&[f64]>) -> PoseSequence {
        let (c, jn) = (seq.channels(), seq.joints());
        let s = self.scale(c);
        let mut out = seq.clone();
        for t in 0..seq.frames() {
            let frame = &mut out.data_mut()[t * jn * c..(t + 1) * jn * c];
            for p in frame.chunks_exact_mut(c) {
                for (k, v) in p.iter_mut().enumerate() {
                    *v = *v * s + roots.map_or(0.0, |r| r[t * c + k]);
                }
            }
        }
        out
    }
}
