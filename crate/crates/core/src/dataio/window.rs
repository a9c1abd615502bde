use serde::{Deserialize, Serialize};

use super::PoseSequence;
use crate::error::{Error, Result};
use crate::network::HDFormer;
use crate::numerics::Tensor;

/// One fixed-length training pair cut from a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// `[T, J, 2]`.
    pub input: Tensor,
    /// `[T, J, 3]`.
    pub target: Tensor,
    pub sequence: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowedDataset {
    pub frames: usize,
    pub joints: usize,
    pub windows: Vec<Window>,
    /// Sequences offered, including skipped ones.
    pub sequences: usize,
    /// Sequences dropped for being shorter than `frames`.
    pub skipped: usize,
}

/// Cuts every complete `frames`-long window at multiples of `stride`.
pub fn make_windows(
    seq2d: &PoseSequence,
    seq3d: &PoseSequence,
    frames: usize,
    stride: usize,
) -> Result<WindowedDataset> {
    let mut ds = WindowedDataset::new(frames, seq2d.joints());
    ds.add_sequence(seq2d, seq3d, stride)?;
    Ok(ds)
}

impl WindowedDataset {
    pub fn new(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            windows: Vec::new(),
            sequences: 0,
            skipped: 0,
        }
    }

    pub fn from_pairs(
        pairs: &[(PoseSequence, PoseSequence)],
        frames: usize,
        stride: usize,
    ) -> Result<Self> {
        let joints = pairs.first().map_or(0, |(a, _)| a.joints());
        let mut ds = Self::new(frames, joints);
        for (a, b) in pairs {
            ds.add_sequence(a, b, stride)?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn add_sequence(
        &mut self,
        seq2d: &PoseSequence,
        seq3d: &PoseSequence,
        stride: usize,
    ) -> Result<()> {
        seq2d.expect_channels(2)?;
        seq3d.expect_channels(3)?;
        if self.frames == 0 || stride == 0 {
            return Err(Error::invalid(
                "make_windows",
                "window length and stride must be positive",
            ));
        }
        if seq2d.frames() != seq3d.frames() || seq2d.joints() != seq3d.joints() {
            return Err(Error::invalid(
                "make_windows",
                format!(
                    "input has {} frames x {} joints but target has {} x {}",
                    seq2d.frames(),
                    seq2d.joints(),
                    seq3d.frames(),
                    seq3d.joints()
                ),
            ));
        }
        if seq2d.joints() != self.joints {
            return Err(Error::JointMismatch {
                topology: seq2d.topology.clone(),
                expected: self.joints,
                found: seq2d.joints(),
            });
        }
        let sequence = self.sequences;
        self.sequences += 1;
        if seq2d.frames() < self.frames {
            log::warn!(
                "skipping sequence of {} frames, shorter than the {}-frame window",
                seq2d.frames(),
                self.frames
            );
            self.skipped += 1;
            return Ok(());
        }
        let mut offset = 0;
        while offset + self.frames <= seq2d.frames() {
            self.windows.push(Window {
                input: seq2d.window(offset, self.frames)?,
                target: seq3d.window(offset, self.frames)?,
                sequence,
                offset,
            });
            offset += stride;
        }
        Ok(())
    }

    /// Stacks the selected windows into `([B, T, J, 2], [B, T, J, 3])`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut x = Vec::with_capacity(indices.len() * self.frames * self.joints * 2);
        let mut y = Vec::with_capacity(indices.len() * self.frames * self.joints * 3);
        for &i in indices {
            let w = self
                .windows
                .get(i)
                .ok_or_else(|| Error::invalid("batch", format!("window {i} out of range")))?;
            x.extend_from_slice(w.input.data());
            y.extend_from_slice(w.target.data());
        }
        let b = indices.len();
        Ok((
            Tensor::new(vec![b, self.frames, self.joints, 2], x)?,
            Tensor::new(vec![b, self.frames, self.joints, 3], y)?,
        ))
    }
}

/// Anything that maps `[B, T, J, 2]` windows to `[B, T, J, 3]`.
pub trait WindowPredictor {
    fn window_len(&self) -> usize;
    fn predict_windows(&self, x: &Tensor) -> Result<Tensor>;
}

impl WindowPredictor for HDFormer {
    fn window_len(&self) -> usize {
        self.config().frames
    }

    fn predict_windows(&self, x: &Tensor) -> Result<Tensor> {
        self.predict(x)
    }
}

/// Policy for frames covered by several windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stitch {
    #[default]
    Mean,
    /// The window with the largest offset wins.
    Last,
}

/// Window start offsets `0, step, 2 step, ...` plus one window aligned to the
/// sequence end.
pub fn window_offsets(len: usize, window: usize, step: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=len - window).step_by(step).collect();
    if *out.last().expect("at least one window") != len - window {
        out.push(len - window);
    }
    out
}

/// Predicts a sequence of any length `>= T` by stitching overlapping windows.
pub fn sliding_window_infer(
    model: &impl WindowPredictor,
    seq2d: &PoseSequence,
    step: usize,
    stitch: Stitch,
) -> Result<PoseSequence> {
    let offsets = check_offsets(model, seq2d, step)?;
    let order: Vec<usize> = (0..offsets.len()).collect();
    stitch_windows(model, seq2d, &offsets, &order, 16, stitch)
}

fn check_offsets(
    model: &impl WindowPredictor,
    seq2d: &PoseSequence,
    step: usize,
) -> Result<Vec<usize>> {
    seq2d.expect_channels(2)?;
    let t = model.window_len();
    if step == 0 {
        return Err(Error::invalid(
            "sliding_window_infer",
            "step must be positive",
        ));
    }
    if seq2d.frames() < t {
        return Err(Error::invalid(
            "sliding_window_infer",
            format!(
                "sequence has {} frames but the model needs {t}; pad the sequence or use a model with a smaller window",
                seq2d.frames()
            ),
        ));
    }
    Ok(window_offsets(seq2d.frames(), t, step))
}

/// Evaluates windows in `order`, `batch` at a time, then accumulates them in
/// offset order so the result does not depend on `order`.
fn stitch_windows(
    model: &impl WindowPredictor,
    seq2d: &PoseSequence,
    offsets: &[usize],
    order: &[usize],
    batch: usize,
    stitch: Stitch,
) -> Result<PoseSequence> {
    let (t, jn) = (model.window_len(), seq2d.joints());
    let per_window = t * jn * 3;
    let mut preds: Vec<Option<Vec<f64>>> = vec![None; offsets.len()];
    for chunk in order.chunks(batch.max(1)) {
        let mut x = Vec::with_capacity(chunk.len() * t * jn * 2);
        for &w in chunk {
            x.extend_from_slice(seq2d.window(offsets[w], t)?.data());
        }
        let y = model.predict_windows(&Tensor::new(vec![chunk.len(), t, jn, 2], x)?)?;
        if y.shape() != [chunk.len(), t, jn, 3] {
            return Err(Error::shape(
                "sliding_window_infer",
                y.shape(),
                &[chunk.len(), t, jn, 3],
            ));
        }
        for (k, &w) in chunk.iter().enumerate() {
            preds[w] = Some(y.data()[k * per_window..(k + 1) * per_window].to_vec());
        }
    }

    let len = seq2d.frames();
    let frame = jn * 3;
    let mut acc = vec![0.0; len * frame];
    let mut count = vec![0usize; len];
    for (w, &off) in offsets.iter().enumerate() {
        let p = preds[w].as_ref().expect("every window evaluated");
        for f in 0..t {
            count[off + f] += 1;
            let k = count[off + f] as f64;
            let dst = &mut acc[(off + f) * frame..(off + f + 1) * frame];
            let src = &p[f * frame..(f + 1) * frame];
            match stitch {
                // running mean: exact when every contribution is equal
                Stitch::Mean => dst
                    .iter_mut()
                    .zip(src)
                    .for_each(|(m, x)| *m += (x - *m) / k),
                Stitch::Last => dst.copy_from_slice(src),
            }
        }
    }
    PoseSequence::new(seq2d.topology.clone(), seq2d.fps, len, jn, 3, acc)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn seq(frames: usize, channels: usize, joints: usize) -> PoseSequence {
        let data = (0..frames * joints * channels)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        PoseSequence::new("test", 50.0, frames, joints, channels, data).unwrap()
    }

    #[test]
    fn window_counts() {
        let d = make_windows(&seq(96, 2, 3), &seq(96, 3, 3), 96, 1).unwrap();
        assert_eq!(d.len(), 1);
        let d = make_windows(&seq(100, 2, 3), &seq(100, 3, 3), 96, 1).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.windows[4].offset, 4);
        let d = make_windows(&seq(0, 2, 3), &seq(0, 3, 3), 96, 1).unwrap();
        assert_eq!((d.len(), d.skipped), (0, 1));
        let d = make_windows(&seq(100, 2, 3), &seq(100, 3, 3), 32, 16).unwrap();
        assert_eq!(
            d.windows.iter().map(|w| w.offset).collect::<Vec<_>>(),
            vec![0, 16, 32, 48, 64]
        );
    }

    #[test]
    fn windows_stay_within_their_sequence() {
        let pairs = vec![
            (seq(20, 2, 2), seq(20, 3, 2)),
            (seq(5, 2, 2), seq(5, 3, 2)),
            (seq(12, 2, 2), seq(12, 3, 2)),
        ];
        let d = WindowedDataset::from_pairs(&pairs, 8, 4).unwrap();
        assert_eq!(d.skipped, 1);
        for w in &d.windows {
            let (a, b) = &pairs[w.sequence];
            assert_eq!(w.input, a.window(w.offset, 8).unwrap());
            assert_eq!(w.target, b.window(w.offset, 8).unwrap());
        }
        assert_eq!(d.windows.last().unwrap().sequence, 2);
        let (x, y) = d.batch(&[0, 3]).unwrap();
        assert_eq!(
            (x.shape(), y.shape()),
            (&[2, 8, 2, 2][..], &[2, 8, 2, 3][..])
        );
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        assert!(make_windows(&seq(10, 3, 2), &seq(10, 3, 2), 4, 1).is_err());
        assert!(make_windows(&seq(10, 2, 2), &seq(9, 3, 2), 4, 1).is_err());
    }

    /// Returns `x` lifted with a depth channel equal to window-local frame
    /// index plus a per-call tag, so overlaps are visible.
    struct Probe {
        t: usize,
    }

    impl WindowPredictor for Probe {
        fn window_len(&self) -> usize {
            self.t
        }

        fn predict_windows(&self, x: &Tensor) -> Result<Tensor> {
            let s = x.shape();
            let mut out = Vec::with_capacity(x.numel() / 2 * 3);
            for b in 0..s[0] {
                for f in 0..s[1] {
                    for j in 0..s[2] {
                        out.extend([x.at(&[b, f, j, 0]), x.at(&[b, f, j, 1]), f as f64]);
                    }
                }
            }
            Tensor::new(vec![s[0], s[1], s[2], 3], out)
        }
    }

    struct Constant {
        t: usize,
        value: f64,
    }

    impl WindowPredictor for Constant {
        fn window_len(&self) -> usize {
            self.t
        }

        fn predict_windows(&self, x: &Tensor) -> Result<Tensor> {
            let s = x.shape();
            Ok(Tensor::full(vec![s[0], s[1], s[2], 3], self.value))
        }
    }

    #[test]
    fn offsets_include_end_aligned_window() {
        assert_eq!(window_offsets(8, 8, 5), vec![0]);
        assert_eq!(window_offsets(13, 8, 5), vec![0, 5]);
        assert_eq!(window_offsets(14, 8, 5), vec![0, 5, 6]);
    }

    #[test]
    fn single_window_is_a_plain_forward() {
        let p = Probe { t: 8 };
        let s = seq(8, 2, 3);
        let out = sliding_window_infer(&p, &s, 5, Stitch::Mean).unwrap();
        let direct = p
            .predict_windows(&s.window(0, 8).unwrap().reshape(vec![1, 8, 3, 2]).unwrap())
            .unwrap();
        assert_eq!(out.data(), direct.data());
    }

    #[test]
    fn overlap_frames_are_averaged() {
        let p = Probe { t: 8 };
        let out = sliding_window_infer(&p, &seq(13, 2, 1), 5, Stitch::Mean).unwrap();
        let depth: Vec<f64> = (0..13).map(|f| out.point(f, 0)[2]).collect();
        // frames 5..8 are frame 5..8 of window 0 and frame 0..3 of window 5
        assert_eq!(
            depth,
            vec![0., 1., 2., 3., 4., 2.5, 3.5, 4.5, 3., 4., 5., 6., 7.]
        );
        let last = sliding_window_infer(&p, &seq(13, 2, 1), 5, Stitch::Last).unwrap();
        assert_eq!(last.point(6, 0)[2], 1.0);
    }

    #[test]
    fn short_sequences_are_rejected() {
        let err =
            sliding_window_infer(&Probe { t: 8 }, &seq(7, 2, 1), 5, Stitch::Mean).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn result_does_not_depend_on_evaluation_order() {
        let p = Probe { t: 8 };
        let s = seq(57, 2, 2);
        let offsets = check_offsets(&p, &s, 5).unwrap();
        let natural: Vec<usize> = (0..offsets.len()).collect();
        let base = stitch_windows(&p, &s, &offsets, &natural, 3, Stitch::Mean).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for batch in [1, 2, 5] {
            let mut order = natural.clone();
            order.shuffle(&mut rng);
            let got = stitch_windows(&p, &s, &offsets, &order, batch, Stitch::Mean).unwrap();
            assert_eq!(got.data(), base.data());
        }
    }

    proptest! {
        #[test]
        fn stitched_length_and_constant_invariance(len in 8usize..200) {
            let s = seq(len, 2, 2);
            let out = sliding_window_infer(&Constant { t: 8, value: 0.1 }, &s, 5, Stitch::Mean).unwrap();
            prop_assert_eq!(out.frames(), len);
            prop_assert!(out.data().iter().all(|&v| v == 0.1));
        }
    }
}
