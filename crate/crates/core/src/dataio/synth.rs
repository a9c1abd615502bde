use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PoseSequence;
use crate::error::{Error, Result};
use crate::numerics::standard_normal;
use crate::skeleton::SkeletonGraph;

/// Parameters of the synthetic motion generator. Lengths are in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub frames: usize,
    pub fps: f64,
    /// Standard deviation of Gaussian noise added to the 2D projection.
    pub noise: f64,
    /// Bone lengths are drawn uniformly from this range.
    pub bone_length: (f64, f64),
    /// Peak joint rotation per sinusoid component, in radians.
    pub max_angle: f64,
    /// Highest sinusoid frequency in Hz.
    pub max_frequency: f64,
    /// Peak root excursion per axis.
    pub root_travel: f64,
    /// Seed for the bone offsets, shared by every sequence of one subject.
    pub skeleton_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frames: 96,
            fps: 50.0,
            noise: 0.0,
            bone_length: (100.0, 400.0),
            max_angle: 0.5,
            max_frequency: 1.0,
            root_travel: 300.0,
            skeleton_seed: 0,
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn rotation(x: f64, y: f64, z: f64) -> Mat3 {
    let (sx, cx) = x.sin_cos();
    let (sy, cy) = y.sin_cos();
    let (sz, cz) = z.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

/// Sum of two random sinusoids.
#[derive(Debug, Clone, Copy)]
struct Wave([(f64, f64, f64); 2]);

impl Wave {
    fn random(rng: &mut ChaCha8Rng, amplitude: f64, max_frequency: f64) -> Self {
        Wave([0, 1].map(|_| {
            (
                rng.random_range(-amplitude..=amplitude),
                rng.random_range(0.1..=max_frequency) * std::f64::consts::TAU,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        }))
    }

    fn at(&self, seconds: f64) -> f64 {
        self.0
            .iter()
            .map(|(a, w, p)| a * (w * seconds + p).sin())
            .sum()
    }
}

fn bone_offsets(graph: &SkeletonGraph, spec: &SynthSpec) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.skeleton_seed);
    (0..graph.joint_count())
        .map(|j| {
            if j == graph.root() {
                return [0.0; 3];
            }
            let dir = [0; 3].map(|_| standard_normal(&mut rng));
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            let len = rng.random_range(spec.bone_length.0..=spec.bone_length.1);
            dir.map(|v| v / norm * len)
        })
        .collect()
}

/// Generates one `(2D, 3D)` sequence pair by forward kinematics: fixed bone
/// offsets rotated by smooth per-joint angles, on a smooth root trajectory.
/// The 2D sequence is the 3D one without its depth channel, plus noise.
pub fn synth_generate(
    graph: &SkeletonGraph,
    spec: &SynthSpec,
    seed: u64,
) -> Result<(PoseSequence, PoseSequence)> {
    if spec.fps <= 0.0 || spec.bone_length.0 > spec.bone_length.1 || spec.bone_length.0 <= 0.0 {
        return Err(Error::Config(
            "synthetic spec needs fps > 0 and a positive bone length range".into(),
        ));
    }
    let n = graph.joint_count();
    let offsets = bone_offsets(graph, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles: Vec<[Wave; 3]> = (0..n)
        .map(|_| [0; 3].map(|_| Wave::random(&mut rng, spec.max_angle, spec.max_frequency)))
        .collect();
    let travel: [Wave; 3] =
        [0; 3].map(|_| Wave::random(&mut rng, spec.root_travel, spec.max_frequency.min(0.5)));

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| graph.depth(j));

    let mut data3 = Vec::with_capacity(spec.frames * n * 3);
    let mut pos = vec![[0.0; 3]; n];
    let mut global = vec![[[0.0; 3]; 3]; n];
    for t in 0..spec.frames {
        let s = t as f64 / spec.fps;
        for &j in &order {
            let local = rotation(angles[j][0].at(s), angles[j][1].at(s), angles[j][2].at(s));
            match graph.parent(j) {
                None => {
                    global[j] = local;
                    pos[j] = [travel[0].at(s), travel[1].at(s), 4000.0 + travel[2].at(s)];
                }
                Some(p) => {
                    global[j] = matmul(&global[p], &local);
                    let d = apply(&global[j], &offsets[j]);
                    pos[j] = [0, 1, 2].map(|k| pos[p][k] + d[k]);
                }
            }
        }
        for p in &pos {
            data3.extend_from_slice(p);
        }
    }
    let seq3 = PoseSequence::new(graph.name(), spec.fps, spec.frames, n, 3, data3)?;
    let mut seq2 = seq3.project_2d()?;
    if spec.noise > 0.0 {
        for v in seq2.data_mut() {
            *v += spec.noise * standard_normal(&mut rng);
        }
    }
    Ok((seq2, seq3))
}

/// `count` independent sequences of one subject; per-sequence seeds are drawn
/// from `seed`.
pub fn synth_dataset(
    graph: &SkeletonGraph,
    spec: &SynthSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<(PoseSequence, PoseSequence)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| synth_generate(graph, spec, rng.random()))
        .collect()
}
