//! Pose sequences on disk and in memory, normalisation, windowing and a
//! synthetic motion generator.

mod normalize;
mod synth;
mod window;

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::TopologySpec;

pub use normalize::{displacement_scale, Normalizer};
pub use synth::{synth_dataset, synth_generate, SynthSpec};
pub use window::{
    make_windows, sliding_window_infer, Stitch, Window, WindowPredictor, WindowedDataset,
};

/// A frame-major `[frames, joints, channels]` pose track.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub topology: String,
    pub fps: f64,
    frames: usize,
    joints: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PoseSequence {
    pub fn new(
        topology: impl Into<String>,
        fps: f64,
        frames: usize,
        joints: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if !(2..=3).contains(&channels) {
            return Err(Error::invalid(
                "pose_sequence",
                format!("channels must be 2 or 3, got {channels}"),
            ));
        }
        if joints == 0 {
            return Err(Error::invalid(
                "pose_sequence",
                "joint count must be positive",
            ));
        }
        if data.len() != frames * joints * channels {
            return Err(Error::invalid(
                "pose_sequence",
                format!("{} values for {frames} x {joints} x {channels}", data.len()),
            ));
        }
        Ok(Self {
            topology: topology.into(),
            fps,
            frames,
            joints,
            channels,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.joints * self.channels;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn point(&self, t: usize, j: usize) -> &[f64] {
        let off = (t * self.joints + j) * self.channels;
        &self.data[off..off + self.channels]
    }

    pub fn expect_channels(&self, channels: usize) -> Result<()> {
        if self.channels != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                found: self.channels,
            });
        }
        Ok(())
    }

    /// Copies frames `start..start + len` as a `[len, J, C]` tensor.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.frames {
            return Err(Error::invalid(
                "window",
                format!(
                    "frames {start}..{} exceed sequence length {}",
                    start + len,
                    self.frames
                ),
            ));
        }
        let n = self.joints * self.channels;
        Tensor::new(
            vec![len, self.joints, self.channels],
            self.data[start * n..(start + len) * n].to_vec(),
        )
    }

    /// Drops the last channel of a 3D sequence.
    pub fn project_2d(&self) -> Result<Self> {
        self.expect_channels(3)?;
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1]])
            .collect();
        Self::new(
            self.topology.clone(),
            self.fps,
            self.frames,
            self.joints,
            2,
            data,
        )
    }
}

const POSE_MAGIC: &str = "HDFPOSE 1";

fn header_value<'a>(path: &Path, line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .map(str::trim)
        .ok_or_else(|| Error::format(path, format!("expected `{key} <value>`, found `{line}`")))
}

fn parse_header<T: std::str::FromStr>(path: &Path, line: &str, key: &str) -> Result<T> {
    let v = header_value(path, line, key)?;
    v.parse()
        .map_err(|_| Error::format(path, format!("invalid {key} `{v}`")))
}

/// Writes `seq` in the pose file format.
pub fn save_sequence(path: impl AsRef<Path>, seq: &PoseSequence) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!(
        "{POSE_MAGIC}\njoints {}\ntopology {}\nfps {}\nchannels {}\nframes {}\nend\n",
        seq.joints, seq.topology, seq.fps, seq.channels, seq.frames
    )
    .into_bytes();
    for v in &seq.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Reads a pose file and checks it against its declared topology, which is
/// resolved as a built-in name, a path, or a path next to the pose file.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<PoseSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut lines = Vec::with_capacity(7);
    for _ in 0..7 {
        let mut l = String::new();
        if reader.read_line(&mut l).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::format(path, "unexpected end of header"));
        }
        lines.push(l.trim_end_matches('\n').to_string());
        if lines.len() == 1 && lines[0] != POSE_MAGIC {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: POSE_MAGIC,
                found: lines[0].clone(),
            });
        }
    }
    let joints: usize = parse_header(path, &lines[1], "joints")?;
    let topology = header_value(path, &lines[2], "topology")?.to_string();
    let fps: f64 = parse_header(path, &lines[3], "fps")?;
    let channels: usize = parse_header(path, &lines[4], "channels")?;
    let frames: usize = parse_header(path, &lines[5], "frames")?;
    if lines[6] != "end" {
        return Err(Error::format(
            path,
            format!("expected `end`, found `{}`", lines[6]),
        ));
    }
    let spec = resolve_topology(path, &topology)?;
    if spec.joints != joints {
        return Err(Error::JointMismatch {
            topology,
            expected: spec.joints,
            found: joints,
        });
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let expected = frames * joints * channels * 8;
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    PoseSequence::new(topology, fps, frames, joints, channels, data)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn resolve_topology(pose_path: &Path, name: &str) -> Result<TopologySpec> {
    if let Some(spec) = TopologySpec::builtin(name) {
        return Ok(spec);
    }
    let direct = Path::new(name);
    if direct.exists() {
        return TopologySpec::load(direct);
    }
    if let Some(dir) = pose_path.parent() {
        let sibling = dir.join(name);
        if sibling.exists() {
            return TopologySpec::load(sibling);
        }
    }
    Err(Error::format(
        pose_path,
        format!("topology `{name}` is neither built in nor a readable file"),
    ))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointDump {
    topology: String,
    #[serde(default = "default_fps")]
    fps: f64,
    /// `[frame][joint][channel]`.
    keypoints: Vec<Vec<Vec<f64>>>,
}

fn default_fps() -> f64 {
    50.0
}

/// Imports a JSON keypoint dump:
/// `{"topology": "h36m", "fps": 50, "keypoints": [[[x, y], ...], ...]}`.
pub fn import_keypoints_json(path: impl AsRef<Path>) -> Result<PoseSequence> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dump: KeypointDump =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = resolve_topology(path, &dump.topology)?;
    let frames = dump.keypoints.len();
    let channels = dump
        .keypoints
        .first()
        .and_then(|f| f.first())
        .map_or(2, Vec::len);
    let mut data = Vec::with_capacity(frames * spec.joints * channels);
    for (t, frame) in dump.keypoints.iter().enumerate() {
        if frame.len() != spec.joints {
            return Err(Error::JointMismatch {
                topology: dump.topology.clone(),
                expected: spec.joints,
                found: frame.len(),
            });
        }
        for (j, p) in frame.iter().enumerate() {
            if p.len() != channels {
                return Err(Error::format(
                    path,
                    format!(
                        "frame {t} joint {j}: expected {channels} values, found {}",
                        p.len()
                    ),
                ));
            }
            data.extend_from_slice(p);
        }
    }
    PoseSequence::new(dump.topology, dump.fps, frames, spec.joints, channels, data)
        .map_err(|e| Error::format(path, e.to_string()))
}
