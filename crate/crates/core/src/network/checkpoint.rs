//! Checkpoint container.
//!
//! ```text
//! HDFCKPT 1\n
//! <one-line JSON header>\n
//! end\n
//! <f64 little-endian payload, tensors in header order>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model_for, HDFormer, HDFormerConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamKind, ParamStore, Tensor};
use crate::skeleton::TopologySpec;

const MAGIC: &str = "HDFCKPT 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    seed: u64,
    step: u64,
    model: HDFormerConfig,
    topology: TopologySpec,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: u64,
    pub model: HDFormerConfig,
    pub topology: TopologySpec,
    /// Caller-owned metadata, e.g. the data normaliser.
    pub extra: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Rebuilds the model and loads the stored weights into it.
    pub fn into_model(self) -> Result<(HDFormer, serde_json::Value)> {
        let mut model = build_model_for(&self.model, &self.topology, self.seed)?;
        model.state.params.load_from(&self.params)?;
        model.state.step = self.step;
        Ok((model, self.extra))
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &HDFormer,
    extra: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        seed: model.state.seed,
        step: model.state.step,
        model: model.config().clone(),
        topology: model.topology(),
        extra: extra.clone(),
        tensors: model
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = format!("{MAGIC}\n{json}\nend\n").into_bytes();
    for p in model.params().iter() {
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut lines = [String::new(), String::new(), String::new()];
    for l in &mut lines {
        if reader.read_line(l).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::format(path, "unexpected end of header"));
        }
        let trimmed = l.trim_end_matches('\n').len();
        l.truncate(trimmed);
    }
    if lines[0] != MAGIC {
        return Err(Error::format(
            path,
            format!("expected `{MAGIC}`, found `{}`", lines[0]),
        ));
    }
    if lines[2] != "end" {
        return Err(Error::format(
            path,
            format!("expected `end`, found `{}`", lines[2]),
        ));
    }
    let header: Header =
        serde_json::from_str(&lines[1]).map_err(|e| Error::format(path, e.to_string()))?;
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    if payload.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut params = ParamStore::new();
    for t in &header.tensors {
        if params.id(&t.name).is_some() {
            return Err(Error::format(
                path,
                format!("duplicate tensor `{}`", t.name),
            ));
        }
        let n = t.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let tensor =
            Tensor::new(t.shape.clone(), data).map_err(|e| Error::format(path, e.to_string()))?;
        params.add(t.name.clone(), tensor, t.kind);
    }
    Ok(Checkpoint {
        seed: header.seed,
        step: header.step,
        model: header.model,
        topology: header.topology,
        extra: header.extra,
        params,
    })
}
