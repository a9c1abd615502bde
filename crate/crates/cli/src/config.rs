//! Declarative run configuration and `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hdformer::dataio::{Stitch, SynthSpec};
use hdformer::metrics::EvalConfig;
use hdformer::network::HDFormerConfig;
use hdformer::skeleton::{build_skeleton, SkeletonGraph, TopologySpec};
use hdformer::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SEED_ENV: &str = "HDF_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synth,
    Files,
}

/// A 2D input file and its 3D target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequencePair {
    pub input: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub action: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Frames between training windows; half the window when unset.
    pub train_stride: Option<usize>,
    /// Window step of sliding inference.
    pub infer_step: usize,
    pub stitch: Stitch,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth: SynthSpec,
    pub train: Vec<SequencePair>,
    pub val: Vec<SequencePair>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            train_stride: None,
            infer_step: 5,
            stitch: Stitch::Mean,
            synth_train: 16,
            synth_val: 4,
            synth: SynthSpec::default(),
            train: Vec::new(),
            val: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Built-in topology name or topology file path.
    pub topology: String,
    pub model: HDFormerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            topology: "h36m".into(),
            model: HDFormerConfig::paper(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid configuration {}", path.display()))
    }

    /// Reads `path` (or the defaults), applies `sets` in order, then the seed
    /// environment override, and fills derived defaults.
    pub fn resolve(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        let mut cfg = apply_overrides(&base, sets)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}=`{seed}` is not an unsigned integer"))?;
        }
        if cfg.data.train_stride.is_none() {
            cfg.data.train_stride = Some((cfg.model.frames / 2).max(1));
        }
        Ok(cfg)
    }

    pub fn topology_spec(&self) -> Result<TopologySpec> {
        TopologySpec::resolve(&self.topology)
            .with_context(|| format!("topology `{}`", self.topology))
    }

    /// Checks every section and returns the skeleton graph.
    pub fn validate(&self) -> Result<SkeletonGraph> {
        let spec = self.topology_spec()?;
        let graph =
            build_skeleton(&spec).with_context(|| format!("topology `{}`", self.topology))?;
        if spec.joints != self.model.joints {
            bail!(
                "model.joints = {} but topology `{}` has {} joints",
                self.model.joints,
                self.topology,
                spec.joints
            );
        }
        self.model.validate().context("model")?;
        self.train.validate(self.model.frames).context("train")?;
        if self.data.infer_step == 0 || self.data.train_stride == Some(0) {
            bail!("data.infer_step and data.train_stride must be positive");
        }
        match self.data.source {
            DataSource::Synth if self.data.synth_train == 0 => {
                bail!("data.synth_train must be positive")
            }
            DataSource::Files if self.data.train.is_empty() => {
                bail!("data.source = \"files\" needs at least one data.train entry")
            }
            _ => {}
        }
        Ok(graph)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing the resolved configuration")
    }
}

/// Applies `key=value` assignments. Keys are dotted paths such as
/// `train.optimizer.epochs`, or a bare name that matches exactly one entry.
pub fn apply_overrides(cfg: &RunConfig, sets: &[String]) -> Result<RunConfig> {
    if sets.is_empty() {
        return Ok(cfg.clone());
    }
    let mut table = Table::try_from(cfg).context("serializing the configuration")?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{set}` is not of the form key=value"))?;
        let key = key.trim();
        let path = resolve_key(&table, key)?;
        insert(&mut table, &path, parse_value(raw.trim()))
            .with_context(|| format!("override `{set}`"))?;
        let check: Result<RunConfig, _> = table.clone().try_into();
        if let Err(e) = check {
            bail!(
                "override `{set}` (key `{}`): {}",
                path.join("."),
                e.message()
            );
        }
    }
    Ok(table.try_into()?)
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn resolve_key(table: &Table, key: &str) -> Result<Vec<String>> {
    if key.is_empty() {
        bail!("empty configuration key");
    }
    if key.contains('.') {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        let mut node = table;
        for (i, part) in path[..path.len() - 1].iter().enumerate() {
            node = match node.get(part) {
                Some(Value::Table(t)) => t,
                _ => bail!(
                    "unknown configuration key `{key}` (no section `{}`)",
                    path[..=i].join(".")
                ),
            };
        }
        let leaf = path.last().expect("non-empty path");
        if !node.contains_key(leaf) && !optional_keys().contains(&key) {
            bail!("unknown configuration key `{key}`");
        }
        return Ok(path);
    }
    let mut found = Vec::new();
    collect_paths(table, &mut Vec::new(), key, &mut found);
    for opt in optional_keys() {
        let p: Vec<String> = opt.split('.').map(str::to_string).collect();
        if p.last().is_some_and(|l| l == key) && !found.contains(&p) {
            found.push(p);
        }
    }
    match found.len() {
        0 => bail!("unknown configuration key `{key}`"),
        1 => Ok(found.remove(0)),
        _ => {
            let names: Vec<String> = found.iter().map(|p| p.join(".")).collect();
            bail!(
                "configuration key `{key}` is ambiguous: {}",
                names.join(", ")
            )
        }
    }
}

/// Keys whose default is "unset" and therefore absent from a serialized table.
fn optional_keys() -> &'static [&'static str] {
    &["train.max_steps", "data.train_stride"]
}

fn collect_paths(table: &Table, prefix: &mut Vec<String>, key: &str, out: &mut Vec<Vec<String>>) {
    for (k, v) in table {
        prefix.push(k.clone());
        if k == key {
            out.push(prefix.clone());
        }
        if let Value::Table(t) = v {
            collect_paths(t, prefix, key, out);
        }
        prefix.pop();
    }
}

fn insert(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (leaf, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for p in parents {
        node = match node
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => bail!("`{p}` is not a section"),
        };
    }
    node.insert(leaf.clone(), value);
    Ok(())
}
