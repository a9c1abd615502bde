//! The U-shaped lifting network.
//!
//! Data flow for depth `D` and channel ladder `C_0 .. C_D`:
//!
//! ```text
//! x [B,T,J,2] -> embed -> C_0
//!   down level i (i < D): blocks @ C_i, keep skip_i, conv k/2 -> C_{i+1}, T/2
//!   bottom:               blocks @ C_D
//!   up level i (reverse):  upsample to T/2^i, linear -> C_i, + skip_i, blocks
//!   merge: every scale upsampled to T, linear -> C_m, fused, blocks @ C_m
//! head: linear C_m -> 3
//! ```
//!
//! Blocks in a stage listed in `hoa_stages` are high-order blocks; the rest
//! are first-order blocks.

mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    new_psi, AttentionMap, BlockConfig, FirstOrderBlock, HighOrderBlock, PsiSharing,
};
use crate::encoding::EncoderMode;
use crate::error::{Error, Result};
use crate::layers::{init_uniform, Ctx, Linear};
use crate::numerics::{ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::skeleton::{build_skeleton, HyperboneIndex, OrderCap, SkeletonGraph, TopologySpec};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// Temporal stride of every downsampling convolution.
pub const DOWN_STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Down,
    Up,
    Merge,
    All,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "down" => Ok(Stage::Down),
            "up" => Ok(Stage::Up),
            "merge" => Ok(Stage::Merge),
            "all" => Ok(Stage::All),
            other => Err(format!(
                "unknown stage `{other}` (expected down, up, merge or all)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeFusion {
    #[default]
    Sum,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HDFormerConfig {
    pub frames: usize,
    pub joints: usize,
    pub depth: usize,
    /// Widths `C_0 ..= C_depth`.
    pub channels: Vec<usize>,
    pub merge_channels: usize,
    pub down_blocks: usize,
    pub up_blocks: usize,
    pub merge_blocks: usize,
    pub kernel: usize,
    pub order_cap: OrderCap,
    pub encoder: EncoderMode,
    pub hoa_stages: Vec<Stage>,
    pub merge_fusion: MergeFusion,
    pub positional_encoding: bool,
    pub block: BlockConfig,
}

impl Default for HDFormerConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl HDFormerConfig {
    /// Full-size configuration; see `docs/parameters.md` for the ladder.
    pub fn paper() -> Self {
        Self {
            frames: 96,
            joints: 17,
            depth: 2,
            channels: vec![64, 128, 256],
            merge_channels: 128,
            down_blocks: 1,
            up_blocks: 1,
            merge_blocks: 2,
            kernel: 5,
            order_cap: OrderCap::SpdEdges(4),
            encoder: EncoderMode::SubConcat,
            hoa_stages: vec![Stage::Merge],
            merge_fusion: MergeFusion::Sum,
            positional_encoding: false,
            block: BlockConfig::default(),
        }
    }

    /// Small 17-joint configuration for CPU experiments.
    pub fn desk() -> Self {
        Self {
            frames: 16,
            channels: vec![32, 64, 128],
            merge_channels: 32,
            ..Self::paper()
        }
    }

    /// Five-joint, single-level configuration used by tests.
    pub fn micro() -> Self {
        Self {
            frames: 8,
            joints: 5,
            depth: 1,
            channels: vec![8, 16],
            merge_channels: 8,
            down_blocks: 1,
            up_blocks: 1,
            merge_blocks: 1,
            order_cap: OrderCap::OrderJoints(3),
            block: BlockConfig {
                heads: 2,
                dropout: 0.0,
                ..BlockConfig::default()
            },
            ..Self::paper()
        }
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.hoa_stages.contains(&stage) || self.hoa_stages.contains(&Stage::All)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.joints == 0 {
            return cfg("frames and joints must be positive".into());
        }
        let factor = DOWN_STRIDE.pow(self.depth as u32);
        if !self.frames.is_multiple_of(factor) {
            return cfg(format!(
                "frames {} must be divisible by {factor} (stride {DOWN_STRIDE} over {} levels)",
                self.frames, self.depth
            ));
        }
        if self.channels.len() != self.depth + 1 {
            return cfg(format!(
                "expected {} channel widths for depth {}, got {}",
                self.depth + 1,
                self.depth,
                self.channels.len()
            ));
        }
        if self.channels.contains(&0) || self.merge_channels == 0 {
            return cfg("channel widths must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return cfg(format!("kernel {} must be odd", self.kernel));
        }
        if !self.hoa_stages.is_empty() && self.order_cap.max_order_joints() < 2 {
            return cfg("high-order stages need an order cap of at least 2 joints".into());
        }
        self.block.validate()
    }
}

/// Returns `cfg` with high-order blocks placed in exactly `placement`.
pub fn configure_stage_placement(
    cfg: &HDFormerConfig,
    placement: &[Stage],
) -> Result<HDFormerConfig> {
    let mut stages: Vec<Stage> = placement
        .iter()
        .flat_map(|&s| match s {
            Stage::All => vec![Stage::Down, Stage::Up, Stage::Merge],
            s => vec![s],
        })
        .collect();
    stages.sort();
    stages.dedup();
    if stages.is_empty() && cfg.order_cap.max_order_joints() >= 2 {
        log::warn!("empty high-order placement: building a first-order-only model");
    }
    let out = HDFormerConfig {
        hoa_stages: stages,
        ..cfg.clone()
    };
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum Block {
    First(FirstOrderBlock),
    High(HighOrderBlock),
}

impl Block {
    fn forward(&self, cx: &mut Ctx, z: Var, index: Option<&HyperboneIndex>) -> Result<Var> {
        match self {
            Block::First(b) => b.forward(cx, z),
            Block::High(b) => b.forward(cx, z, index.expect("index built for high-order blocks")),
        }
    }

    /// Attention maps recorded per forward pass.
    pub fn map_count(&self) -> usize {
        match self {
            Block::First(_) => 1,
            Block::High(_) => 2,
        }
    }
}

#[derive(Debug, Clone)]
struct TemporalConv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct DownLevel {
    blocks: Vec<Block>,
    conv: TemporalConv,
}

#[derive(Debug, Clone)]
struct UpLevel {
    project: Linear,
    blocks: Vec<Block>,
}

/// Weights plus bookkeeping that travel with a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ParamStore,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct HDFormer {
    config: HDFormerConfig,
    graph: SkeletonGraph,
    index: Option<HyperboneIndex>,
    pub state: ModelState,
    embed: Linear,
    position: Option<ParamId>,
    down: Vec<DownLevel>,
    bottom: Vec<Block>,
    /// `up[i]` restores level `i`; applied from `depth - 1` down to 0.
    up: Vec<UpLevel>,
    /// One per scale, coarsest first.
    merge_project: Vec<Linear>,
    merge_concat: Option<Linear>,
    merge: Vec<Block>,
    head: Linear,
}

struct Builder<'a> {
    cfg: &'a HDFormerConfig,
    graph: &'a SkeletonGraph,
    index: Option<&'a HyperboneIndex>,
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn blocks(
        &mut self,
        prefix: &str,
        count: usize,
        channels: usize,
        high: bool,
    ) -> Result<Vec<Block>> {
        let shared_psi = (self.cfg.block.use_psi
            && self.cfg.block.psi_sharing == PsiSharing::PerLevel
            && count > 0)
            .then(|| new_psi(&mut self.store, &format!("{prefix}.psi"), self.cfg.joints));
        (0..count)
            .map(|k| {
                let name = format!("{prefix}.b{k}");
                let adjacency = self.graph.adjacency();
                Ok(if high {
                    Block::High(HighOrderBlock::new(
                        &mut self.store,
                        &name,
                        channels,
                        adjacency,
                        shared_psi,
                        self.cfg.encoder,
                        self.index.expect("index built for high-order blocks"),
                        &self.cfg.block,
                        &mut self.rng,
                    )?)
                } else {
                    Block::First(FirstOrderBlock::new(
                        &mut self.store,
                        &name,
                        channels,
                        adjacency,
                        shared_psi,
                        &self.cfg.block,
                        &mut self.rng,
                    )?)
                })
            })
            .collect()
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> Linear {
        Linear::new(&mut self.store, name, n_in, n_out, true, &mut self.rng)
    }
}

/// Builds a freshly initialised model; identical `(cfg, graph, seed)` give
/// identical weights.
pub fn build_model(cfg: &HDFormerConfig, graph: &SkeletonGraph, seed: u64) -> Result<HDFormer> {
    cfg.validate()?;
    if graph.joint_count() != cfg.joints {
        return Err(Error::Config(format!(
            "config expects {} joints but topology `{}` has {}",
            cfg.joints,
            graph.name(),
            graph.joint_count()
        )));
    }
    let index = if cfg.hoa_stages.is_empty() {
        None
    } else {
        let index = graph.enumerate_hyperbones(cfg.order_cap.max_order_joints())?;
        if index.is_empty() {
            return Err(Error::Config(format!(
                "topology `{}` has no hyperbones",
                graph.name()
            )));
        }
        Some(index)
    };
    let mut b = Builder {
        cfg,
        graph,
        index: index.as_ref(),
        store: ParamStore::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let c = &cfg.channels;

    let embed = b.linear("embed", 2, c[0]);
    let position = cfg.positional_encoding.then(|| {
        let t = Tensor::randn(vec![cfg.frames, cfg.joints, c[0]], &mut b.rng);
        let t = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| 0.02 * v).collect(),
        )
        .expect("same shape");
        b.store.add("position", t, ParamKind::Embedding)
    });

    let down_high = cfg.has_stage(Stage::Down);
    let mut down = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let blocks = b.blocks(&format!("down{i}"), cfg.down_blocks, c[i], down_high)?;
        let weight = b.store.add(
            format!("down{i}.conv.weight"),
            init_uniform(
                vec![cfg.kernel, c[i], c[i + 1]],
                cfg.kernel * c[i],
                &mut b.rng,
            ),
            ParamKind::Conv,
        );
        let bias = b.store.add(
            format!("down{i}.conv.bias"),
            Tensor::zeros(vec![c[i + 1]]),
            ParamKind::Bias,
        );
        down.push(DownLevel {
            blocks,
            conv: TemporalConv { weight, bias },
        });
    }
    let bottom = b.blocks("bottom", cfg.down_blocks, c[cfg.depth], down_high)?;

    let up_high = cfg.has_stage(Stage::Up);
    let mut up = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let project = b.linear(&format!("up{i}.project"), c[i + 1], c[i]);
        let blocks = b.blocks(&format!("up{i}"), cfg.up_blocks, c[i], up_high)?;
        up.push(UpLevel { project, blocks });
    }

    let cm = cfg.merge_channels;
    let scale_widths: Vec<usize> = (0..=cfg.depth).rev().map(|i| c[i]).collect();
    let merge_project = scale_widths
        .iter()
        .enumerate()
        .map(|(s, &w)| b.linear(&format!("merge.scale{s}"), w, cm))
        .collect();
    let merge_concat = (cfg.merge_fusion == MergeFusion::Concat)
        .then(|| b.linear("merge.fuse", scale_widths.len() * cm, cm));
    let merge = b.blocks("merge", cfg.merge_blocks, cm, cfg.has_stage(Stage::Merge))?;
    let head = b.linear("head", cm, 3);

    let store = b.store;
    Ok(HDFormer {
        config: cfg.clone(),
        graph: graph.clone(),
        index,
        state: ModelState {
            params: store,
            step: 0,
            seed,
        },
        embed,
        position,
        down,
        bottom,
        up,
        merge_project,
        merge_concat,
        merge,
        head,
    })
}

/// Result of an evaluation-mode forward pass.
pub struct Inference {
    pub output: Tensor,
    pub attention: Vec<AttentionMap>,
    pub ladder: Vec<usize>,
}

impl HDFormer {
    pub fn config(&self) -> &HDFormerConfig {
        &self.config
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    pub fn topology(&self) -> TopologySpec {
        self.graph.to_spec()
    }

    pub fn hyperbones(&self) -> Option<&HyperboneIndex> {
        self.index.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.state.params
    }

    pub fn param_count(&self) -> usize {
        self.state.params.count()
    }

    /// Number of attention maps one forward pass records.
    pub fn attention_map_count(&self) -> usize {
        self.blocks().map(Block::map_count).sum()
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.down
            .iter()
            .flat_map(|d| &d.blocks)
            .chain(&self.bottom)
            .chain(self.up.iter().rev().flat_map(|u| &u.blocks))
            .chain(&self.merge)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [self.config.frames, self.config.joints, 2];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::invalid(
                "forward",
                format!(
                    "expected input [B, {}, {}, 2], got {shape:?}",
                    want[0], want[1]
                ),
            ));
        }
        Ok(())
    }

    /// Maps `x: [B, T, J, 2]` to `[B, T, J, 3]` on the tape.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        self.forward_traced(cx, x, None)
    }

    /// Like [`HDFormer::forward`]; appends the temporal extent after the
    /// embedding, each downsampling and each upsampling to `ladder`.
    pub fn forward_traced(
        &self,
        cx: &mut Ctx,
        x: Var,
        mut ladder: Option<&mut Vec<usize>>,
    ) -> Result<Var> {
        self.check_input(cx.tape.shape(x))?;
        let index = self.index.as_ref();
        let frames = self.config.frames;
        let mut trace = |cx: &Ctx, v: Var| {
            if let Some(l) = ladder.as_deref_mut() {
                l.push(cx.tape.shape(v)[1]);
            }
        };

        let mut z = self.embed.forward(cx, x)?;
        if let Some(p) = self.position {
            let pv = cx.var(p);
            z = cx.tape.add(z, pv)?;
        }
        trace(cx, z);

        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            for blk in &level.blocks {
                z = blk.forward(cx, z, index)?;
            }
            skips.push(z);
            let (w, b) = (cx.var(level.conv.weight), cx.var(level.conv.bias));
            z = cx.tape.temporal_conv(z, w, Some(b), DOWN_STRIDE)?;
            z = cx.tape.activation(z, self.config.block.activation);
            trace(cx, z);
        }
        for blk in &self.bottom {
            z = blk.forward(cx, z, index)?;
        }

        let mut scales = vec![z];
        for (level, skip) in self.up.iter().zip(&skips).rev() {
            let target = cx.tape.shape(*skip)[1];
            z = cx.tape.temporal_upsample(z, target)?;
            trace(cx, z);
            z = level.project.forward(cx, z)?;
            z = cx.tape.add(z, *skip)?;
            for blk in &level.blocks {
                z = blk.forward(cx, z, index)?;
            }
            scales.push(z);
        }

        let mut projected = Vec::with_capacity(scales.len());
        for (s, proj) in scales.iter().zip(&self.merge_project) {
            let full = if cx.tape.shape(*s)[1] == frames {
                *s
            } else {
                cx.tape.temporal_upsample(*s, frames)?
            };
            projected.push(proj.forward(cx, full)?);
        }
        let mut z = match &self.merge_concat {
            Some(fuse) => {
                let cat = cx.tape.concat_lastdim(&projected)?;
                fuse.forward(cx, cat)?
            }
            None => {
                let mut acc = projected[0];
                for &p in &projected[1..] {
                    acc = cx.tape.add(acc, p)?;
                }
                acc
            }
        };
        for blk in &self.merge {
            z = blk.forward(cx, z, index)?;
        }
        self.head.forward(cx, z)
    }

    /// Evaluation-mode forward on frozen weights.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer(x, false)?.output)
    }

    /// Evaluation-mode forward that also returns attention maps and the
    /// temporal ladder when `record` is set.
    pub fn infer(&self, x: &Tensor, record: bool) -> Result<Inference> {
        let mut tape = Tape::new();
        let vars = self.state.params.bind_frozen(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        let mut maps = Vec::new();
        let mut ladder = Vec::new();
        let mut cx = Ctx {
            tape: &mut tape,
            vars: &vars,
            train: false,
            rng: &mut rng,
            recorder: record.then_some(&mut maps),
        };
        let xv = cx.tape.constant(x.clone());
        let y = self.forward_traced(&mut cx, xv, Some(&mut ladder))?;
        Ok(Inference {
            output: tape.value(y).clone(),
            attention: maps,
            ladder,
        })
    }

    /// Parameter counts grouped by the first name component.
    pub fn param_breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.state.params.iter() {
            let group = p.name.split('.').next().unwrap_or("").to_string();
            *out.entry(group).or_insert(0) += p.tensor.numel();
        }
        out
    }
}

/// Builds a model from a topology description.
pub fn build_model_for(
    cfg: &HDFormerConfig,
    topology: &TopologySpec,
    seed: u64,
) -> Result<HDFormer> {
    let graph = build_skeleton(topology)?;
    build_model(cfg, &graph, seed)
}
