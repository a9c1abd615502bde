//! Joint self-attention and joint-to-hyperbone cross-attention blocks.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncoderMode, HyperboneEncoder};
use crate::error::{Error, Result};
use crate::layers::{Ctx, LayerNorm, Linear, Mlp};
use crate::numerics::{Activation, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::skeleton::HyperboneIndex;

/// How per-head outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadFusion {
    #[default]
    Sum,
    Concat,
}

/// Scope of a learnable joint bias matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiSharing {
    #[default]
    PerBlock,
    PerLevel,
}

/// Hyperparameters shared by every attention block of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub heads: usize,
    pub fusion: HeadFusion,
    pub use_psi: bool,
    pub psi_sharing: PsiSharing,
    pub pre_norm: bool,
    pub residual: bool,
    pub mlp_ratio: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            fusion: HeadFusion::Sum,
            use_psi: true,
            psi_sharing: PsiSharing::PerBlock,
            pre_norm: true,
            residual: true,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            dropout: 0.3,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("heads must be at least 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    FirstOrder,
    HighOrder,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::FirstOrder => "first_order",
            AttentionKind::HighOrder => "high_order",
        })
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "first_order" => Ok(AttentionKind::FirstOrder),
            "high_order" => Ok(AttentionKind::HighOrder),
            other => Err(format!("unknown attention kind `{other}`")),
        }
    }
}

/// Attention weights of one block, averaged over heads, batch and time.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub block: String,
    pub kind: AttentionKind,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Query, key and value projections for `S` heads of full width `C`, plus the
/// output map used by concat fusion.
#[derive(Debug, Clone)]
pub struct MultiHead {
    pub heads: usize,
    pub channels: usize,
    pub fusion: HeadFusion,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Option<Linear>,
}

impl MultiHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        fusion: HeadFusion,
        rng: &mut impl Rng,
    ) -> Self {
        let width = heads * channels;
        Self {
            heads,
            channels,
            fusion,
            query: Linear::new(store, &format!("{name}.query"), channels, width, false, rng),
            key: Linear::new(store, &format!("{name}.key"), channels, width, false, rng),
            value: Linear::new(store, &format!("{name}.value"), channels, width, false, rng),
            output: (fusion == HeadFusion::Concat)
                .then(|| Linear::new(store, &format!("{name}.output"), width, channels, true, rng)),
        }
    }

    fn split_heads(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x).to_vec();
        let x = cx
            .tape
            .reshape(x, &[s[0], s[1], s[2], self.heads, self.channels])?;
        cx.tape.permute(x, &[0, 1, 3, 2, 4])
    }

    /// Multi-head attention of `queries: [B, T, R, C]` over
    /// `keys: [B, T, K, C]`, with an optional additive logit bias `[R, K]`
    /// applied before scaling. Returns the fused output `[B, T, R, C]`.
    pub fn attend(
        &self,
        cx: &mut Ctx,
        queries: Var,
        keys: Var,
        bias: Option<Var>,
        record: Option<(&str, AttentionKind)>,
    ) -> Result<Var> {
        let qs = cx.tape.shape(queries).to_vec();
        let ks = cx.tape.shape(keys).to_vec();
        if qs.len() != 4
            || ks.len() != 4
            || qs[..2] != ks[..2]
            || qs[3] != self.channels
            || ks[3] != self.channels
        {
            return Err(Error::shape("attend", &qs, &ks));
        }
        if ks[2] == 0 {
            return Err(Error::invalid("attend", "no keys to attend to"));
        }
        let (b, t, rows, cols) = (qs[0], qs[1], qs[2], ks[2]);

        let q = self.query.forward(cx, queries)?;
        let q = self.split_heads(cx, q)?;
        let k = self.key.forward(cx, keys)?;
        let k = self.split_heads(cx, k)?;
        let v = self.value.forward(cx, keys)?;
        let v = self.split_heads(cx, v)?;

        let kt = cx.tape.transpose_last(k)?;
        let mut logits = cx.tape.matmul(q, kt)?;
        if let Some(bias) = bias {
            logits = cx.tape.add(logits, bias)?;
        }
        let logits = cx.tape.scale(logits, 1.0 / (self.channels as f64).sqrt());
        let weights = cx.tape.softmax_lastdim(logits)?;

        if let (Some((name, kind)), Some(rec)) = (record, cx.recorder.as_deref_mut()) {
            let w = cx.tape.value(weights).data();
            let groups = b * t * self.heads;
            let mut data = vec![0.0; rows * cols];
            for g in 0..groups {
                for (d, &x) in data
                    .iter_mut()
                    .zip(&w[g * rows * cols..(g + 1) * rows * cols])
                {
                    *d += x;
                }
            }
            data.iter_mut().for_each(|d| *d /= groups as f64);
            rec.push(AttentionMap {
                block: name.to_string(),
                kind,
                rows,
                cols,
                data,
            });
        }

        let heads_out = cx.tape.matmul(weights, v)?;
        match (&self.output, self.fusion) {
            (_, HeadFusion::Sum) => cx.tape.sum_axis(heads_out, 2),
            (Some(out), HeadFusion::Concat) => {
                let x = cx.tape.permute(heads_out, &[0, 1, 3, 2, 4])?;
                let x = cx
                    .tape
                    .reshape(x, &[b, t, rows, self.heads * self.channels])?;
                out.forward(cx, x)
            }
            (None, HeadFusion::Concat) => {
                Err(Error::Config("concat fusion requires an output map".into()))
            }
        }
    }
}

/// Allocates a zero-initialised `[J, J]` joint bias.
pub fn new_psi(store: &mut ParamStore, name: &str, joints: usize) -> ParamId {
    store.add(name, Tensor::zeros(vec![joints, joints]), ParamKind::Psi)
}

fn residual(cx: &mut Ctx, enabled: bool, x: Var, y: Var) -> Result<Var> {
    if enabled {
        cx.tape.add(x, y)
    } else {
        Ok(y)
    }
}

fn maybe_norm(cx: &mut Ctx, norm: &Option<LayerNorm>, x: Var) -> Result<Var> {
    match norm {
        Some(n) => n.forward(cx, x),
        None => Ok(x),
    }
}

/// Self-attention over the joint axis with logits `(Q K^T + A + Psi) / sqrt(C)`,
/// followed by an MLP.
#[derive(Debug, Clone)]
pub struct FirstOrderBlock {
    pub name: String,
    pub adjacency: Tensor,
    pub psi: Option<ParamId>,
    pub attention: MultiHead,
    pub norm_attn: Option<LayerNorm>,
    pub norm_mlp: Option<LayerNorm>,
    pub mlp: Mlp,
    pub dropout: f64,
    pub residual: bool,
}

impl FirstOrderBlock {
    /// `psi` is an externally owned bias (shared sharing); when `None` and the
    /// config enables it, the block allocates its own.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        adjacency: Tensor,
        psi: Option<ParamId>,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let s = adjacency.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::invalid(
                "first_order_block",
                format!("adjacency must be square, got {s:?}"),
            ));
        }
        let joints = s[0];
        let psi = match (cfg.use_psi, psi) {
            (false, _) => None,
            (true, Some(id)) => {
                if store.get(id).shape() != [joints, joints] {
                    return Err(Error::shape("first_order_block", store.get(id).shape(), s));
                }
                Some(id)
            }
            (true, None) => Some(new_psi(store, &format!("{name}.psi"), joints)),
        };
        Ok(Self {
            name: name.to_string(),
            adjacency,
            psi,
            attention: MultiHead::new(
                store,
                &format!("{name}.attn"),
                channels,
                cfg.heads,
                cfg.fusion,
                rng,
            ),
            norm_attn: cfg
                .pre_norm
                .then(|| LayerNorm::new(store, &format!("{name}.norm_attn"), channels)),
            norm_mlp: cfg
                .pre_norm
                .then(|| LayerNorm::new(store, &format!("{name}.norm_mlp"), channels)),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                channels,
                cfg.mlp_ratio,
                cfg.activation,
                cfg.dropout,
                rng,
            ),
            dropout: cfg.dropout,
            residual: cfg.residual,
        })
    }

    pub fn joints(&self) -> usize {
        self.adjacency.shape()[0]
    }

    fn bias(&self, cx: &mut Ctx) -> Result<Var> {
        let a = cx.tape.constant(self.adjacency.clone());
        match self.psi {
            Some(p) => {
                let psi = cx.var(p);
                cx.tape.add(a, psi)
            }
            None => Ok(a),
        }
    }

    /// Fused attention output before dropout, residual and MLP.
    pub fn attend(&self, cx: &mut Ctx, z: Var) -> Result<Var> {
        let shape = cx.tape.shape(z).to_vec();
        if shape.len() != 4 || shape[2] != self.joints() {
            return Err(Error::invalid(
                "first_order_attention",
                format!(
                    "expected {} joints to match the adjacency, got features {shape:?}",
                    self.joints()
                ),
            ));
        }
        let bias = self.bias(cx)?;
        self.attention.attend(
            cx,
            z,
            z,
            Some(bias),
            Some((&self.name, AttentionKind::FirstOrder)),
        )
    }

    pub fn forward(&self, cx: &mut Ctx, z: Var) -> Result<Var> {
        let h = maybe_norm(cx, &self.norm_attn, z)?;
        let a = self.attend(cx, h)?;
        let a = cx.dropout(a, self.dropout)?;
        let z = residual(cx, self.residual, z, a)?;
        let h = maybe_norm(cx, &self.norm_mlp, z)?;
        let m = self.mlp.forward(cx, h)?;
        residual(cx, self.residual, z, m)
    }
}

/// Cross-attention from joint features (queries) to hyperbone features
/// (keys and values), followed by an MLP.
#[derive(Debug, Clone)]
pub struct HighOrderAttention {
    pub name: String,
    pub attention: MultiHead,
    pub norm_query: Option<LayerNorm>,
    pub norm_context: Option<LayerNorm>,
    pub norm_mlp: Option<LayerNorm>,
    pub mlp: Mlp,
    pub dropout: f64,
    pub residual: bool,
}

impl HighOrderAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            name: name.to_string(),
            attention: MultiHead::new(
                store,
                &format!("{name}.attn"),
                channels,
                cfg.heads,
                cfg.fusion,
                rng,
            ),
            norm_query: cfg
                .pre_norm
                .then(|| LayerNorm::new(store, &format!("{name}.norm_query"), channels)),
            norm_context: cfg
                .pre_norm
                .then(|| LayerNorm::new(store, &format!("{name}.norm_context"), channels)),
            norm_mlp: cfg
                .pre_norm
                .then(|| LayerNorm::new(store, &format!("{name}.norm_mlp"), channels)),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                channels,
                cfg.mlp_ratio,
                cfg.activation,
                cfg.dropout,
                rng,
            ),
            dropout: cfg.dropout,
            residual: cfg.residual,
        }
    }

    /// Fused `[B, T, J, C]` cross-attention output before dropout, residual
    /// and MLP; `hyperbones` is `[B, T, M, C]`.
    pub fn attend(&self, cx: &mut Ctx, joints: Var, hyperbones: Var) -> Result<Var> {
        let q = maybe_norm(cx, &self.norm_query, joints)?;
        let kv = maybe_norm(cx, &self.norm_context, hyperbones)?;
        self.attention.attend(
            cx,
            q,
            kv,
            None,
            Some((&self.name, AttentionKind::HighOrder)),
        )
    }

    pub fn forward(&self, cx: &mut Ctx, joints: Var, hyperbones: Var) -> Result<Var> {
        let m = cx.tape.shape(hyperbones).get(2).copied().unwrap_or(0);
        if m == 0 {
            return Err(Error::invalid(
                "high_order_cross_attention",
                "no hyperbones enumerated",
            ));
        }
        let a = self.attend(cx, joints, hyperbones)?;
        let a = cx.dropout(a, self.dropout)?;
        let z = residual(cx, self.residual, joints, a)?;
        let h = maybe_norm(cx, &self.norm_mlp, z)?;
        let y = self.mlp.forward(cx, h)?;
        residual(cx, self.residual, z, y)
    }
}

/// First-order block, hyperbone encoding of its output, then high-order
/// cross-attention.
#[derive(Debug, Clone)]
pub struct HighOrderBlock {
    pub first_order: FirstOrderBlock,
    pub encoder: HyperboneEncoder,
    pub cross: HighOrderAttention,
}

impl HighOrderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        adjacency: Tensor,
        psi: Option<ParamId>,
        encoder: EncoderMode,
        index: &HyperboneIndex,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if index.is_empty() {
            return Err(Error::invalid(
                "high_order_block",
                "no hyperbones enumerated",
            ));
        }
        let first_order = FirstOrderBlock::new(
            store,
            &format!("{name}.foa"),
            channels,
            adjacency,
            psi,
            cfg,
            rng,
        )?;
        Ok(Self {
            first_order,
            encoder: HyperboneEncoder::new(
                store,
                &format!("{name}.encoder"),
                encoder,
                channels,
                index,
                rng,
            ),
            cross: HighOrderAttention::new(store, &format!("{name}.hoa"), channels, cfg, rng),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, z: Var, index: &HyperboneIndex) -> Result<Var> {
        let zhat = self.first_order.forward(cx, z)?;
        let h = self.encoder.encode_all(cx, zhat, index)?;
        self.cross.forward(cx, zhat, h.h)
    }
}

/// Recorded attention maps plus the hyperbone legend for the high-order axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub maps: Vec<AttentionMap>,
    pub legend: Vec<String>,
}

/// Packages maps recorded during a forward pass; `None` means recording was
/// not enabled.
pub fn dump_attention(
    recorded: Option<&[AttentionMap]>,
    index: &HyperboneIndex,
) -> Result<AttentionDump> {
    let maps = recorded.ok_or(Error::RecordingDisabled)?;
    let legend: Vec<String> = index.hyperbones().iter().map(ToString::to_string).collect();
    for m in maps {
        if m.kind == AttentionKind::HighOrder && m.cols != legend.len() {
            return Err(Error::invalid(
                "dump_attention",
                format!(
                    "block `{}` has {} columns but the legend has {}",
                    m.block,
                    m.cols,
                    legend.len()
                ),
            ));
        }
    }
    Ok(AttentionDump {
        maps: maps.to_vec(),
        legend,
    })
}

const ATTN_MAGIC: &str = "HDFATTN 1";

impl AttentionDump {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let mut header = format!(
            "{ATTN_MAGIC}\nmaps {}\nlegend {}\n",
            self.maps.len(),
            self.legend.len()
        );
        for (i, l) in self.legend.iter().enumerate() {
            header.push_str(&format!("{i}\t{l}\n"));
        }
        for m in &self.maps {
            header.push_str(&format!(
                "block {} {} {} {}\n",
                m.block, m.kind, m.rows, m.cols
            ));
        }
        header.push_str("end\n");
        out.extend_from_slice(header.as_bytes());
        for m in &self.maps {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |msg: String| Error::format(path, msg);
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        let mut next = |reader: &mut BufReader<File>| -> Result<String> {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(Error::format(path, "unexpected end of header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        let magic = next(&mut reader)?;
        if magic != ATTN_MAGIC {
            return Err(bad(format!("expected `{ATTN_MAGIC}`, found `{magic}`")));
        }
        let count = |text: String, key: &str| -> Result<usize> {
            text.strip_prefix(key)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| Error::format(path, format!("expected `{key} <n>`, found `{text}`")))
        };
        let n_maps = count(next(&mut reader)?, "maps")?;
        let n_legend = count(next(&mut reader)?, "legend")?;
        let mut legend = Vec::with_capacity(n_legend);
        for i in 0..n_legend {
            let l = next(&mut reader)?;
            match l.split_once('\t') {
                Some((idx, p)) if idx.parse() == Ok(i) => legend.push(p.to_string()),
                _ => return Err(bad(format!("malformed legend line `{l}`"))),
            }
        }
        let mut shapes = Vec::with_capacity(n_maps);
        for _ in 0..n_maps {
            let l = next(&mut reader)?;
            let f: Vec<&str> = l.split_whitespace().collect();
            let parsed = match f.as_slice() {
                ["block", name, kind, rows, cols] => kind
                    .parse::<AttentionKind>()
                    .ok()
                    .zip(rows.parse::<usize>().ok())
                    .zip(cols.parse::<usize>().ok())
                    .map(|((k, r), c)| (name.to_string(), k, r, c)),
                _ => None,
            };
            shapes.push(parsed.ok_or_else(|| bad(format!("malformed block line `{l}`")))?);
        }
        let end = next(&mut reader)?;
        if end != "end" {
            return Err(bad(format!("expected `end`, found `{end}`")));
        }
        let mut payload = Vec::new();
        reader
            .read_to_end(&mut payload)
            .map_err(|e| Error::io(path, e))?;
        let expected: usize = shapes.iter().map(|(_, _, r, c)| r * c * 8).sum();
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
        let maps = shapes
            .into_iter()
            .map(|(block, kind, rows, cols)| AttentionMap {
                block,
                kind,
                rows,
                cols,
                data: values.by_ref().take(rows * cols).collect(),
            })
            .collect();
        Ok(Self { maps, legend })
    }
}
