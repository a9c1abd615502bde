//! Hyperbone feature encoders.
//!
//! An encoder maps the joint features along a hyperbone path to a single
//! feature vector of the joint width `C`. Five variants are provided:
//!
//! | mode             | output                                              |
//! |------------------|-----------------------------------------------------|
//! | `subtraction`    | `f(z_start - z_end)`                                |
//! | `summation`      | `sum_k f(z_k) / n`                                  |
//! | `multiplication` | `prod_k f(z_k)`                                     |
//! | `concatenation`  | `f_n([z_1, ..., z_n])`                              |
//! | `sub_concat`     | `f_n([z_1 - z_2, ..., z_{n-1} - z_n])`              |
//!
//! The first three share one `C -> C` map. The concatenating variants need one
//! map per order because their input width grows with the path length.
//!
//! The free functions (`encode_subtraction`, ...) evaluate a single hyperbone on
//! plain arrays. [`HyperboneEncoder::encode_all`] evaluates every hyperbone on
//! the tape, batched over `B` and `T`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Ctx, Linear};
use crate::numerics::{ParamStore, Tensor, Var};
use crate::skeleton::{Hyperbone, HyperboneIndex, OrderSlice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Subtraction,
    Summation,
    Multiplication,
    Concatenation,
    SubConcat,
}

impl EncoderMode {
    pub const ALL: [EncoderMode; 5] = [
        EncoderMode::Subtraction,
        EncoderMode::Summation,
        EncoderMode::Multiplication,
        EncoderMode::Concatenation,
        EncoderMode::SubConcat,
    ];

    pub fn per_order_maps(self) -> bool {
        matches!(self, EncoderMode::Concatenation | EncoderMode::SubConcat)
    }

    /// Input width of the order-`n` map for joint width `c`.
    pub fn map_input(self, order: usize, c: usize) -> usize {
        match self {
            EncoderMode::Concatenation => order * c,
            EncoderMode::SubConcat => (order - 1) * c,
            _ => c,
        }
    }
}

/// Plain affine map `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
}

impl LinearMap {
    pub fn identity(c: usize) -> Self {
        Self {
            weight: Tensor::eye(c),
            bias: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (n_in, n_out) = (self.in_dim(), self.out_dim());
        if x.len() != n_in {
            return Err(Error::shape("linear_map", &[x.len()], self.weight.shape()));
        }
        let w = self.weight.data();
        let mut y = self.bias.clone().unwrap_or_else(|| vec![0.0; n_out]);
        for (i, &xi) in x.iter().enumerate() {
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += xi * w[i * n_out + o];
            }
        }
        Ok(y)
    }
}

/// Weights of one encoder, keyed by order for the concatenating variants.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderWeights {
    Shared(LinearMap),
    PerOrder(BTreeMap<usize, LinearMap>),
}

fn joint_row(z: &Tensor, joint: usize) -> Result<&[f64]> {
    let s = z.shape();
    if s.len() != 2 || joint >= s[0] {
        return Err(Error::invalid(
            "encode",
            format!("joint {joint} not available in features of shape {s:?}"),
        ));
    }
    Ok(&z.data()[joint * s[1]..(joint + 1) * s[1]])
}

fn order_map(maps: &BTreeMap<usize, LinearMap>, order: usize) -> Result<&LinearMap> {
    maps.get(&order).ok_or_else(|| {
        Error::Config(format!(
            "no linear map configured for hyperbone order {order}"
        ))
    })
}

/// `f(z_start - z_end)` for joint features `z: [J, C]`.
pub fn encode_subtraction(z: &Tensor, hb: &Hyperbone, f: &LinearMap) -> Result<Vec<f64>> {
    let a = joint_row(z, hb.start())?;
    let b = joint_row(z, hb.end())?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    f.apply(&d)
}

/// Mean of `f(z)` over the path joints.
pub fn encode_summation(z: &Tensor, hb: &Hyperbone, f: &LinearMap) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; f.out_dim()];
    for &j in hb.path() {
        for (a, v) in acc.iter_mut().zip(f.apply(joint_row(z, j)?)?) {
            *a += v;
        }
    }
    let n = hb.order() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Element-wise product of `f(z)` over the path joints.
pub fn encode_multiplication(z: &Tensor, hb: &Hyperbone, f: &LinearMap) -> Result<Vec<f64>> {
    let mut acc = vec![1.0; f.out_dim()];
    for &j in hb.path() {
        for (a, v) in acc.iter_mut().zip(f.apply(joint_row(z, j)?)?) {
            *a *= v;
        }
    }
    Ok(acc)
}

/// `f_n` applied to the path-ordered concatenation of joint features.
pub fn encode_concatenation(
    z: &Tensor,
    hb: &Hyperbone,
    maps: &BTreeMap<usize, LinearMap>,
) -> Result<Vec<f64>> {
    let f = order_map(maps, hb.order())?;
    let mut cat = Vec::new();
    for &j in hb.path() {
        cat.extend_from_slice(joint_row(z, j)?);
    }
    f.apply(&cat)
}

/// `f_n` applied to the concatenated consecutive differences along the path.
pub fn encode_sub_concat(
    z: &Tensor,
    hb: &Hyperbone,
    maps: &BTreeMap<usize, LinearMap>,
) -> Result<Vec<f64>> {
    let f = order_map(maps, hb.order())?;
    let mut cat = Vec::new();
    for w in hb.path().windows(2) {
        let (a, b) = (joint_row(z, w[0])?, joint_row(z, w[1])?);
        cat.extend(a.iter().zip(b).map(|(x, y)| x - y));
    }
    f.apply(&cat)
}

/// Dispatches to the single-hyperbone encoder for `mode`.
pub fn encode_one(
    mode: EncoderMode,
    z: &Tensor,
    hb: &Hyperbone,
    weights: &EncoderWeights,
) -> Result<Vec<f64>> {
    match (mode, weights) {
        (EncoderMode::Subtraction, EncoderWeights::Shared(f)) => encode_subtraction(z, hb, f),
        (EncoderMode::Summation, EncoderWeights::Shared(f)) => encode_summation(z, hb, f),
        (EncoderMode::Multiplication, EncoderWeights::Shared(f)) => encode_multiplication(z, hb, f),
        (EncoderMode::Concatenation, EncoderWeights::PerOrder(m)) => encode_concatenation(z, hb, m),
        (EncoderMode::SubConcat, EncoderWeights::PerOrder(m)) => encode_sub_concat(z, hb, m),
        (mode, _) => Err(Error::Config(format!(
            "weights do not match encoder mode {mode:?}"
        ))),
    }
}

/// Stacked hyperbone features `H: [B, T, M, C]` in canonical order.
#[derive(Debug, Clone)]
pub struct HyperboneFeatures {
    pub h: Var,
    pub slices: Vec<OrderSlice>,
}

/// Trainable encoder evaluated on the tape.
#[derive(Debug, Clone)]
pub struct HyperboneEncoder {
    mode: EncoderMode,
    channels: usize,
    shared: Option<Linear>,
    per_order: BTreeMap<usize, Linear>,
}

impl HyperboneEncoder {
    /// Allocates the maps `index` needs: one shared map, or one per order present.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mode: EncoderMode,
        channels: usize,
        index: &HyperboneIndex,
        rng: &mut impl Rng,
    ) -> Self {
        let mut shared = None;
        let mut per_order = BTreeMap::new();
        if mode.per_order_maps() {
            for s in index.slices() {
                let lin = Linear::new(
                    store,
                    &format!("{name}.f{}", s.order),
                    mode.map_input(s.order, channels),
                    channels,
                    true,
                    rng,
                );
                per_order.insert(s.order, lin);
            }
        } else {
            shared = Some(Linear::new(
                store,
                &format!("{name}.f"),
                channels,
                channels,
                true,
                rng,
            ));
        }
        Self {
            mode,
            channels,
            shared,
            per_order,
        }
    }

    pub fn mode(&self) -> EncoderMode {
        self.mode
    }

    /// Current weights as plain maps, for evaluation off the tape.
    pub fn weights(&self, store: &ParamStore) -> EncoderWeights {
        let to_map = |l: &Linear| LinearMap {
            weight: store.get(l.weight).clone(),
            bias: l.bias.map(|b| store.get(b).data().to_vec()),
        };
        match &self.shared {
            Some(l) => EncoderWeights::Shared(to_map(l)),
            None => EncoderWeights::PerOrder(
                self.per_order
                    .iter()
                    .map(|(&o, l)| (o, to_map(l)))
                    .collect(),
            ),
        }
    }

    /// Encodes every hyperbone of `index` from joint features `z: [B, T, J, C]`.
    pub fn encode_all(
        &self,
        cx: &mut Ctx,
        z: Var,
        index: &HyperboneIndex,
    ) -> Result<HyperboneFeatures> {
        let shape = cx.tape.shape(z).to_vec();
        if shape.len() != 4 || shape[3] != self.channels {
            return Err(Error::invalid(
                "encode_all",
                format!(
                    "expected [B, T, J, {}] features, got {shape:?}",
                    self.channels
                ),
            ));
        }
        if index.is_empty() {
            return Err(Error::invalid("encode_all", "hyperbone index is empty"));
        }
        let joints = shape[2];
        if let Some(h) = index
            .hyperbones()
            .iter()
            .find(|h| h.path().iter().any(|&j| j >= joints))
        {
            return Err(Error::invalid(
                "encode_all",
                format!("hyperbone {h} references joints outside the {joints}-joint features"),
            ));
        }
        let slices = index.slices();
        let h = match self.mode {
            EncoderMode::Subtraction => {
                let f = self.shared.as_ref().expect("shared map");
                let starts: Vec<usize> = index.hyperbones().iter().map(Hyperbone::start).collect();
                let ends: Vec<usize> = index.hyperbones().iter().map(Hyperbone::end).collect();
                let a = cx.tape.index_select(z, 2, &starts)?;
                let b = cx.tape.index_select(z, 2, &ends)?;
                let d = cx.tape.sub(a, b)?;
                f.forward(cx, d)?
            }
            EncoderMode::Summation | EncoderMode::Multiplication => {
                let f = self.shared.as_ref().expect("shared map");
                let fz = f.forward(cx, z)?;
                let mut parts = Vec::with_capacity(slices.len());
                for s in &slices {
                    let bones = index.of_order(s.order);
                    let mut acc = None;
                    for k in 0..s.order {
                        let idx: Vec<usize> = bones.iter().map(|h| h.path()[k]).collect();
                        let g = cx.tape.index_select(fz, 2, &idx)?;
                        acc = Some(match acc {
                            None => g,
                            Some(a) if self.mode == EncoderMode::Summation => cx.tape.add(a, g)?,
                            Some(a) => cx.tape.mul(a, g)?,
                        });
                    }
                    let mut y = acc.expect("order >= 2");
                    if self.mode == EncoderMode::Summation {
                        y = cx.tape.scale(y, 1.0 / s.order as f64);
                    }
                    parts.push(y);
                }
                stack(cx, &parts)?
            }
            EncoderMode::Concatenation | EncoderMode::SubConcat => {
                let mut parts = Vec::with_capacity(slices.len());
                for s in &slices {
                    let bones = index.of_order(s.order);
                    let gathered: Vec<Var> = (0..s.order)
                        .map(|k| {
                            let idx: Vec<usize> = bones.iter().map(|h| h.path()[k]).collect();
                            cx.tape.index_select(z, 2, &idx)
                        })
                        .collect::<Result<_>>()?;
                    let pieces = if self.mode == EncoderMode::SubConcat {
                        gathered
                            .windows(2)
                            .map(|w| cx.tape.sub(w[0], w[1]))
                            .collect::<Result<Vec<_>>>()?
                    } else {
                        gathered
                    };
                    let cat = if pieces.len() == 1 {
                        pieces[0]
                    } else {
                        cx.tape.concat_lastdim(&pieces)?
                    };
                    let f = self.per_order.get(&s.order).ok_or_else(|| {
                        Error::Config(format!(
                            "no linear map configured for hyperbone order {}",
                            s.order
                        ))
                    })?;
                    parts.push(f.forward(cx, cat)?);
                }
                stack(cx, &parts)?
            }
        };
        Ok(HyperboneFeatures { h, slices })
    }
}

fn stack(cx: &mut Ctx, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        cx.tape.concat(parts, 2)
    }
}
