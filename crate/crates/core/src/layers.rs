//! Small building blocks shared by the attention blocks and the network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionMap;
use crate::error::Result;
use crate::numerics::{Activation, Bindings, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};

/// State threaded through one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a Bindings,
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
    /// Collects per-block attention maps when set.
    pub recorder: Option<&'a mut Vec<AttentionMap>>,
}

impl Ctx<'_> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars.var(id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.train, &mut *self.rng)
    }
}

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn init_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(vec![in_dim, out_dim], in_dim, rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                Tensor::zeros(vec![out_dim]),
                ParamKind::Bias,
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.var(self.weight);
        let b = self.bias.map(|b| cx.var(b));
        cx.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::ones(vec![dim]),
                ParamKind::Norm,
            ),
            beta: store.add(
                format!("{name}.beta"),
                Tensor::zeros(vec![dim]),
                ParamKind::Norm,
            ),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.var(self.gamma), cx.var(self.beta));
        cx.tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// Two-layer feed-forward block with dropout after the hidden activation and
/// after the output projection.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ratio: usize,
        activation: Activation,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = dim * ratio;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
            activation,
            dropout,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.activation(h, self.activation);
        let h = cx.dropout(h, self.dropout)?;
        let y = self.fc2.forward(cx, h)?;
        cx.dropout(y, self.dropout)
    }
}
