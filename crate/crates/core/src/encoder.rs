//! Performer encoder: a stack of reversible layers over channel halves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::favor::{Kernel, MultiHeadAttention, RandomFeatureState};
use crate::numcore::{Ctx, Linear, ParamId, ParamStore, Tensor, Var};

pub const SCALE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Longest sequence the encoder accepts.
    pub window: usize,
    pub num_features: usize,
    pub redraw_interval: u64,
    pub kernel: Kernel,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 || !self.d_hidden.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "hidden size must be even and positive, got {}",
                self.d_hidden
            )));
        }
        if self.heads == 0 || self.head_dim == 0 || self.d_ff == 0 || self.num_features == 0 {
            return Err(Error::invalid("heads, head_dim, d_ff and num_features must be >= 1"));
        }
        for p in [self.dropout, self.attention_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// `y1 = x1 + Attn(SN(x2))`, `y2 = x2 + FF(SN(y1))`.
#[derive(Clone, Debug)]
pub struct ReversibleLayer {
    pub attention: MultiHeadAttention,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub attention_gain: ParamId,
    pub ff_gain: ParamId,
    pub half: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl ReversibleLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.d_hidden / 2;
        let gain = (half as f64).sqrt();
        Ok(ReversibleLayer {
            attention: MultiHeadAttention::new(
                store,
                &format!("{name}.attention"),
                half,
                cfg.heads,
                cfg.head_dim,
                rng,
            )?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), half, cfg.d_ff, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), cfg.d_ff, half, rng)?,
            attention_gain: store.insert(format!("{name}.attention_gain"), Tensor::vector(vec![gain]))?,
            ff_gain: store.insert(format!("{name}.ff_gain"), Tensor::vector(vec![gain]))?,
            half,
            dropout: cfg.dropout,
            attention_dropout: cfg.attention_dropout,
        })
    }

    fn attention_branch(&self, ctx: &mut Ctx, x2: Var, state: &RandomFeatureState) -> Result<Var> {
        let g = ctx.p(self.attention_gain);
        let n = ctx.g.scale_norm(x2, g, SCALE_NORM_EPS)?;
        let a = self.attention.forward(ctx, n, state)?;
        ctx.dropout(a, self.attention_dropout)
    }

    fn ff_branch(&self, ctx: &mut Ctx, y1: Var) -> Result<Var> {
        let g = ctx.p(self.ff_gain);
        let n = ctx.g.scale_norm(y1, g, SCALE_NORM_EPS)?;
        let h = self.ff_in.forward(ctx, n)?;
        let h = ctx.g.gelu(h);
        let h = ctx.dropout(h, self.dropout)?;
        self.ff_out.forward(ctx, h)
    }

    fn split(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let d = ctx.g.shape(x).get(1).copied().unwrap_or(0);
        if d != 2 * self.half {
            return Err(Error::shape("reversible layer", ctx.g.shape(x), &[0, 2 * self.half]));
        }
        Ok((
            ctx.g.slice_cols(x, 0, self.half)?,
            ctx.g.slice_cols(x, self.half, self.half)?,
        ))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, state: &RandomFeatureState) -> Result<Var> {
        let (x1, x2) = self.split(ctx, x)?;
        let a = self.attention_branch(ctx, x2, state)?;
        let y1 = ctx.g.add(x1, a)?;
        let f = self.ff_branch(ctx, y1)?;
        let y2 = ctx.g.add(x2, f)?;
        ctx.g.concat_cols(&[y1, y2])
    }

    /// Recovers the input of an eval-mode [`ReversibleLayer::forward`].
    pub fn inverse(&self, store: &ParamStore, y: &Tensor, state: &RandomFeatureState) -> Result<Tensor> {
        let mut ctx = Ctx::eval(store);
        let yv = ctx.g.constant(y.clone());
        let (y1, y2) = self.split(&mut ctx, yv)?;
        let f = self.ff_branch(&mut ctx, y1)?;
        let x2 = ctx.g.sub(y2, f)?;
        let a = self.attention_branch(&mut ctx, x2, state)?;
        let x1 = ctx.g.sub(y1, a)?;
        let x = ctx.g.concat_cols(&[x1, x2])?;
        Ok(ctx.g.value(x).clone())
    }
}

/// `N` reversible layers, each with its own random features.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub cfg: EncoderConfig,
    pub layers: Vec<ReversibleLayer>,
}

impl EncoderStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| ReversibleLayer::new(store, &format!("{name}.layer{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(EncoderStack { cfg, layers })
    }

    /// Fresh random-feature states, one per layer.
    pub fn feature_states(&self, rng: &mut impl Rng) -> Result<Vec<RandomFeatureState>> {
        (0..self.layers.len())
            .map(|_| {
                RandomFeatureState::new(
                    self.cfg.num_features,
                    self.cfg.head_dim,
                    self.cfg.kernel,
                    self.cfg.redraw_interval,
                    rng,
                )
            })
            .collect()
    }

    fn check_states(&self, states: &[RandomFeatureState]) -> Result<()> {
        if states.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "{} random-feature states for {} layers",
                states.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var, states: &[RandomFeatureState]) -> Result<Var> {
        self.check_states(states)?;
        let len = ctx.g.shape(h)[0];
        if len > self.cfg.window {
            return Err(Error::invalid(format!(
                "sequence of {len} tokens exceeds the attention window {}; truncate at ingestion",
                self.cfg.window
            )));
        }
        let mut x = h;
        for (layer, state) in self.layers.iter().zip(states) {
            x = layer.forward(ctx, x, state)?;
        }
        Ok(x)
    }

    pub fn inverse(&self, store: &ParamStore, y: &Tensor, states: &[RandomFeatureState]) -> Result<Tensor> {
        self.check_states(states)?;
        let mut x = y.clone();
        for (layer, state) in self.layers.iter().zip(states).rev() {
            x = layer.inverse(store, &x, state)?;
        }
        Ok(x)
    }
}
