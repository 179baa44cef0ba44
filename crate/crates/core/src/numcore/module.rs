use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: a fresh graph, read access to the parameters, the
/// mode, and the RNG that drives dropout and sampling for this pass.
pub struct Ctx<'s> {
    pub g: Graph,
    pub store: &'s ParamStore,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval(store: &'s ParamStore) -> Self {
        Ctx::new(store, Mode::Eval, 0)
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Inverted dropout; the identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.is_train() || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.g.value(x).numel();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.g.mul_const(x, mask)
    }
}

/// Affine map `x·W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights ~ Normal(0, 0.02), zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.normal(format!("{name}.weight"), &[d_in, d_out], 0.02, rng)?;
        let bias = store.zeros(format!("{name}.bias"), &[d_out])?;
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let h = ctx.g.matmul(x, w)?;
        ctx.g.add_row(h, b)
    }
}
