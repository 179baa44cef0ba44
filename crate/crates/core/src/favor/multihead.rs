use rand::Rng;

use super::attention::favor_attention_graph;
use super::features::RandomFeatureState;
use crate::error::{Error, Result};
use crate::numcore::{Ctx, Linear, ParamStore, Var};

/// Per-head Q/K/V projections, FAVOR+ per head, concatenation and an output
/// projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub head_dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 || d_model == 0 {
            return Err(Error::invalid("attention needs heads, head_dim and d_model >= 1"));
        }
        let inner = heads * head_dim;
        Ok(MultiHeadAttention {
            heads,
            head_dim,
            query: Linear::new(store, &format!("{name}.query"), d_model, inner, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d_model, inner, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_model, inner, rng)?,
            output: Linear::new(store, &format!("{name}.output"), inner, d_model, rng)?,
        })
    }

    /// `x: [L, d_model]` to `[L, d_model]`. All heads share `state`, whose
    /// dimension must equal `head_dim`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, state: &RandomFeatureState) -> Result<Var> {
        if state.dim() != self.head_dim {
            return Err(Error::invalid(format!(
                "random features of dim {} for heads of dim {}",
                state.dim(),
                self.head_dim
            )));
        }
        if self.query.d_out != self.heads * self.head_dim || self.output.d_in != self.query.d_out {
            return Err(Error::invalid("heads * head_dim does not match the projections"));
        }
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = ctx.g.slice_cols(q, start, self.head_dim)?;
            let kh = ctx.g.slice_cols(k, start, self.head_dim)?;
            let vh = ctx.g.slice_cols(v, start, self.head_dim)?;
            outs.push(favor_attention_graph(&mut ctx.g, qh, kh, vh, state)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            ctx.g.concat_cols(&outs)?
        };
        self.output.forward(ctx, joined)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::favor::attention::favor_attention;
    use crate::favor::features::Kernel;
    use crate::numcore::gradcheck::check_params;
    use crate::numcore::{Mode, Reduction, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "att", 6, 2, 4, &mut rng).unwrap();
        let st = RandomFeatureState::new(8, 4, Kernel::Relu, 0, &mut rng).unwrap();
        let mut ctx = Ctx::eval(&store);
        let x = ctx.g.constant(Tensor::from_fn(&[5, 6], |i| (i as f64 * 0.37).sin()));
        let y = mha.forward(&mut ctx, x, &st).unwrap();
        assert_eq!(ctx.g.shape(y), &[5, 6]);
        let wrong = RandomFeatureState::new(8, 3, Kernel::Relu, 0, &mut rng).unwrap();
        assert!(mha.forward(&mut ctx, x, &wrong).is_err());
    }

    #[test]
    fn identity_single_head_is_plain_favor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "att", 4, 1, 4, &mut rng).unwrap();
        for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
            store.set(lin.weight, Tensor::identity(4)).unwrap();
        }
        let st = RandomFeatureState::new(16, 4, Kernel::Softmax, 0, &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.91).cos());
        let mut ctx = Ctx::eval(&store);
        let xv = ctx.g.constant(x.clone());
        let y = mha.forward(&mut ctx, xv, &st).unwrap();
        let want = favor_attention(&x, &x, &x, &st).unwrap();
        assert!(ctx.g.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn two_heads_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "att", 8, 2, 4, &mut rng).unwrap();
        // Larger weights than the default init keep the check away from the
        // relative-error floor.
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get(id).map(|v| v * 20.0 + 0.01);
            store.set(id, t).unwrap();
        }
        let x = Tensor::from_fn(&[4, 8], |i| (i as f64 * 0.53).sin());
        for kernel in [Kernel::Softmax, Kernel::Relu] {
            let st = RandomFeatureState::new(8, 4, kernel, 0, &mut rng).unwrap();
            let run = |s: &ParamStore| -> Result<(f64, crate::numcore::ParamGrads)> {
                let mut ctx = Ctx::new(s, Mode::Eval, 0);
                let xv = ctx.g.constant(x.clone());
                let y = mha.forward(&mut ctx, xv, &st)?;
                let l = ctx.g.mse(y, vec![0.2; 32], Reduction::Sum)?;
                Ok((ctx.g.value(l).item(), ctx.g.backward(l)?.params))
            };
            let (_, grads) = run(&store).unwrap();
            let report = check_params(&store, &grads, 1e-5, |_| true, |s| Ok(run(s)?.0)).unwrap();
            assert!(report.worst_rel_err <= 1e-3, "{kernel:?}: {report:?}");
        }
    }
}
