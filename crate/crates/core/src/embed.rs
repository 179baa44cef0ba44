//! Interaction embeddings: categorical tables with mask and cls rows,
//! scalar-scaled latent vectors for continuous features, and axial
//! positional embeddings. Everything is summed per time step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Feature, FeatureSet, FeatureValue, Interaction, NUM_PARTS};
use crate::error::{Error, Result};
use crate::numcore::{Ctx, ParamId, ParamStore, Var};

pub const INIT_STD: f64 = 0.02;

/// What occupies one feature slot of a token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slot {
    Value(FeatureValue),
    Mask,
    Cls,
}

/// Per-feature slots of one time step; `None` marks an absent feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Token {
    pub slots: [Option<Slot>; 8],
}

impl Token {
    pub fn cls() -> Self {
        Token {
            slots: [Some(Slot::Cls); 8],
        }
    }

    /// Observed values, with `masked` features replaced by the mask symbol.
    pub fn from_interaction(i: &Interaction, masked: FeatureSet) -> Self {
        let mut slots = [None; 8];
        for f in Feature::ALL {
            slots[f as usize] = Some(if masked.contains(f) {
                Slot::Mask
            } else {
                Slot::Value(i.feature(f))
            });
        }
        Token { slots }
    }

    pub fn slot(&self, f: Feature) -> Option<Slot> {
        self.slots[f as usize]
    }
}

/// A cls token followed by one token per interaction. Interactions at
/// positions flagged in `mask_flags` have `masked` features hidden.
pub fn token_sequence(
    interactions: &[Interaction],
    mask_flags: Option<&[bool]>,
    masked: FeatureSet,
) -> Vec<Token> {
    let mut out = Vec::with_capacity(interactions.len() + 1);
    out.push(Token::cls());
    for (t, i) in interactions.iter().enumerate() {
        let hidden = match mask_flags {
            Some(flags) if flags[t] => masked,
            _ => FeatureSet::empty(),
        };
        out.push(Token::from_interaction(i, hidden));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    pub num_exercises: usize,
    pub d_emb: usize,
    pub axial_shape: [usize; 2],
    pub axial_dims: [usize; 2],
}

impl EmbedConfig {
    pub fn max_positions(&self) -> usize {
        self.axial_shape[0] * self.axial_shape[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_exercises == 0 || self.d_emb == 0 {
            return Err(Error::invalid("embedding needs exercises and d_emb >= 1"));
        }
        if self.axial_dims[0] + self.axial_dims[1] != self.d_emb {
            return Err(Error::invalid(format!(
                "axial dims {:?} must sum to d_emb {}",
                self.axial_dims, self.d_emb
            )));
        }
        if self.axial_shape.contains(&0) || self.axial_dims.contains(&0) {
            return Err(Error::invalid("axial shape and dims must be positive"));
        }
        Ok(())
    }
}

/// Number of ordinary values of a categorical feature.
pub fn cardinality(f: Feature, num_exercises: usize) -> usize {
    match f {
        Feature::Eid => num_exercises,
        Feature::Part => NUM_PARTS,
        Feature::Response => 4,
        Feature::Correctness | Feature::Timeliness => 2,
        _ => 0,
    }
}

/// Embedding parameters shared by every model that reads interactions.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub cfg: EmbedConfig,
    /// Indexed by `Feature as usize`: `[card + 2, d_emb]` tables for
    /// categorical features, `[1, d_emb]` latent vectors for continuous ones.
    pub tables: [ParamId; 8],
    pub axial: [ParamId; 2],
}

impl Embeddings {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: EmbedConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut tables = Vec::with_capacity(8);
        for f in Feature::ALL {
            let rows = if f.is_categorical() {
                cardinality(f, cfg.num_exercises) + 2
            } else {
                1
            };
            tables.push(store.normal(format!("{name}.{f}"), &[rows, cfg.d_emb], INIT_STD, rng)?);
        }
        let mut axial = Vec::with_capacity(2);
        for k in 0..2 {
            axial.push(store.normal(
                format!("{name}.axial{k}"),
                &[cfg.axial_shape[k], cfg.axial_dims[k]],
                INIT_STD,
                rng,
            )?);
        }
        Ok(Embeddings {
            tables: tables.try_into().expect("eight features"),
            axial: axial.try_into().expect("two factors"),
            cfg,
        })
    }

    pub fn table(&self, f: Feature) -> ParamId {
        self.tables[f as usize]
    }

    pub fn cardinality(&self, f: Feature) -> usize {
        cardinality(f, self.cfg.num_exercises)
    }

    /// Table row of a categorical slot.
    pub fn categorical_row(&self, f: Feature, slot: Slot) -> Result<usize> {
        let card = self.cardinality(f);
        match slot {
            Slot::Value(FeatureValue::Cat(i)) if i < card => Ok(i),
            Slot::Value(FeatureValue::Cat(i)) => Err(Error::Index {
                what: format!("{f} value"),
                index: i,
                limit: card,
            }),
            Slot::Value(v) => Err(Error::invalid(format!("{f} is categorical, got {v:?}"))),
            Slot::Mask => Ok(card),
            Slot::Cls => Ok(card + 1),
        }
    }

    /// Scalar multiplying a continuous latent vector: the value, -1 for mask,
    /// 0 for cls.
    pub fn continuous_coefficient(&self, f: Feature, slot: Slot) -> Result<f64> {
        match slot {
            Slot::Value(FeatureValue::Cont(v)) if (-1.0..=1.0).contains(&v) => Ok(v),
            Slot::Value(FeatureValue::Cont(v)) => {
                Err(Error::invalid(format!("{f} value {v} outside [-1, 1]")))
            }
            Slot::Value(v) => Err(Error::invalid(format!("{f} is continuous, got {v:?}"))),
            Slot::Mask => Ok(-1.0),
            Slot::Cls => Ok(0.0),
        }
    }

    pub fn embed_categorical(&self, store: &ParamStore, f: Feature, slot: Slot) -> Result<Vec<f64>> {
        if !f.is_categorical() {
            return Err(Error::invalid(format!("{f} is not categorical")));
        }
        let row = self.categorical_row(f, slot)?;
        Ok(store.get(self.table(f)).row(row).to_vec())
    }

    pub fn embed_continuous(&self, store: &ParamStore, f: Feature, slot: Slot) -> Result<Vec<f64>> {
        if f.is_categorical() {
            return Err(Error::invalid(format!("{f} is not continuous")));
        }
        let c = self.continuous_coefficient(f, slot)?;
        Ok(store.get(self.table(f)).data().iter().map(|e| c * e).collect())
    }

    fn axial_rows(&self, position: usize) -> Result<(usize, usize)> {
        if position >= self.cfg.max_positions() {
            return Err(Error::Index {
                what: "position".into(),
                index: position,
                limit: self.cfg.max_positions(),
            });
        }
        let n2 = self.cfg.axial_shape[1];
        Ok((position / n2, position % n2))
    }

    pub fn axial_position_embedding(&self, store: &ParamStore, position: usize) -> Result<Vec<f64>> {
        let (r, c) = self.axial_rows(position)?;
        let mut out = store.get(self.axial[0]).row(r).to_vec();
        out.extend_from_slice(store.get(self.axial[1]).row(c));
        Ok(out)
    }

    /// Sum of the `inputs` feature embeddings of `token` plus its position.
    pub fn embed_interaction(
        &self,
        store: &ParamStore,
        token: &Token,
        position: usize,
        inputs: FeatureSet,
    ) -> Result<Vec<f64>> {
        let mut out = self.axial_position_embedding(store, position)?;
        for f in inputs.iter() {
            let slot = token
                .slot(f)
                .ok_or_else(|| Error::invalid(format!("token is missing feature {f}")))?;
            let v = if f.is_categorical() {
                self.embed_categorical(store, f, slot)?
            } else {
                self.embed_continuous(store, f, slot)?
            };
            out.iter_mut().zip(&v).for_each(|(o, x)| *o += x);
        }
        Ok(out)
    }

    /// Graph version of [`Embeddings::embed_interaction`] over a whole token
    /// sequence, positions `0..tokens.len()`. Returns `[L, d_emb]`.
    pub fn forward(&self, ctx: &mut Ctx, tokens: &[Token], inputs: FeatureSet) -> Result<Var> {
        let len = tokens.len();
        if len == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        let (rows, cols): (Vec<_>, Vec<_>) = (0..len)
            .map(|p| self.axial_rows(p))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let a0 = ctx.p(self.axial[0]);
        let a1 = ctx.p(self.axial[1]);
        let p0 = ctx.g.gather(a0, rows)?;
        let p1 = ctx.g.gather(a1, cols)?;
        let mut sum = ctx.g.concat_cols(&[p0, p1])?;

        for f in inputs.iter() {
            let slots = tokens
                .iter()
                .map(|t| t.slot(f).ok_or_else(|| Error::invalid(format!("token is missing feature {f}"))))
                .collect::<Result<Vec<_>>>()?;
            let table = ctx.p(self.table(f));
            let e = if f.is_categorical() {
                let idx = slots
                    .iter()
                    .map(|&s| self.categorical_row(f, s))
                    .collect::<Result<Vec<_>>>()?;
                ctx.g.gather(table, idx)?
            } else {
                let coef = slots
                    .iter()
                    .map(|&s| self.continuous_coefficient(f, s))
                    .collect::<Result<Vec<_>>>()?;
                let c = ctx.g.constant(crate::numcore::Tensor::matrix(len, 1, coef)?);
                ctx.g.matmul(c, table)?
            };
            sum = ctx.g.add(sum, e)?;
        }
        Ok(sum)
    }

    /// Output logits over ordinary values of categorical `f`, tied to its
    /// table: `h · E_f[0..card]ᵀ`. `h` is `[rows, d_emb]`.
    pub fn tied_logits(&self, ctx: &mut Ctx, f: Feature, h: Var) -> Result<Var> {
        let card = self.cardinality(f);
        let table = ctx.p(self.table(f));
        let rows = ctx.g.gather(table, (0..card).collect())?;
        ctx.g.matmul_nt(h, rows)
    }

    /// `h · e_fᵀ` for a continuous feature's latent vector, `[rows, 1]`.
    pub fn tied_scalar(&self, ctx: &mut Ctx, f: Feature, h: Var) -> Result<Var> {
        let e = ctx.p(self.table(f));
        ctx.g.matmul_nt(h, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Response;
    use crate::numcore::{Mode, Reduction};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EmbedConfig {
        EmbedConfig {
            num_exercises: 20,
            d_emb: 12,
            axial_shape: [4, 4],
            axial_dims: [4, 8],
        }
    }

    fn setup() -> (ParamStore, Embeddings) {
        let mut store = ParamStore::new();
        let emb = Embeddings::new(&mut store, "emb", cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (store, emb)
    }

    fn interaction() -> Interaction {
        Interaction {
            eid: 7,
            part: 3,
            response: Response::B,
            correctness: false,
            elapsed_time: 0.25,
            timeliness: true,
            exp_time: 0.5,
            inactive_time: 0.75,
        }
    }

    fn cat(i: usize) -> Slot {
        Slot::Value(FeatureValue::Cat(i))
    }

    #[test]
    fn response_table_has_six_rows() {
        let (store, emb) = setup();
        assert_eq!(store.get(emb.table(Feature::Response)).shape(), &[6, 12]);
        assert_eq!(store.get(emb.table(Feature::Part)).shape(), &[9, 12]);
        let a = emb.embed_categorical(&store, Feature::Response, cat(0)).unwrap();
        let b = emb.embed_categorical(&store, Feature::Response, cat(1)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, emb.embed_categorical(&store, Feature::Response, cat(0)).unwrap());
        assert!(emb.embed_categorical(&store, Feature::Response, cat(4)).is_err());
        let mask = emb.embed_categorical(&store, Feature::Response, Slot::Mask).unwrap();
        assert_eq!(mask, store.get(emb.table(Feature::Response)).row(4));
    }

    #[test]
    fn continuous_scaling_mask_and_cls() {
        let (store, emb) = setup();
        let f = Feature::ElapsedTime;
        let e = store.get(emb.table(f)).data().to_vec();
        let half = emb.embed_continuous(&store, f, Slot::Value(FeatureValue::Cont(0.5))).unwrap();
        assert!(half.iter().zip(&e).all(|(h, e)| *h == 0.5 * e));
        assert!(emb.embed_continuous(&store, f, Slot::Cls).unwrap().iter().all(|&v| v == 0.0));
        let one = emb.embed_continuous(&store, f, Slot::Value(FeatureValue::Cont(1.0))).unwrap();
        let mask = emb.embed_continuous(&store, f, Slot::Mask).unwrap();
        assert!(one.iter().zip(&mask).all(|(a, b)| *a == -b));
        assert!(emb.embed_continuous(&store, f, Slot::Value(FeatureValue::Cont(1.5))).is_err());
    }

    #[test]
    fn axial_rows_and_columns() {
        let (store, emb) = setup();
        let p0 = emb.axial_position_embedding(&store, 0).unwrap();
        let p1 = emb.axial_position_embedding(&store, 1).unwrap();
        let p4 = emb.axial_position_embedding(&store, 4).unwrap();
        assert_eq!(p0[..4], p1[..4]);
        assert_ne!(p0[4..], p1[4..]);
        assert_eq!(p0[4..], p4[4..]);
        assert_ne!(p0[..4], p4[..4]);
        assert!(emb.axial_position_embedding(&store, 16).is_err());
    }

    #[test]
    fn axial_parameter_count_at_default_shape() {
        let mut store = ParamStore::new();
        let cfg = EmbedConfig {
            num_exercises: 1,
            d_emb: 256,
            axial_shape: [32, 32],
            axial_dims: [64, 192],
        };
        let emb = Embeddings::new(&mut store, "e", cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n: usize = emb.axial.iter().map(|&id| store.get(id).numel()).sum();
        assert_eq!(n, 8192);
    }

    #[test]
    fn cls_token_is_positional_only() {
        let (store, emb) = setup();
        let cls = Token::cls();
        let inputs = FeatureSet::of(&Feature::CONTINUOUS);
        let v = emb.embed_interaction(&store, &cls, 3, inputs).unwrap();
        assert_eq!(v, emb.axial_position_embedding(&store, 3).unwrap());
    }

    #[test]
    fn linear_in_a_continuous_feature() {
        let (store, emb) = setup();
        let mut i = interaction();
        let all = FeatureSet::all();
        i.exp_time = 0.8;
        let hi = emb.embed_interaction(&store, &Token::from_interaction(&i, FeatureSet::empty()), 2, all).unwrap();
        i.exp_time = 0.4;
        let lo = emb.embed_interaction(&store, &Token::from_interaction(&i, FeatureSet::empty()), 2, all).unwrap();
        let e = store.get(emb.table(Feature::ExpTime)).data();
        for k in 0..12 {
            assert!((hi[k] - lo[k] - 0.4 * e[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn full_interaction_matches_hand_sum() {
        let (store, emb) = setup();
        let i = interaction();
        let tok = Token::from_interaction(&i, FeatureSet::empty());
        let got = emb.embed_interaction(&store, &tok, 5, FeatureSet::all()).unwrap();
        let mut want = emb.axial_position_embedding(&store, 5).unwrap();
        let rows = [(Feature::Eid, 7), (Feature::Part, 3), (Feature::Response, 1), (Feature::Correctness, 0), (Feature::Timeliness, 1)];
        for (f, r) in rows {
            let row = store.get(emb.table(f)).row(r);
            want.iter_mut().zip(row).for_each(|(w, x)| *w += x);
        }
        for (f, v) in [(Feature::ElapsedTime, 0.25), (Feature::ExpTime, 0.5), (Feature::InactiveTime, 0.75)] {
            let e = store.get(emb.table(f)).data();
            want.iter_mut().zip(e).for_each(|(w, x)| *w += v * x);
        }
        for k in 0..12 {
            assert!((got[k] - want[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn missing_feature_is_an_error() {
        let (store, emb) = setup();
        let mut tok = Token::from_interaction(&interaction(), FeatureSet::empty());
        tok.slots[Feature::Part as usize] = None;
        assert!(emb.embed_interaction(&store, &tok, 0, FeatureSet::all()).is_err());
        let mut just_eid = FeatureSet::all();
        just_eid.remove(Feature::Part);
        assert!(emb.embed_interaction(&store, &tok, 0, just_eid).is_ok());
    }

    #[test]
    fn graph_forward_matches_lookup_and_masks() {
        let (store, emb) = setup();
        let seq = vec![interaction(), Interaction { eid: 2, ..interaction() }];
        let masked = FeatureSet::of(&[Feature::Response]);
        let inputs = FeatureSet::inputs_for(masked);
        assert!(!inputs.contains(Feature::Correctness));
        let tokens = token_sequence(&seq, Some(&[false, true]), masked);
        assert_eq!(tokens[2].slot(Feature::Response), Some(Slot::Mask));
        let mut ctx = Ctx::new(&store, Mode::Eval, 0);
        let out = emb.forward(&mut ctx, &tokens, inputs).unwrap();
        let t = ctx.g.value(out).clone();
        assert_eq!(t.shape(), &[3, 12]);
        for (p, tok) in tokens.iter().enumerate() {
            let want = emb.embed_interaction(&store, tok, p, inputs).unwrap();
            for (k, w) in want.iter().enumerate() {
                assert!((t.at(p, k) - w).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_only_touches_used_row() {
        let (store, emb) = setup();
        let mut ctx = Ctx::new(&store, Mode::Eval, 0);
        let table = ctx.p(emb.table(Feature::Response));
        let row = ctx.g.gather(table, vec![Response::C.index()]).unwrap();
        let loss = ctx.g.mse(row, vec![1.0; 12], Reduction::Sum).unwrap();
        let grads = ctx.g.backward(loss).unwrap();
        let g = grads.params.get(emb.table(Feature::Response)).unwrap();
        for r in 0..6 {
            let nz = g[r * 12..(r + 1) * 12].iter().any(|&x| x != 0.0);
            assert_eq!(nz, r == 2, "row {r}");
        }
    }

    #[test]
    fn shared_tables_are_seen_by_every_reader() {
        let (mut store, emb) = setup();
        let tokens = token_sequence(&[interaction()], None, FeatureSet::empty());
        let before = {
            let mut ctx = Ctx::eval(&store);
            let v = emb.forward(&mut ctx, &tokens, FeatureSet::all()).unwrap();
            ctx.g.value(v).clone()
        };
        store.get_mut(emb.table(Feature::Part)).data_mut()[3 * 12] += 1.0;
        let mut ctx = Ctx::eval(&store);
        let v = emb.forward(&mut ctx, &tokens, FeatureSet::all()).unwrap();
        let after = ctx.g.value(v);
        assert!((after.at(1, 0) - before.at(1, 0) - 1.0).abs() < 1e-12);
        assert_eq!(after.at(0, 0), before.at(0, 0));
    }

    proptest::proptest! {
        #[test]
        fn distinct_positions_have_distinct_embeddings(p in 0usize..16, q in 0usize..16) {
            let (store, emb) = setup();
            let a = emb.axial_position_embedding(&store, p).unwrap();
            let b = emb.axial_position_embedding(&store, q).unwrap();
            proptest::prop_assert_eq!(p == q, a == b);
        }
    }
}
