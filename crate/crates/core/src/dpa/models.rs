use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Regime, TowerSize};
use crate::dataio::{cap_and_normalize, unscale_score, FeatureSet, InteractionSequence, SCORE_MAX, SCORE_MIN};
use crate::embed::{token_sequence, Embeddings, Token};
use crate::encoder::EncoderStack;
use crate::error::{Error, Result};
use crate::favor::RandomFeatureState;
use crate::numcore::{Ctx, Linear, ParamStore, Var};

/// Keeps the most recent interactions that fit next to the cls token and
/// normalizes the time features.
pub fn prepare_sequence(seq: &InteractionSequence, cfg: &ModelConfig) -> Result<InteractionSequence> {
    let mut out = seq.clone();
    out.truncate_front(cfg.max_interactions());
    out.interactions = out
        .interactions
        .iter()
        .map(cap_and_normalize)
        .collect::<Result<_>>()?;
    Ok(out)
}

/// Embedding projection, encoder stack and an output layer.
#[derive(Clone, Debug)]
pub struct Network {
    pub input: Linear,
    pub encoder: EncoderStack,
    pub head: Linear,
    pub states: Vec<RandomFeatureState>,
}

impl Network {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        size: &TowerSize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), cfg.d_emb, size.d_hidden, rng)?;
        let encoder = EncoderStack::new(store, &format!("{name}.encoder"), cfg.encoder_config(size), rng)?;
        let head = Linear::new(store, &format!("{name}.head"), size.d_hidden, d_out, rng)?;
        let states = encoder.feature_states(rng)?;
        Ok(Network {
            input,
            encoder,
            head,
            states,
        })
    }

    pub fn d_hidden(&self) -> usize {
        self.input.d_out
    }

    /// Encoder output, `[L, d_hidden]`.
    pub fn hidden(&self, ctx: &mut Ctx, emb: &Embeddings, tokens: &[Token], inputs: FeatureSet) -> Result<Var> {
        let e = emb.forward(ctx, tokens, inputs)?;
        let h = self.input.forward(ctx, e)?;
        self.encoder.forward(ctx, h, &self.states)
    }

    /// Output layer applied at every position.
    pub fn forward(&self, ctx: &mut Ctx, emb: &Embeddings, tokens: &[Token], inputs: FeatureSet) -> Result<Var> {
        let h = self.hidden(ctx, emb, tokens, inputs)?;
        self.head.forward(ctx, h)
    }

    /// Advances every layer's redraw schedule; returns the number of redraws.
    pub fn tick(&mut self, rng: &mut impl Rng) -> Result<usize> {
        let mut n = 0;
        for s in &mut self.states {
            n += usize::from(s.tick(rng)?);
        }
        Ok(n)
    }
}

/// Everything trained during pre-training under one regime.
#[derive(Clone, Debug)]
pub struct DpaModel {
    pub cfg: ModelConfig,
    pub regime: Regime,
    pub num_exercises: usize,
    pub store: ParamStore,
    pub embeddings: Embeddings,
    /// Small generator whose samples build the replaced sequence.
    pub generator: Option<Network>,
    /// The network handed to fine-tuning: a discriminator (one output per
    /// token) or a reconstruction generator (`d_emb` outputs per token).
    pub main: Network,
}

impl DpaModel {
    pub fn new(cfg: ModelConfig, regime: Regime, num_exercises: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embeddings = Embeddings::new(&mut store, "emb", cfg.embed_config(num_exercises), &mut rng)?;
        let generator = if regime.uses_replacement() {
            Some(Network::new(&mut store, "gen", &cfg, &cfg.generator, cfg.d_emb, &mut rng)?)
        } else {
            None
        };
        let main = if regime.fine_tunes_discriminator() {
            Network::new(&mut store, "dis", &cfg, &cfg.discriminator, 1, &mut rng)?
        } else {
            let size = if regime == Regime::Am && !cfg.am_discriminator_sized {
                &cfg.generator
            } else {
                &cfg.discriminator
            };
            Network::new(&mut store, "model", &cfg, size, cfg.d_emb, &mut rng)?
        };
        Ok(DpaModel {
            cfg,
            regime,
            num_exercises,
            store,
            embeddings,
            generator,
            main,
        })
    }

    pub fn networks_mut(&mut self) -> impl Iterator<Item = &mut Network> {
        self.generator.iter_mut().chain(std::iter::once(&mut self.main))
    }

    /// Per-position originality probabilities of a discriminator for an
    /// unmasked sequence, `[T]`.
    pub fn originality(&self, seq: &InteractionSequence) -> Result<Vec<f64>> {
        if !self.regime.fine_tunes_discriminator() {
            return Err(Error::invalid(format!("regime {} has no discriminator", self.regime)));
        }
        let mut ctx = Ctx::eval(&self.store);
        let tokens = token_sequence(&seq.interactions, None, FeatureSet::empty());
        let logits = self.main.forward(&mut ctx, &self.embeddings, &tokens, self.cfg.inputs())?;
        let p = ctx.g.sigmoid(logits);
        Ok(ctx.g.value(p).data()[1..].to_vec())
    }
}

/// A pre-trained network with its output layer replaced by a score head
/// reading the cls position.
#[derive(Clone, Debug)]
pub struct ScoreModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embeddings: Embeddings,
    pub body: Network,
    pub score: Linear,
}

impl ScoreModel {
    /// Copies every pre-trained parameter and adds a fresh score head.
    pub fn from_pretrained(model: &DpaModel, seed: u64) -> Result<Self> {
        let mut store = model.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let score = Linear::new(&mut store, "score", model.main.d_hidden(), 1, &mut rng)?;
        Ok(ScoreModel {
            cfg: model.cfg.clone(),
            store,
            embeddings: model.embeddings.clone(),
            body: model.main.clone(),
            score,
        })
    }

    /// Scaled score prediction, `[1, 1]`.
    pub fn forward(&self, ctx: &mut Ctx, seq: &InteractionSequence) -> Result<Var> {
        let tokens = token_sequence(&seq.interactions, None, FeatureSet::empty());
        let h = self.body.hidden(ctx, &self.embeddings, &tokens, self.cfg.inputs())?;
        let cls = ctx.g.gather(h, vec![0])?;
        self.score.forward(ctx, cls)
    }

    /// Prediction in score units, clamped to the score range.
    pub fn predict(&self, seq: &InteractionSequence) -> Result<f64> {
        let mut ctx = Ctx::eval(&self.store);
        let y = self.forward(&mut ctx, seq)?;
        Ok(unscale_score(ctx.g.value(y).item()).clamp(SCORE_MIN, SCORE_MAX))
    }
}
