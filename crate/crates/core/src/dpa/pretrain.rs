//! Joint generator/discriminator objective, the baselines' objectives, and
//! the pre-training loop.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Regime;
use super::models::{DpaModel, Network};
use crate::dataio::{
    make_masked_sequence, FeatureSet, FeatureValue, Interaction, InteractionSequence,
    ReplacedSequence, Replacement,
};
use crate::embed::{token_sequence, Embeddings};
use crate::error::{Error, Result};
use crate::numcore::{Adam, Ctx, Mode, NoamSchedule, ParamGrads, Reduction, Var};
use crate::parallel::{map_ordered, Execution};

/// SplitMix64 over the parts, for reproducible per-item seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Token-level sums over one or more sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TokenStats {
    pub sequences: usize,
    /// Generator loss: the replacement generator, or the only generator of
    /// AM and AE.
    pub gen_loss: f64,
    pub gen_tokens: usize,
    /// Discriminator loss, or the large generator's loss under RAM and AAM.
    pub dis_loss: f64,
    pub dis_tokens: usize,
    pub dis_correct: usize,
    /// Discriminator tokens whose label is "original".
    pub dis_original: usize,
    pub masked: usize,
    pub replaced: usize,
}

impl TokenStats {
    pub fn add(&mut self, o: &TokenStats) {
        self.sequences += o.sequences;
        self.gen_loss += o.gen_loss;
        self.gen_tokens += o.gen_tokens;
        self.dis_loss += o.dis_loss;
        self.dis_tokens += o.dis_tokens;
        self.dis_correct += o.dis_correct;
        self.dis_original += o.dis_original;
        self.masked += o.masked;
        self.replaced += o.replaced;
    }

    fn ratio(a: f64, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a / b as f64
        }
    }

    pub fn gen_loss_mean(&self) -> f64 {
        Self::ratio(self.gen_loss, self.gen_tokens)
    }

    pub fn dis_loss_mean(&self) -> f64 {
        Self::ratio(self.dis_loss, self.dis_tokens)
    }

    pub fn dis_accuracy(&self) -> f64 {
        Self::ratio(self.dis_correct as f64, self.dis_tokens)
    }

    /// Accuracy of always predicting the more frequent label.
    pub fn majority_accuracy(&self) -> f64 {
        let orig = self.dis_original;
        Self::ratio(orig.max(self.dis_tokens - orig) as f64, self.dis_tokens)
    }

    /// Share of masked positions whose interaction the generator changed.
    pub fn replaced_rate(&self) -> f64 {
        Self::ratio(self.replaced as f64, self.masked)
    }

    /// Per-token generator loss plus `lambda` times the per-token second term.
    pub fn joint(&self, lambda: f64) -> f64 {
        self.gen_loss_mean() + lambda * self.dis_loss_mean()
    }
}

/// Loss node of one sequence plus its statistics.
pub struct Example {
    pub loss: Var,
    pub stats: TokenStats,
}

fn add_opt(ctx: &mut Ctx, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        Some(a) => ctx.g.add(a, v),
        None => Ok(v),
    }
}

/// Draws an index from unnormalized logits.
fn sample_logits(logits: &[f64], rng: &mut impl Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Summed GenLoss of `features` at interaction `positions` of hidden states
/// `h` (`[T + 1, d_emb]`, row 0 is cls): cross entropy over tied logits for
/// categorical features, squared error of a sigmoid output for continuous
/// ones. With `sample`, also returns the generator's outputs as
/// replacements; sampled values carry no gradient.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    ctx: &mut Ctx,
    emb: &Embeddings,
    h: Var,
    positions: &[usize],
    targets: &[Interaction],
    features: FeatureSet,
    sample: bool,
) -> Result<(Var, Vec<Replacement>)> {
    let rows = positions.iter().map(|t| t + 1).collect();
    let hs = ctx.g.gather(h, rows)?;
    let mut total = None;
    let mut replacements = Vec::new();
    for f in features.iter() {
        let loss = if f.is_categorical() {
            let logits = emb.tied_logits(ctx, f, hs)?;
            let goal = positions
                .iter()
                .map(|&t| match targets[t].feature(f) {
                    FeatureValue::Cat(i) => Ok(i),
                    v => Err(Error::invalid(format!("{f} target {v:?} is not categorical"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if sample {
                let card = emb.cardinality(f);
                let values = ctx.g.value(logits).data().to_vec();
                for (k, &t) in positions.iter().enumerate() {
                    let i = sample_logits(&values[k * card..(k + 1) * card], &mut ctx.rng);
                    replacements.push(Replacement {
                        position: t,
                        feature: f,
                        value: FeatureValue::Cat(i),
                    });
                }
            }
            ctx.g.cross_entropy(logits, goal, Reduction::Sum)?
        } else {
            let s = emb.tied_scalar(ctx, f, hs)?;
            let out = ctx.g.sigmoid(s);
            let goal = positions
                .iter()
                .map(|&t| match targets[t].feature(f) {
                    FeatureValue::Cont(x) => Ok(x),
                    v => Err(Error::invalid(format!("{f} target {v:?} is not continuous"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if sample {
                let values = ctx.g.value(out).data().to_vec();
                for (k, &t) in positions.iter().enumerate() {
                    replacements.push(Replacement {
                        position: t,
                        feature: f,
                        value: FeatureValue::Cont(values[k]),
                    });
                }
            }
            ctx.g.mse(out, goal, Reduction::Sum)?
        };
        total = Some(add_opt(ctx, total, loss)?);
    }
    let total = total.ok_or_else(|| Error::invalid("no features to predict"))?;
    Ok((total, replacements))
}

/// Summed binary cross entropy of the discriminator at `positions`, with
/// label 1 for original tokens. Returns the loss and the number of correct
/// 0.5-threshold decisions.
pub fn discriminator_objective(
    ctx: &mut Ctx,
    disc: &Network,
    emb: &Embeddings,
    replaced: &[Interaction],
    originality: &[bool],
    positions: &[usize],
    inputs: FeatureSet,
) -> Result<(Var, usize)> {
    let tokens = token_sequence(replaced, None, FeatureSet::empty());
    let logits = disc.forward(ctx, emb, &tokens, inputs)?;
    let probs = ctx.g.sigmoid(logits);
    let sel = ctx.g.gather(probs, positions.iter().map(|t| t + 1).collect())?;
    let labels: Vec<f64> = positions.iter().map(|&t| f64::from(u8::from(originality[t]))).collect();
    let correct = ctx
        .g
        .value(sel)
        .data()
        .iter()
        .zip(&labels)
        .filter(|(p, y)| (**p > 0.5) == (**y > 0.5))
        .count();
    let loss = ctx.g.binary_cross_entropy(sel, labels, Reduction::Sum)?;
    Ok((loss, correct))
}

/// The regime's pre-training loss for one prepared sequence. Masking,
/// sampling and dropout draw from `ctx.rng`.
pub fn example_loss(model: &DpaModel, ctx: &mut Ctx, seq: &InteractionSequence) -> Result<Example> {
    let cfg = &model.cfg;
    let emb = &model.embeddings;
    let inputs = cfg.inputs();
    let features = cfg.masked_features;
    let len = seq.len();
    let all: Vec<usize> = (0..len).collect();
    let mut stats = TokenStats {
        sequences: 1,
        ..TokenStats::default()
    };

    if model.regime == Regime::None {
        return Err(Error::invalid("the none regime has no pre-training objective"));
    }
    if model.regime == Regime::Ae {
        let tokens = token_sequence(&seq.interactions, None, FeatureSet::empty());
        let h = model.main.forward(ctx, emb, &tokens, inputs)?;
        let (loss, _) = generator_objective(ctx, emb, h, &all, &seq.interactions, features, false)?;
        stats.gen_loss = ctx.g.value(loss).item();
        stats.gen_tokens = len * features.len();
        return Ok(Example { loss, stats });
    }

    let masked = make_masked_sequence(seq, cfg.mask_ratio, features, &mut ctx.rng)?;
    let flags = masked.mask_flags();
    let tokens = token_sequence(&seq.interactions, Some(&flags), features);
    stats.masked = masked.positions.len();
    stats.gen_tokens = masked.positions.len() * features.len();

    let Some(generator) = &model.generator else {
        // AM: one generator, GenLoss only.
        let h = model.main.forward(ctx, emb, &tokens, inputs)?;
        let (loss, _) = generator_objective(ctx, emb, h, &masked.positions, &seq.interactions, features, false)?;
        stats.gen_loss = ctx.g.value(loss).item();
        return Ok(Example { loss, stats });
    };

    let h = generator.forward(ctx, emb, &tokens, inputs)?;
    let (gen_loss, reps) = generator_objective(ctx, emb, h, &masked.positions, &seq.interactions, features, true)?;
    let replaced = ReplacedSequence::build(&masked, &reps)?;
    stats.gen_loss = ctx.g.value(gen_loss).item();
    stats.replaced = replaced.replaced_count();

    let (second, weight) = match model.regime {
        Regime::Dpa | Regime::Dpa60 => {
            let positions = if model.regime == Regime::Dpa { &all } else { &masked.positions };
            let (loss, correct) = discriminator_objective(
                ctx,
                &model.main,
                emb,
                &replaced.interactions,
                &replaced.originality,
                positions,
                inputs,
            )?;
            stats.dis_tokens = positions.len();
            stats.dis_correct = correct;
            stats.dis_original = positions.iter().filter(|&&t| replaced.originality[t]).count();
            (loss, cfg.lambda)
        }
        Regime::Ram | Regime::Aam => {
            let positions = if model.regime == Regime::Ram { &masked.positions } else { &all };
            let rtokens = token_sequence(&replaced.interactions, None, FeatureSet::empty());
            let h = model.main.forward(ctx, emb, &rtokens, inputs)?;
            let (loss, _) = generator_objective(ctx, emb, h, positions, &seq.interactions, features, false)?;
            stats.dis_tokens = positions.len() * features.len();
            (loss, 1.0)
        }
        _ => unreachable!("handled above"),
    };
    stats.dis_loss = ctx.g.value(second).item();
    let weighted = ctx.g.scale(second, weight);
    let loss = ctx.g.add(gen_loss, weighted)?;
    Ok(Example { loss, stats })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    /// Multiplier on the Noam learning rate.
    pub lr_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 4000,
            lr_factor: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> Adam {
        Adam::new(self.beta1, self.beta2, self.eps)
    }

    pub fn schedule(&self, d_model: usize) -> NoamSchedule {
        NoamSchedule {
            d_model,
            warmup: self.warmup,
            factor: self.lr_factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_sequences: usize,
    pub optim: OptimConfig,
    pub execution: Execution,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200_000,
            batch_size: 64,
            eval_every: 5000,
            eval_sequences: 1000,
            optim: OptimConfig::default(),
            execution: Execution::Parallel,
        }
    }
}

/// One row of the pre-training metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainMetrics {
    pub step: u64,
    pub gen_loss: f64,
    pub dis_loss: f64,
    pub dis_acc: f64,
    pub majority_acc: f64,
    pub replaced_rate: f64,
    pub joint: f64,
}

impl PretrainMetrics {
    pub fn from_stats(step: u64, s: &TokenStats, lambda: f64) -> Self {
        PretrainMetrics {
            step,
            gen_loss: s.gen_loss_mean(),
            dis_loss: s.dis_loss_mean(),
            dis_acc: s.dis_accuracy(),
            majority_acc: s.majority_accuracy(),
            replaced_rate: s.replaced_rate(),
            joint: s.joint(lambda),
        }
    }
}

/// Mean gradient and summed statistics over `batch`.
pub fn batch_gradients(
    model: &DpaModel,
    batch: &[&InteractionSequence],
    mode: Mode,
    seeds: &[u64],
    exec: Execution,
) -> Result<(ParamGrads, TokenStats)> {
    let results = map_ordered(exec, batch, |k, seq| -> Result<(ParamGrads, TokenStats)> {
        let mut ctx = Ctx::new(&model.store, mode, seeds[k]);
        let ex = example_loss(model, &mut ctx, seq)?;
        let value = ctx.g.value(ex.loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "pre-training loss of student {} (gen {}, second term {})",
                seq.student_id, ex.stats.gen_loss, ex.stats.dis_loss
            )));
        }
        Ok((ctx.g.backward(ex.loss)?.params, ex.stats))
    });
    let mut grads = ParamGrads::new(model.store.len());
    let mut stats = TokenStats::default();
    for r in results {
        let (g, s) = r?;
        grads.add_assign(&g);
        stats.add(&s);
    }
    grads.scale(1.0 / batch.len().max(1) as f64);
    Ok((grads, stats))
}

/// Evaluation statistics with fixed masks and samples, dropout off.
pub fn evaluate(model: &DpaModel, data: &[InteractionSequence], seed: u64, exec: Execution) -> Result<TokenStats> {
    let results = map_ordered(exec, data, |k, seq| -> Result<TokenStats> {
        let mut ctx = Ctx::new(&model.store, Mode::Eval, derive_seed(&[seed, u64::MAX, k as u64]));
        Ok(example_loss(model, &mut ctx, seq)?.stats)
    });
    let mut stats = TokenStats::default();
    for r in results {
        stats.add(&r?);
    }
    Ok(stats)
}

/// Pre-training state: model, optimizer and step counter. Every random
/// choice is derived from `(seed, step, ...)`, so a run resumed from a
/// checkpoint continues exactly.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub model: DpaModel,
    pub adam: Adam,
    pub step: u64,
    pub seed: u64,
}

impl Pretrainer {
    pub fn new(model: DpaModel, optim: &OptimConfig, seed: u64) -> Self {
        Pretrainer {
            model,
            adam: optim.adam(),
            step: 0,
            seed,
        }
    }

    /// Hidden size driving the learning-rate schedule.
    pub fn d_model(&self) -> usize {
        self.model.main.d_hidden()
    }

    /// One joint update on a batch drawn from `data`.
    pub fn step(&mut self, data: &[InteractionSequence], cfg: &PretrainConfig) -> Result<TokenStats> {
        if data.is_empty() {
            return Err(Error::invalid("empty pre-training corpus"));
        }
        self.step += 1;
        let step = self.step;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, step, 0]));
        let n = cfg.batch_size.min(data.len()).max(1);
        let idx = sample(&mut rng, data.len(), n).into_vec();
        let batch: Vec<&InteractionSequence> = idx.iter().map(|&i| &data[i]).collect();
        let seeds: Vec<u64> = idx.iter().map(|&i| derive_seed(&[self.seed, step, 1, i as u64])).collect();
        let (grads, stats) = batch_gradients(&self.model, &batch, Mode::Train, &seeds, cfg.execution)?;
        let lr = cfg.optim.schedule(self.d_model()).lr(step)?;
        self.adam.step(&mut self.model.store, &grads, lr)?;
        let mut redraw = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, step, 2]));
        for net in self.model.networks_mut() {
            net.tick(&mut redraw)?;
        }
        Ok(stats)
    }

    /// Total redraws so far over every layer of every network.
    pub fn redraws(&self) -> u64 {
        let nets = self.model.generator.iter().chain(std::iter::once(&self.model.main));
        nets.flat_map(|n| n.states.iter()).map(|s| s.redraws).sum()
    }
}

/// Training and evaluation curves of a pre-training run.
#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub evaluations: Vec<PretrainMetrics>,
    /// Per-step training joint loss.
    pub train_joint: Vec<f64>,
}

/// Runs `cfg.steps - trainer.step` further steps, evaluating on `eval`
/// before the first step and every `cfg.eval_every` steps after it, and
/// after the last step.
pub fn run_pretraining(
    trainer: &mut Pretrainer,
    train: &[InteractionSequence],
    eval: &[InteractionSequence],
    cfg: &PretrainConfig,
    mut on_eval: impl FnMut(&Pretrainer, &PretrainMetrics) -> Result<()>,
) -> Result<PretrainReport> {
    let mut report = PretrainReport::default();
    if trainer.model.regime == Regime::None {
        return Ok(report);
    }
    let lambda = trainer.model.cfg.lambda;
    let eval_seed = trainer.seed;
    let mut do_eval = |t: &Pretrainer, report: &mut PretrainReport| -> Result<()> {
        if eval.is_empty() {
            return Ok(());
        }
        let s = evaluate(&t.model, eval, eval_seed, cfg.execution)?;
        let m = PretrainMetrics::from_stats(t.step, &s, lambda);
        on_eval(t, &m)?;
        report.evaluations.push(m);
        Ok(())
    };
    do_eval(trainer, &mut report)?;
    while trainer.step < cfg.steps {
        let stats = trainer.step(train, cfg)?;
        report.train_joint.push(stats.joint(lambda));
        if cfg.eval_every > 0 && trainer.step.is_multiple_of(cfg.eval_every) && trainer.step < cfg.steps {
            do_eval(trainer, &mut report)?;
        }
    }
    do_eval(trainer, &mut report)?;
    Ok(report)
}

/// Exponential moving average of a curve.
pub fn smooth(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// Number of discriminator loss tokens for a sequence of length `len`.
pub fn dis_loss_tokens(regime: Regime, len: usize, ratio: f64) -> Result<usize> {
    Ok(match regime {
        Regime::Dpa => len,
        Regime::Dpa60 => crate::dataio::mask_count(len, ratio)?,
        _ => 0,
    })
}
