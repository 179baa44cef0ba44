//! Pre-train once, then cross-validate fine-tuning across label fractions.

use serde::Serialize;

use super::config::{ModelConfig, Regime};
use super::finetune::{cross_validate, FinetuneConfig, ReportRow};
use super::models::{prepare_sequence, DpaModel};
use super::pretrain::{derive_seed, run_pretraining, PretrainConfig, PretrainMetrics, PretrainReport, Pretrainer};
use crate::dataio::{Corpus, InteractionSequence};
use crate::error::{Error, Result};

/// Splits the prepared pre-training corpus into training and evaluation
/// sequences; the last `eval` sequences are held out.
pub fn pretrain_split(
    corpus: &[InteractionSequence],
    cfg: &ModelConfig,
    eval: usize,
) -> Result<(Vec<InteractionSequence>, Vec<InteractionSequence>)> {
    let prepared = corpus
        .iter()
        .map(|s| prepare_sequence(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let eval = eval.min(prepared.len() / 2);
    let cut = prepared.len() - eval;
    if cut == 0 {
        return Err(Error::invalid("empty pre-training corpus"));
    }
    let mut train = prepared;
    let held = train.split_off(cut);
    Ok((train, held))
}

/// Pre-trains a fresh model for `regime` (nothing to do for `None`).
pub fn pretrain_regime(
    corpus: &Corpus,
    regime: Regime,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
    on_eval: impl FnMut(&Pretrainer, &PretrainMetrics) -> Result<()>,
) -> Result<(Pretrainer, PretrainReport)> {
    let model = DpaModel::new(model_cfg.clone(), regime, corpus.exercises.len(), derive_seed(&[seed, 100]))?;
    let mut trainer = Pretrainer::new(model, &cfg.optim, derive_seed(&[seed, 101]));
    if regime == Regime::None {
        return Ok((trainer, PretrainReport::default()));
    }
    let (train, eval) = pretrain_split(&corpus.pretrain, model_cfg, cfg.eval_sequences)?;
    let report = run_pretraining(&mut trainer, &train, &eval, cfg, on_eval)?;
    Ok((trainer, report))
}

#[derive(Clone, Debug, Serialize)]
pub struct RegimeRun {
    pub regime: Regime,
    pub seed: u64,
    pub pretrain: Vec<PretrainMetrics>,
    pub rows: Vec<ReportRow>,
}

/// Full pipeline for one regime and seed.
pub fn run_regime(
    corpus: &Corpus,
    regime: Regime,
    model_cfg: &ModelConfig,
    pretrain: &PretrainConfig,
    finetune: &FinetuneConfig,
    fractions: &[f64],
    seed: u64,
) -> Result<RegimeRun> {
    let (trainer, report) = pretrain_regime(corpus, regime, model_cfg, pretrain, seed, |_, _| Ok(()))?;
    let rows = cross_validate(&trainer.model, &corpus.finetune, fractions, finetune, seed)?;
    Ok(RegimeRun {
        regime,
        seed,
        pretrain: report.evaluations,
        rows,
    })
}
