//! Score regression on top of a pre-trained network, with k-fold
//! cross-validation, early stopping and label-fraction sweeps.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Regime};
use super::models::{prepare_sequence, DpaModel, ScoreModel};
use super::pretrain::{derive_seed, OptimConfig};
use crate::dataio::{split_folds, subsample_nested, Fold, ScoredSequence};
use crate::error::{Error, Result};
use crate::numcore::{Adam, Ctx, Mode, ParamGrads, ParamStore, Reduction};
use crate::parallel::{map_ordered, Execution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub eval_every: u64,
    /// Evaluations without a new best validation MAE before stopping.
    pub patience: usize,
    /// Hard cap on evaluations per fold.
    pub max_evals: usize,
    pub folds: usize,
    pub optim: OptimConfig,
    pub execution: Execution,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 64,
            eval_every: 10,
            patience: 30,
            max_evals: 1000,
            folds: 5,
            optim: OptimConfig::default(),
            execution: Execution::Parallel,
        }
    }
}

/// Mean absolute error.
pub fn mae(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("MAE of an empty set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape("mae", &[predictions.len()], &[labels.len()]));
    }
    let total: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum();
    Ok(total / predictions.len() as f64)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Truncates and normalizes every sequence for the model window.
pub fn prepare_scored(data: &[ScoredSequence], cfg: &ModelConfig) -> Result<Vec<ScoredSequence>> {
    data.iter()
        .map(|s| {
            Ok(ScoredSequence {
                sequence: prepare_sequence(&s.sequence, cfg)?,
                score: s.score,
            })
        })
        .collect()
}

/// Predictions in score units for `idx` of `data`.
pub fn predict(model: &ScoreModel, data: &[ScoredSequence], idx: &[usize], exec: Execution) -> Result<Vec<f64>> {
    map_ordered(exec, idx, |_, &i| model.predict(&data[i].sequence))
        .into_iter()
        .collect()
}

fn evaluate_mae(model: &ScoreModel, data: &[ScoredSequence], idx: &[usize], exec: Execution) -> Result<f64> {
    let pred = predict(model, data, idx, exec)?;
    let labels: Vec<f64> = idx.iter().map(|&i| f64::from(data[i].score)).collect();
    mae(&pred, &labels)
}

/// Mean squared error gradient on the scaled score over `batch`.
fn score_gradients(
    model: &ScoreModel,
    data: &[ScoredSequence],
    batch: &[usize],
    seeds: &[u64],
    exec: Execution,
) -> Result<(ParamGrads, f64)> {
    let results = map_ordered(exec, batch, |k, &i| -> Result<(ParamGrads, f64)> {
        let mut ctx = Ctx::new(&model.store, Mode::Train, seeds[k]);
        let y = model.forward(&mut ctx, &data[i].sequence)?;
        let loss = ctx.g.mse(y, vec![data[i].scaled_score()], Reduction::Sum)?;
        let value = ctx.g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "fine-tuning loss of student {}",
                data[i].sequence.student_id
            )));
        }
        Ok((ctx.g.backward(loss)?.params, value))
    });
    let mut grads = ParamGrads::new(model.store.len());
    let mut total = 0.0;
    for r in results {
        let (g, v) = r?;
        grads.add_assign(&g);
        total += v;
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((grads, total * scale))
}

/// Outcome of fine-tuning on one fold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub steps: u64,
    pub best_step: u64,
    pub val_mae: f64,
    pub test_mae: f64,
}

/// Trains `base` on `fold.train`, keeps the parameters with the lowest
/// validation MAE, and scores them on `fold.test`.
pub fn finetune_fold(
    base: &ScoreModel,
    data: &[ScoredSequence],
    fold: &Fold,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(ScoreModel, FoldResult)> {
    if fold.train.is_empty() || fold.val.is_empty() || fold.test.is_empty() {
        return Err(Error::invalid("fine-tuning fold with an empty split"));
    }
    if cfg.eval_every == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("eval_every and batch_size must be positive"));
    }
    let exec = cfg.execution;
    let mut model = base.clone();
    let mut adam: Adam = cfg.optim.adam();
    let schedule = cfg.optim.schedule(model.body.d_hidden());
    let n = cfg.batch_size.min(fold.train.len());

    let mut best_store: ParamStore = model.store.clone();
    let mut best_val = evaluate_mae(&model, data, &fold.val, exec)?;
    let mut best_step = 0;
    let mut stale = 0;
    let mut step = 0u64;
    for _ in 0..cfg.max_evals {
        for _ in 0..cfg.eval_every {
            step += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, step, 0]));
            let batch: Vec<usize> = sample(&mut rng, fold.train.len(), n)
                .into_iter()
                .map(|k| fold.train[k])
                .collect();
            let seeds: Vec<u64> = batch.iter().map(|&i| derive_seed(&[seed, step, 1, i as u64])).collect();
            let (grads, _) = score_gradients(&model, data, &batch, &seeds, exec)?;
            adam.step(&mut model.store, &grads, schedule.lr(step)?)?;
        }
        let val = evaluate_mae(&model, data, &fold.val, exec)?;
        if val < best_val {
            best_val = val;
            best_step = step;
            best_store = model.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.store = best_store;
    let test_mae = evaluate_mae(&model, data, &fold.test, exec)?;
    let result = FoldResult {
        fold: 0,
        train_size: fold.train.len(),
        steps: step,
        best_step,
        val_mae: best_val,
        test_mae,
    };
    Ok((model, result))
}

/// One row of a cross-validation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub regime: Regime,
    pub fraction: f64,
    pub seed: u64,
    pub fold: usize,
    pub val_mae: f64,
    pub test_mae: f64,
}

/// Cross-validated fine-tuning of `pretrained` at each label fraction.
/// Folds depend only on `seed`; the training split of each fold is
/// subsampled so that smaller fractions are nested in larger ones.
pub fn cross_validate(
    pretrained: &DpaModel,
    data: &[ScoredSequence],
    fractions: &[f64],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let data = prepare_scored(data, &pretrained.cfg)?;
    let folds = split_folds(data.len(), cfg.folds, derive_seed(&[seed, 1]))?;
    let base = ScoreModel::from_pretrained(pretrained, derive_seed(&[seed, 2]))?;
    let mut rows = Vec::new();
    for &fraction in fractions {
        for (k, fold) in folds.iter().enumerate() {
            let train = subsample_nested(&fold.train, fraction, derive_seed(&[seed, 3, k as u64]))?;
            let sub = Fold {
                train,
                val: fold.val.clone(),
                test: fold.test.clone(),
            };
            let (_, r) = finetune_fold(&base, &data, &sub, cfg, derive_seed(&[seed, 4, k as u64]))?;
            rows.push(ReportRow {
                regime: pretrained.regime,
                fraction,
                seed,
                fold: k,
                val_mae: r.val_mae,
                test_mae: r.test_mae,
            });
        }
    }
    Ok(rows)
}

/// Mean and standard deviation of test MAE per (regime, fraction), averaged
/// first over folds within each seed and then across seeds.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Regime, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.regime && k.1 == r.fraction) {
            keys.push((r.regime, r.fraction));
        }
    }
    keys.into_iter()
        .map(|(regime, fraction)| {
            let sel: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.regime == regime && r.fraction == fraction)
                .collect();
            let mut seeds: Vec<u64> = sel.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            let per_seed: Vec<f64> = seeds
                .iter()
                .map(|s| {
                    let v: Vec<f64> = sel.iter().filter(|r| r.seed == *s).map(|r| r.test_mae).collect();
                    mean_std(&v).0
                })
                .collect();
            let (mean, std) = if seeds.len() > 1 {
                mean_std(&per_seed)
            } else {
                mean_std(&sel.iter().map(|r| r.test_mae).collect::<Vec<_>>())
            };
            SummaryRow {
                regime,
                fraction,
                runs: sel.len(),
                mean_test_mae: mean,
                std_test_mae: std,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub regime: Regime,
    pub fraction: f64,
    pub runs: usize,
    pub mean_test_mae: f64,
    pub std_test_mae: f64,
}
