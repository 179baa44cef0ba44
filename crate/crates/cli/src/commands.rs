use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dpa_core::dataio::{corpus_stats, synth_generate, Corpus, CorpusStats};
use dpa_core::dpa::{
    cross_validate, derive_seed, evaluate, pretrain_split, run_pretraining, run_regime, summarize,
    Checkpoint, DpaModel, PretrainMetrics, Pretrainer, Regime, RegimeRun, ReportRow, SummaryRow,
};

use crate::bench::{self, BenchRow, RatioRow};
use crate::config::RunConfig;
use crate::report::{write_all, CsvReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain_metrics.csv";
pub const FINETUNE_FILE: &str = "finetune.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_PRETRAIN_FILE: &str = "sweep_pretrain.csv";
pub const BENCH_FILE: &str = "bench_attention.csv";
pub const BENCH_RATIO_FILE: &str = "bench_ratios.csv";
pub const CONFIG_FILE: &str = "config.toml";

const METRIC_COLUMNS: [&str; 7] = ["step", "gen_loss", "dis_loss", "dis_acc", "majority_acc", "replaced_rate", "joint"];
const ROW_COLUMNS: [&str; 6] = ["regime", "fraction", "seed", "fold", "val_mae", "test_mae"];
const SUMMARY_COLUMNS: [&str; 5] = ["regime", "fraction", "runs", "mean_test_mae", "std_test_mae"];

fn header(command: &str, cfg: &RunConfig) -> Result<String> {
    Ok(format!("dpa {command} seed={} config={}", cfg.seed, cfg.to_json_line()?))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

pub fn stats_table(corpus: &Corpus) -> String {
    let row = |name: &str, s: &CorpusStats| {
        format!(
            "{name:<10} {:>8} {:>12} {:>6} {:>6} {:>8.2} {:>8.1} {:>8.3} {:>8.3}\n",
            s.students, s.interactions, s.min_len, s.max_len, s.mean_len, s.median_len, s.correct_ratio, s.timely_ratio
        )
    };
    let mut out = format!(
        "{:<10} {:>8} {:>12} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
        "corpus", "students", "interactions", "min", "max", "mean", "median", "correct", "timely"
    );
    out += &row("pretrain", &corpus_stats(&corpus.pretrain));
    out += &row("finetune", &corpus_stats(corpus.finetune.iter().map(|s| &s.sequence)));
    out += &format!("exercises  {}\n", corpus.exercises.len());
    out
}

pub fn gen_data(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = synth_generate(&cfg.synth, cfg.seed)?;
    corpus
        .save(&cfg.data_dir)
        .with_context(|| format!("writing corpus to {}", cfg.data_dir.display()))?;
    write_config(&cfg.data_dir, cfg)?;
    print!("{}", stats_table(&corpus));
    Ok(corpus)
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.data_dir).with_context(|| format!("loading corpus from {}", cfg.data_dir.display()))
}

fn print_metrics(m: &PretrainMetrics) {
    println!(
        "step {:>7}  gen {:.4}  dis {:.4}  acc {:.4}  majority {:.4}  replaced {:.3}",
        m.step, m.gen_loss, m.dis_loss, m.dis_acc, m.majority_acc, m.replaced_rate
    );
}

/// Runs (or resumes) pre-training, writing a metrics row and a checkpoint
/// at every evaluation. Returns `None` for the regime without pre-training.
pub fn pretrain(cfg: &RunConfig, resume: bool) -> Result<Option<Vec<PretrainMetrics>>> {
    if cfg.regime == Regime::None {
        println!("regime none has no pre-training; nothing to do");
        return Ok(None);
    }
    let corpus = load_corpus(cfg)?;
    let out = &cfg.out_dir;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(PRETRAIN_METRICS_FILE);
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.regime != cfg.regime {
            bail!("checkpoint regime {} differs from configured {}", ckpt.regime, cfg.regime);
        }
        ckpt.restore()?
    } else {
        let model = DpaModel::new(
            cfg.model.clone(),
            cfg.regime,
            corpus.exercises.len(),
            derive_seed(&[cfg.seed, 100]),
        )?;
        Pretrainer::new(model, &cfg.pretrain.optim, derive_seed(&[cfg.seed, 101]))
    };
    let start = trainer.step;
    let mut csv = if resume {
        CsvReport::append(&metrics_path)?
    } else {
        write_config(out, cfg)?;
        CsvReport::create(&metrics_path, &header("pretrain", cfg)?, &METRIC_COLUMNS)?
    };
    let run_config = serde_json::to_value(cfg)?;
    let model_cfg = trainer.model.cfg.clone();
    let (train, eval) = pretrain_split(&corpus.pretrain, &model_cfg, cfg.pretrain.eval_sequences)?;
    let report = run_pretraining(&mut trainer, &train, &eval, &cfg.pretrain, |t, m| {
        if resume && m.step == start {
            return Ok(());
        }
        print_metrics(m);
        csv.row(m).map_err(|e| dpa_core::Error::Io(std::io::Error::other(e)))?;
        let mut ckpt = Checkpoint::capture(t);
        ckpt.run_config = Some(run_config.clone());
        ckpt.save(&ckpt_path)
    })?;
    Ok(Some(report.evaluations))
}

fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>, n_exercises: usize) -> Result<DpaModel> {
    if cfg.regime == Regime::None {
        return Ok(DpaModel::new(cfg.model.clone(), Regime::None, n_exercises, derive_seed(&[cfg.seed, 100]))?);
    }
    let path: PathBuf = checkpoint.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    if !path.exists() {
        bail!("regime {} needs a pre-trained checkpoint; {} not found", cfg.regime, path.display());
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.regime != cfg.regime {
        bail!("checkpoint regime {} differs from configured {}", ckpt.regime, cfg.regime);
    }
    Ok(ckpt.restore()?.model)
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<6} {:>8} {:>5} {:>10} {:>9}", "regime", "fraction", "runs", "mean_mae", "std_mae");
    for s in rows {
        println!(
            "{:<6} {:>8.4} {:>5} {:>10.2} {:>9.2}",
            s.regime.name(),
            s.fraction,
            s.runs,
            s.mean_test_mae,
            s.std_test_mae
        );
    }
}

/// Cross-validated fine-tuning of the configured regime's checkpoint.
pub fn finetune(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<SummaryRow>> {
    let corpus = load_corpus(cfg)?;
    let model = model_for(cfg, checkpoint, corpus.exercises.len())?;
    let rows = cross_validate(&model, &corpus.finetune, &cfg.fractions, &cfg.finetune, cfg.seed)?;
    let head = header("finetune", cfg)?;
    write_all(&cfg.out_dir.join(FINETUNE_FILE), &head, &ROW_COLUMNS, &rows)?;
    let summary = summarize(&rows);
    write_all(&cfg.out_dir.join(SUMMARY_FILE), &head, &SUMMARY_COLUMNS, &summary)?;
    print_summary(&summary);
    Ok(summary)
}

/// Pre-training metrics of a checkpoint on the held-out sequences.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PretrainMetrics> {
    if cfg.regime == Regime::None {
        bail!("regime none has no pre-trained model to evaluate");
    }
    let corpus = load_corpus(cfg)?;
    let path: PathBuf = checkpoint.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf);
    let trainer = Checkpoint::load(&path)?.restore()?;
    let (_, held) = pretrain_split(&corpus.pretrain, &trainer.model.cfg, cfg.pretrain.eval_sequences)?;
    let stats = evaluate(&trainer.model, &held, trainer.seed, cfg.pretrain.execution)?;
    let m = PretrainMetrics::from_stats(trainer.step, &stats, trainer.model.cfg.lambda);
    print_metrics(&m);
    write_all(&cfg.out_dir.join(EVAL_FILE), &header("eval", cfg)?, &METRIC_COLUMNS, std::slice::from_ref(&m))?;
    Ok(m)
}

/// One pipeline run per (seed, regime) at the listed fractions.
pub fn run_plan(
    corpus: &Corpus,
    cfg: &RunConfig,
    plan: &[(Regime, Vec<f64>)],
    seeds: &[u64],
    mut on_run: impl FnMut(&RegimeRun) -> Result<()>,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for (regime, fractions) in plan {
            let run = run_regime(corpus, *regime, &cfg.model, &cfg.pretrain, &cfg.finetune, fractions, seed)?;
            on_run(&run)?;
            rows.extend(run.rows);
        }
    }
    Ok(rows)
}

#[derive(serde::Serialize)]
struct PretrainRow {
    regime: Regime,
    seed: u64,
    step: u64,
    gen_loss: f64,
    dis_loss: f64,
    dis_acc: f64,
    majority_acc: f64,
    replaced_rate: f64,
    joint: f64,
}

/// Label-scarcity sweep over every configured regime, seed and fraction.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SummaryRow>> {
    let corpus = load_corpus(cfg)?;
    write_config(&cfg.out_dir, cfg)?;
    let head = header("sweep", cfg)?;
    let mut rows_csv = CsvReport::create(&cfg.out_dir.join(SWEEP_FILE), &head, &ROW_COLUMNS)?;
    let mut pre_csv = CsvReport::create(
        &cfg.out_dir.join(SWEEP_PRETRAIN_FILE),
        &head,
        &["regime", "seed", "step", "gen_loss", "dis_loss", "dis_acc", "majority_acc", "replaced_rate", "joint"],
    )?;
    let plan: Vec<(Regime, Vec<f64>)> = cfg
        .sweep
        .regimes
        .iter()
        .map(|&r| (r, cfg.sweep.fractions.clone()))
        .collect();
    let rows = run_plan(&corpus, cfg, &plan, &cfg.sweep.seeds, |run| {
        for m in &run.pretrain {
            pre_csv.row(&PretrainRow {
                regime: run.regime,
                seed: run.seed,
                step: m.step,
                gen_loss: m.gen_loss,
                dis_loss: m.dis_loss,
                dis_acc: m.dis_acc,
                majority_acc: m.majority_acc,
                replaced_rate: m.replaced_rate,
                joint: m.joint,
            })?;
        }
        for r in &run.rows {
            rows_csv.row(r)?;
        }
        let s = summarize(&run.rows);
        for x in s {
            eprintln!("seed {} {:<6} fraction {:.4}: MAE {:.2}", run.seed, run.regime.name(), x.fraction, x.mean_test_mae);
        }
        Ok(())
    })?;
    let summary = summarize(&rows);
    write_all(&cfg.out_dir.join(SUMMARY_FILE), &head, &SUMMARY_COLUMNS, &summary)?;
    print_summary(&summary);
    Ok(summary)
}

pub fn bench_attention(cfg: &RunConfig) -> Result<(Vec<BenchRow>, Vec<RatioRow>)> {
    let rows = bench::run(&cfg.bench, cfg.seed)?;
    let ratios = bench::ratios(&rows);
    let head = header("bench-attention", cfg)?;
    write_all(
        &cfg.out_dir.join(BENCH_FILE),
        &head,
        &["L", "mechanism", "median_ms", "peak_elements", "skipped"],
        &rows,
    )?;
    write_all(
        &cfg.out_dir.join(BENCH_RATIO_FILE),
        &head,
        &["mechanism", "base_len", "len", "time_ratio", "elements_ratio"],
        &ratios,
    )?;
    println!("{:>6} {:<6} {:>11} {:>14}", "L", "mech", "median_ms", "peak_elements");
    for r in &rows {
        match (r.median_ms, r.peak_elements) {
            (Some(t), Some(e)) => println!("{:>6} {:<6} {:>11.3} {:>14}", r.len, mech(r), t, e),
            _ => println!("{:>6} {:<6} {:>11} {:>14}", r.len, mech(r), "skipped", "-"),
        }
    }
    for r in &ratios {
        println!(
            "{:<6} {:>5} -> {:>5}: time x{:.2}, workspace x{:.2}",
            format!("{:?}", r.mechanism).to_lowercase(),
            r.base_len,
            r.len,
            r.time_ratio,
            r.elements_ratio
        );
    }
    Ok((rows, ratios))
}

fn mech(r: &BenchRow) -> &'static str {
    match r.mechanism {
        bench::Mechanism::Favor => "favor",
        bench::Mechanism::Exact => "exact",
    }
}
