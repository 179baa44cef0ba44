//! Run configuration: a preset, optionally a TOML file on top of it, then
//! `key=value` overrides with dotted paths.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use dpa_core::dataio::SynthConfig;
use dpa_core::dpa::{FinetuneConfig, ModelConfig, OptimConfig, PretrainConfig, Regime};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => bail!("unknown preset `{s}` (expected full or desk)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            regimes: Regime::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            fractions: vec![0.125, 0.25, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub dim: usize,
    pub num_features: usize,
    pub repeats: usize,
    /// Longest sequence the exact mechanism is run on; longer rows are
    /// reported as skipped.
    pub exact_max_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![256, 512, 1024, 2048],
            dim: 64,
            num_features: 256,
            repeats: 5,
            exact_max_len: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub regime: Regime,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Label fractions for `finetune`.
    pub fractions: Vec<f64>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            regime: Regime::Dpa,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            fractions: vec![1.0],
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        }
    }

    /// Tiny dimensions and short schedules that run end to end in minutes
    /// on one core.
    pub fn desk() -> Self {
        let optim = OptimConfig {
            warmup: 200,
            lr_factor: 0.3,
            ..OptimConfig::default()
        };
        RunConfig {
            model: ModelConfig::desk(),
            pretrain: PretrainConfig {
                steps: 500,
                batch_size: 64,
                eval_every: 50,
                eval_sequences: 200,
                optim: optim.clone(),
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                batch_size: 32,
                max_evals: 60,
                patience: 6,
                optim,
                ..FinetuneConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Resolves `preset`, then `file`, then each `key=value` override.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = Table::try_from(RunConfig::preset(preset)).context("serializing preset")?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file_table: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut table, file_table);
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().context("invalid configuration")?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// One-line JSON rendering for artifact headers.
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML value and taken as
/// a bare string if that fails.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not key=value"))?;
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        cur = match cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => bail!("override `{path}`: `{k}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_preset_mirrors_defaults() {
        let c = RunConfig::resolve(Preset::Full, None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.pretrain.batch_size, 64);
        assert_eq!(c.pretrain.optim.warmup, 4000);
        assert_eq!(c.finetune.patience, 30);
        assert_eq!(c.model.d_emb, 256);
    }

    #[test]
    fn overrides_apply_in_order() {
        let sets = [
            "seed=9".to_string(),
            "regime=am".to_string(),
            "model.lambda=0.5".to_string(),
            "pretrain.optim.warmup=10".to_string(),
            "out_dir=elsewhere".to_string(),
        ];
        let c = RunConfig::resolve(Preset::Desk, None, &sets).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.regime, Regime::Am);
        assert_eq!(c.model.lambda, 0.5);
        assert_eq!(c.pretrain.optim.warmup, 10);
        assert_eq!(c.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.model.d_emb, ModelConfig::desk().d_emb);
    }

    #[test]
    fn file_layers_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 4\n[pretrain]\nsteps = 7\n").unwrap();
        let c = RunConfig::resolve(Preset::Desk, Some(&path), &["pretrain.steps=8".into()]).unwrap();
        assert_eq!((c.seed, c.pretrain.steps), (4, 8));
        assert_eq!(c.pretrain.batch_size, 64);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::resolve(Preset::Desk, None, &["nonsense=1".into()]).is_err());
        assert!(RunConfig::resolve(Preset::Desk, None, &["regime=bert".into()]).is_err());
        assert!(RunConfig::resolve(Preset::Desk, None, &["seed".into()]).is_err());
        assert!(RunConfig::resolve(Preset::Desk, None, &["model.mask_ratio=0".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::desk();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
