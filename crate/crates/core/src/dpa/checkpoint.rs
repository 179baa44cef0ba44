//! JSON checkpoints of a pre-training run: configuration, named parameter
//! tensors, random feature states and optimizer state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Regime};
use super::models::DpaModel;
use super::pretrain::Pretrainer;
use crate::error::{Error, Result};
use crate::favor::RandomFeatureState;
use crate::numcore::{Adam, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub regime: Regime,
    pub model_config: ModelConfig,
    pub num_exercises: usize,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<NamedTensor>,
    pub generator_states: Vec<RandomFeatureState>,
    pub main_states: Vec<RandomFeatureState>,
    pub optimizer: Adam,
    /// Resolved run configuration of the writer, kept verbatim.
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn capture(trainer: &Pretrainer) -> Self {
        let m = &trainer.model;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            regime: m.regime,
            model_config: m.cfg.clone(),
            num_exercises: m.num_exercises,
            seed: trainer.seed,
            step: trainer.step,
            params: m
                .store
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            generator_states: m.generator.as_ref().map(|g| g.states.clone()).unwrap_or_default(),
            main_states: m.main.states.clone(),
            optimizer: trainer.adam.clone(),
            run_config: None,
        }
    }

    /// Rebuilds the trainer. Every parameter of the regime's model must be
    /// present exactly once with its expected shape.
    pub fn restore(&self) -> Result<Pretrainer> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut model = DpaModel::new(self.model_config.clone(), self.regime, self.num_exercises, 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name)))?;
            let t = Tensor::new(p.shape.clone(), p.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", p.name)))?;
            model
                .store
                .set(id, t)
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", p.name)))?;
        }
        if let Some(g) = model.generator.as_mut() {
            g.states = checked_states(&g.states, &self.generator_states, "generator")?;
        } else if !self.generator_states.is_empty() {
            return Err(Error::Checkpoint("generator states for a regime without a generator".into()));
        }
        model.main.states = checked_states(&model.main.states, &self.main_states, "main")?;
        let moments = &self.optimizer.state;
        for m in [&moments.first_moment, &moments.second_moment] {
            if !m.is_empty() && m.len() != model.store.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
            }
        }
        Ok(Pretrainer {
            model,
            adam: self.optimizer.clone(),
            step: self.step,
            seed: self.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn checked_states(
    fresh: &[RandomFeatureState],
    stored: &[RandomFeatureState],
    which: &str,
) -> Result<Vec<RandomFeatureState>> {
    if fresh.len() != stored.len() {
        return Err(Error::Checkpoint(format!(
            "{which}: {} feature states stored, expected {}",
            stored.len(),
            fresh.len()
        )));
    }
    for (f, s) in fresh.iter().zip(stored) {
        let p = &s.projection;
        if p.shape() != f.projection.shape() || p.numel() != p.data().len() {
            return Err(Error::Checkpoint(format!("{which}: projection shape {:?}", p.shape())));
        }
    }
    Ok(stored.to_vec())
}
