use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{Feature, FeatureSet};
use crate::embed::EmbedConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::favor::Kernel;

/// Pre-training regime, including the baselines and ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Dpa,
    Am,
    Ae,
    Ram,
    Aam,
    Dpa60,
    None,
}

impl Regime {
    pub const ALL: [Regime; 7] = [
        Regime::Dpa,
        Regime::Am,
        Regime::Ae,
        Regime::Ram,
        Regime::Aam,
        Regime::Dpa60,
        Regime::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Dpa => "dpa",
            Regime::Am => "am",
            Regime::Ae => "ae",
            Regime::Ram => "ram",
            Regime::Aam => "aam",
            Regime::Dpa60 => "dpa60",
            Regime::None => "none",
        }
    }

    /// Whether a small generator produces a replaced sequence.
    pub fn uses_replacement(self) -> bool {
        matches!(self, Regime::Dpa | Regime::Dpa60 | Regime::Ram | Regime::Aam)
    }

    /// Whether the fine-tuned network is a discriminator.
    pub fn fine_tunes_discriminator(self) -> bool {
        matches!(self, Regime::Dpa | Regime::Dpa60 | Regime::None)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == lower)
            .ok_or_else(|| Error::UnknownRegime(s.to_string()))
    }
}

/// Size of one encoder tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TowerSize {
    pub layers: usize,
    pub d_hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub axial_shape: [usize; 2],
    pub axial_dims: [usize; 2],
    pub generator: TowerSize,
    pub discriminator: TowerSize,
    pub num_features: usize,
    pub redraw_interval: u64,
    pub kernel: Kernel,
    pub lambda: f64,
    pub mask_ratio: f64,
    pub masked_features: FeatureSet,
    pub window: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    /// AM baseline sized like the discriminator (otherwise like the generator).
    pub am_discriminator_sized: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 256,
            axial_shape: [32, 32],
            axial_dims: [64, 192],
            generator: TowerSize {
                layers: 4,
                d_hidden: 64,
                heads: 2,
                head_dim: 64,
                ff_dim: 256,
            },
            discriminator: TowerSize {
                layers: 4,
                d_hidden: 256,
                heads: 8,
                head_dim: 64,
                ff_dim: 1024,
            },
            num_features: 256,
            redraw_interval: 1000,
            kernel: Kernel::Relu,
            lambda: 1.0,
            mask_ratio: 0.6,
            masked_features: FeatureSet::of(&[Feature::Response]),
            window: 1024,
            dropout: 0.1,
            attention_dropout: 0.1,
            am_discriminator_sized: true,
        }
    }
}

impl ModelConfig {
    /// Small dimensions that train in minutes on one core.
    pub fn desk() -> Self {
        ModelConfig {
            d_emb: 32,
            axial_shape: [8, 16],
            axial_dims: [8, 24],
            generator: TowerSize {
                layers: 1,
                d_hidden: 8,
                heads: 1,
                head_dim: 8,
                ff_dim: 32,
            },
            discriminator: TowerSize {
                layers: 2,
                d_hidden: 64,
                heads: 2,
                head_dim: 8,
                ff_dim: 128,
            },
            num_features: 16,
            redraw_interval: 100,
            window: 128,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.masked_features.is_empty() {
            return Err(Error::invalid("masked_features must not be empty"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::invalid(format!("mask_ratio {} outside (0, 1]", self.mask_ratio)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.window < 3 {
            return Err(Error::invalid("window must hold the cls token and two interactions"));
        }
        if self.axial_shape[0] * self.axial_shape[1] < self.window {
            return Err(Error::invalid(format!(
                "axial grid {:?} smaller than window {}",
                self.axial_shape, self.window
            )));
        }
        for size in [&self.generator, &self.discriminator] {
            self.encoder_config(size).validate()?;
        }
        self.embed_config(1).validate()
    }

    pub fn embed_config(&self, num_exercises: usize) -> EmbedConfig {
        EmbedConfig {
            num_exercises,
            d_emb: self.d_emb,
            axial_shape: self.axial_shape,
            axial_dims: self.axial_dims,
        }
    }

    pub fn encoder_config(&self, size: &TowerSize) -> EncoderConfig {
        EncoderConfig {
            d_hidden: size.d_hidden,
            layers: size.layers,
            heads: size.heads,
            head_dim: size.head_dim,
            d_ff: size.ff_dim,
            dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            window: self.window,
            num_features: self.num_features,
            redraw_interval: self.redraw_interval,
            kernel: self.kernel,
        }
    }

    /// Input features of every network: all features except overlapping
    /// partners of masked ones.
    pub fn inputs(&self) -> FeatureSet {
        FeatureSet::inputs_for(self.masked_features)
    }

    /// Interactions kept per sequence; the cls token takes one slot.
    pub fn max_interactions(&self) -> usize {
        self.window - 1
    }
}
