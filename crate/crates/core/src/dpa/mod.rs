//! Generator/discriminator pre-training, the baseline regimes, and score
//! fine-tuning.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod finetune;
pub mod models;
pub mod pretrain;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Regime, TowerSize};
pub use experiment::{pretrain_regime, pretrain_split, run_regime, RegimeRun};
pub use finetune::{
    cross_validate, finetune_fold, mae, mean_std, prepare_scored, summarize, FinetuneConfig, FoldResult,
    ReportRow, SummaryRow,
};
pub use models::{prepare_sequence, DpaModel, Network, ScoreModel};
pub use pretrain::{
    derive_seed, evaluate, example_loss, run_pretraining, smooth, OptimConfig, PretrainConfig,
    PretrainMetrics, PretrainReport, Pretrainer, TokenStats,
};
