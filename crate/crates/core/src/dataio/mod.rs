//! Interaction records, preprocessing, masking, folds, storage and a
//! synthetic student simulator.

pub mod folds;
pub mod jsonl;
pub mod masking;
pub mod normalize;
pub mod schema;
pub mod synth;

pub use folds::{split_folds, subsample_nested, Fold};
pub use jsonl::{read_exercises, read_scored, read_sequences, write_exercises, write_scored, write_sequences};
pub use masking::{
    make_masked_sequence, mask_count, originality_labels, MaskedSequence, ReplacedSequence,
    Replacement,
};
pub use normalize::{cap_and_normalize, denormalize};
pub use schema::{
    scale_score, unscale_score, ExerciseMeta, Feature, FeatureSet, FeatureValue, Interaction,
    InteractionSequence, Response, ScoredSequence, NUM_PARTS, SCORE_MAX, SCORE_MIN,
};
pub use synth::{corpus_stats, synth_generate, Corpus, CorpusStats, SynthConfig};
