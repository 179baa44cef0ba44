//! FAVOR+ linear attention with positive orthogonal random features.

pub mod attention;
pub mod features;
pub mod multihead;

pub use attention::{
    exact_attention_graph, exact_softmax_attention, favor_attention, favor_attention_graph,
    favor_attention_matrix, NORMALIZER_EPS,
};
pub use features::{
    iid_gaussian, orthogonal_gaussian, relu_feature_map, relu_features, softmax_feature_map,
    softmax_features, Kernel, RandomFeatureState,
};
pub use multihead::MultiHeadAttention;
