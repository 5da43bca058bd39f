//! MLP classifier, cross-entropy, temperature softmax and KL divergence.

mod loss;
mod mlp;

pub use loss::{
    cross_entropy, cross_entropy_traced, kl_divergence, soft_target_kl, soft_target_kl_traced,
    softmax_with_temperature, PROB_FLOOR,
};
pub use mlp::{accuracy, predictions, LayerSlot, Mlp, MlpSpec, PassCount, Traced, WeightVector};
