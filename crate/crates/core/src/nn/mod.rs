//! Dense-network numerical core.
//!
//! Everything here is a pure function of its inputs. Parameters live in a
//! [`ParamSet`] whose entry order is layer order with each weight matrix
//! followed by its bias, so sets produced by the same [`MlpSpec`] can be
//! averaged coordinate-wise through [`ParamSet::flatten`].

mod adam;
mod loss;
mod mlp;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{backward, cross_entropy, PROB_FLOOR};
pub use mlp::{
    backward_from_logits, backward_from_outputs, forward, forward_trace, HiddenActivation,
    MlpSpec, OutputActivation, Trace,
};
pub use params::ParamSet;
pub use tensor::Tensor;
