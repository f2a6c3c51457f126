//! Parameter storage and layers with hand-written backward passes.

pub mod layers;
pub mod params;

pub use layers::{
    dropout_mask, gelu, gelu_backward, glu, glu_backward, mix_seed, ChannelNorm, Conv1d, ConvTranspose1d,
    Linear, S4Block, S4Cache, NORM_EPS,
};
pub use params::{Grads, ParamId, ParamStore, Tensor, Trainable};

#[cfg(test)]
mod gradcheck;
