//! Minimal float64 tensor engine with reverse-mode gradients.

mod graph;
mod layers;
mod optim;
mod params;
mod rotate;
mod tensor;

pub use graph::{Backward, Graph, Var};
pub use layers::{Conv2d, Encoder, EncoderLayer, LayerNorm, Linear, SelfAttention};
pub use optim::{AdamW, WarmupCosine};
pub use params::{Gradients, Init, ParamEntry, ParamId, ParamStore};
pub use rotate::RotationMap;
pub use tensor::Tensor;
