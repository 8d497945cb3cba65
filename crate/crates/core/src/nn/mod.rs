//! Small convolutional network stack with reverse-mode gradients, Adam/SGD
//! and a binary checkpoint format.

pub mod checkpoint;
pub mod encoder;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Container, TrainedEncoder};
pub use encoder::{
    batch_tensor, embed_tiles, forward, init_encoder, init_head, BlockSpec, EncoderConfig, ForwardPass,
    Parameters,
};
pub use optim::{OptimizerKind, OptimizerSettings, OptimizerState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
