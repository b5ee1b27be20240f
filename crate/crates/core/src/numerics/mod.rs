//! Dense tensors, toy member networks with hand-derived backpropagation,
//! Nesterov SGD, and the binary checkpoint format.

mod checkpoint;
mod model;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{Layer, MemberModel, Param};
pub use tensor::Tensor;
