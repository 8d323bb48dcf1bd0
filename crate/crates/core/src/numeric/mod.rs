//! Dense tensors, a reverse-mode tape and the parameter store.

pub mod gradcheck;
pub mod params;
pub mod relpos;
pub mod tape;
pub mod tensor;

pub use params::{load_checkpoint, save_checkpoint, ParamId, ParameterStore};
pub use tape::{AttnGroup, AttnLayout, Grads, Tape, Var};
pub use tensor::{Float, Tensor};
