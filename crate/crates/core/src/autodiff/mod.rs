//! Dense double-precision arrays, a recording tape with reverse-mode
//! gradients, parameter storage with Adam, and binary checkpoints.

mod array;
mod checkpoint;
mod params;
mod tape;

pub use array::Array;
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use params::{glorot_uniform, AdamConfig, ParamId, ParamStore};
pub use tape::{segment_softmax, Gradients, Tape, Var, DEFAULT_LEAKY_SLOPE, LOG_FLOOR};
