//! Multi-teacher soft-fusion distillation for small ViT encoders.
//!
//! A student encoder plus a linear adapter is trained to match the
//! elementwise sum of several frozen teacher encoders, in a per-token view
//! (softmax over channels) and a per-channel spatial view (softmax over
//! patch positions). Everything runs on the CPU in 64-bit floats with a
//! small reverse-mode tape.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod math;
pub mod optim;
pub mod tape;
pub mod teacher;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{CheckpointError, Error, Result};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::TensorBuf;
