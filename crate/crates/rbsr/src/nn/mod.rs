//! Minimal network engine: tensors, layer primitives with hand-written
//! backward rules, Adam, and checkpoint I/O.

pub mod adam;
pub mod checkpoint;
pub mod init;
pub mod ops;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, Parameter};
pub use checkpoint::{checkpoint_read, checkpoint_write, decode_checkpoint, encode_checkpoint};
pub use ops::{
    activation, activation_grad, conv2d, conv2d_grad, dense, dense_grad, pixel_shuffle,
    pixel_unshuffle, Activation,
};
pub use tensor::{Scalar, Tensor4};
