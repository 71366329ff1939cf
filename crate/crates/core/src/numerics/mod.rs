//! Dense f32 tensors, the handful of kernels the engine needs, a
//! counter-based random stream, and the FCT1 raw dump format.

mod fct;
mod prng;
mod tensor;

pub use fct::{decode_fct, encode_fct, read_fct, write_fct, FCT_MAGIC};
pub use prng::{gaussian_sample, PrngStream};
pub use tensor::{matmul, nn_resize, nn_source_index, row_softmax, Tensor};
