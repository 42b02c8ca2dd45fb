//! Dense numeric substrate: a row-major matrix, row-wise kernels with hand-written
//! backward passes, and a counter-addressed random stream.

mod ops;
mod rng;
mod tensor;

pub use ops::{
    gelu, gelu_grad, layer_norm_rows, layer_norm_rows_backward, layer_norm_rows_cached, linear,
    linear_backward, log_softmax_row, matmul, matmul_nt, matmul_tn, softmax_rows,
    softmax_rows_backward, LayerNormCache,
};
pub(crate) use ops::softmax_in_place;
pub use rng::{child_seed, RngStream};
pub use tensor::{Real, Tensor2D};
