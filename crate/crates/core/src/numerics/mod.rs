//! Dense `f64` tensors and the handful of numerical kernels the rest of the
//! crate is built on.
//!
//! Everything runs in 64-bit precision, including training: condition
//! numbers in the tens of thousands do not survive 32-bit accumulation.

mod eigen;
mod ops;
mod tape;
mod tensor;

pub use eigen::{eigh, SymmetricEigen, JACOBI_MAX_SWEEPS};
pub use ops::{
    gelu, layer_norm, layer_norm_rows, log_sum_exp, matmul, matmul_nt, sigmoid, stable_softmax,
    LAYER_NORM_EPS,
};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;

pub(crate) use ops::{gemm, pairwise_sum};
