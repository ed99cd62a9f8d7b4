//! Dense containers, a thin gemm wrapper and the reverse-mode tape.

mod complex;
pub mod linalg;
pub mod tape;
mod tensor;

pub use complex::ComplexMatrix;
pub use num_complex::Complex64;
pub use tape::{gradient_check, Gradients, Graph, Var};
pub use tensor::RealTensor;
