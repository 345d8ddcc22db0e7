//! Dense linear algebra with a small reverse-mode tape, in `f64` throughout.

mod matrix;
pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use gradcheck::finite_diff_grad;
pub use matrix::{cosine_rows, dot, layer_norm, matmul, norm, normalized, row_softmax, Matrix};
pub use optim::SgdMomentum;
pub use tape::{GradTape, Var};
