//! Dense linear algebra, PCA and reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod pca;
mod tape;

pub use gradcheck::{gradient_check, FD_STEP};
pub use matrix::{format_f64, gram_matrix, matmul, row_normalize, softmax_rows, Matrix};
pub use pca::{pca, PcaResult};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var, LOG_FLOOR};

pub(crate) use matrix::{dot, norm};
