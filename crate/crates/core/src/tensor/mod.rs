//! Dense linear algebra, parameters, reverse-mode gradients and optimisation.

pub mod gradcheck;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sparse;
pub mod tape;

pub use gradcheck::{finite_diff_grad, GradCheck};
pub use matrix::DenseMatrix;
pub use nn::{cosine_matrix, mlp2_forward, Mlp2};
pub use optim::{Method, OptimConfig, Optimizer};
pub use params::{Param, ParamStore};
pub use sparse::CsrMatrix;
pub use tape::{SparseOperator, Tape, Var};
