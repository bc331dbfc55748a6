//! Dense linear algebra, reduced-precision emulation and seeded randomness.

mod linalg;
mod matrix;
mod precision;
mod rng;

pub use linalg::{random_orthogonal, solve_exact, spd_with_spectrum, Cholesky};
pub use matrix::{axpy, dot, frobenius_norm, gram, matmul, max_abs_diff, norm2, relative_error, Matrix};
pub use precision::Precision;
pub use rng::SeededRng;
