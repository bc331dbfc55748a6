//! Iterative SPD solvers and their gradients.

mod baselines;
mod chebyshev;
mod operator;
mod problems;
mod reverse;

pub use baselines::{agd_solve, cg_solve, gd_solve, IterativeMethod};
pub use chebyshev::{
    chebyshev_error_bound, chebyshev_solve, chebyshev_solve_with_tail, chebyshev_weight_schedule, omega_fixed_points,
    weight_contraction_rate, ChebyshevTail,
};
pub use problems::normalized_covariance_problem;
pub use operator::{LinearOperator, Shifted, SolverTrace, SpdProblem, SpectralBounds};
pub use reverse::{
    implicit_backward, reversal_divisors, reverse_chebyshev, reverse_weight_schedule, ReverseGradients,
    MIN_REVERSAL_DIVISOR,
};
