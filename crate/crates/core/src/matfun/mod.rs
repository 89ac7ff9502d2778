//! Dense matrix-function kernels shared by the model and the estimators:
//! exponential, principal logarithm, Lyapunov solver, and similarity metrics.

mod expm;
mod logm;
mod lyapunov;
mod schur;
mod stats;

use nalgebra::DMatrix;
use num_complex::Complex64;

pub use expm::{mat_exp, mat_exp_frechet, ExpmFrechet};
pub use logm::{mat_log, SINGULAR_TOL};
pub use lyapunov::{solve_lyapunov, LyapunovSolver, STABILITY_TOL};
pub use schur::{ComplexSchur, RealSchur};
pub use stats::{imag_part, imag_real_ratio, max_abs_diff, off_diagonal, pearson, real_part};

pub type RealMatrix = DMatrix<f64>;
pub type ComplexMatrix = DMatrix<Complex64>;
