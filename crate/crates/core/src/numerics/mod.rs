//! Complex and real linear algebra, Gaussian statistics and random streams.

pub mod cmatrix;
pub mod rmatrix;
pub mod rng;
pub mod stats;

pub use cmatrix::{cmatmul, hermitian, solve_hpd, CMatrix, Cholesky, Complex};
pub use rmatrix::RMatrix;
pub use rng::{standard_complex_normal, RngStream};
pub use stats::{gauss_cdf, log_gauss_cell_prob, logsumexp};
