//! Dense linear algebra shared by the network, the projection memory and the metrics.

mod eigen;
mod matrix;
mod subspace;
mod tridiag;

pub use eigen::{
    canonical_sign, second_moment_spectrum, sym_eig, sym_eig_with, EigenResult, EigenOptions,
    SubspaceSpectrum, EigenMethod, EIGEN_FLOOR, JACOBI_MAX_DIM,
};
pub use matrix::{gemm, matmul, DenseMatrix, Transpose};
pub use subspace::{
    captured_dim, extend_orthonormal, gram_deviation, orthonormalize, project_complement,
    Projector, ORTHONORMAL_TOL,
};
