//! Deterministic dense linear algebra.

mod matrix;
mod subspace;
mod svd;

pub use matrix::{dot, norm, Matrix};
pub use subspace::{
    cholesky, column_span, orthonormal_complement, orthonormality_error, orthonormalize_rows,
    project_in, project_out, row_orthonormality_error, ORTHONORMAL_TOL,
};
pub use svd::{svd, SvdResult, MAX_SWEEPS};
