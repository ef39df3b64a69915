//! Projections onto and away from orthonormal bases.

use super::matrix::{dot, norm, Matrix};
use super::svd::{canonical_sign, svd};
use crate::error::{Error, Result};

/// Tolerance on `‖QᵀQ − I‖_max` for a basis to count as orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// `‖QᵀQ − I‖_max` for the columns of `q` (0 for an empty basis).
pub fn orthonormality_error(q: &Matrix) -> f64 {
    if q.cols() == 0 {
        return 0.0;
    }
    q.t_matmul(q).sub(&Matrix::identity(q.cols())).max_abs()
}

/// Same measure for the rows of `b`.
pub fn row_orthonormality_error(b: &Matrix) -> f64 {
    if b.rows() == 0 {
        return 0.0;
    }
    b.matmul_t(b).sub(&Matrix::identity(b.rows())).max_abs()
}

fn check_basis(basis: &Matrix, x: &Matrix) -> Result<()> {
    if basis.rows() != x.rows() {
        return Err(Error::Shape(format!(
            "basis has {} rows but x has {}",
            basis.rows(),
            x.rows()
        )));
    }
    let err = orthonormality_error(basis);
    if err > ORTHONORMAL_TOL {
        return Err(Error::InvalidInput(format!(
            "basis columns are not orthonormal (error {err:.3e})"
        )));
    }
    Ok(())
}

/// `x − M Mᵀ x`: the part of each column of `x` orthogonal to `span(M)`.
pub fn project_out(basis: &Matrix, x: &Matrix) -> Result<Matrix> {
    check_basis(basis, x)?;
    if basis.cols() == 0 {
        return Ok(x.clone());
    }
    let coeff = basis.t_matmul(x);
    Ok(x.sub(&basis.matmul(&coeff)))
}

/// `M Mᵀ x`: the part of each column of `x` inside `span(M)`.
pub fn project_in(basis: &Matrix, x: &Matrix) -> Result<Matrix> {
    check_basis(basis, x)?;
    if basis.cols() == 0 {
        return Ok(Matrix::zeros(x.rows(), x.cols()));
    }
    Ok(basis.matmul(&basis.t_matmul(x)))
}

/// Orthonormal basis (`d × (d − k)`) of the orthogonal complement of the
/// span of `basis` (`d × k`), taken from the left singular vectors of
/// `basis` that pair with zero singular values.
pub fn orthonormal_complement(basis: &Matrix) -> Result<Matrix> {
    let (d, k) = basis.shape();
    if k > d {
        return Err(Error::InvalidInput(format!(
            "{k} columns cannot be orthonormal in dimension {d}"
        )));
    }
    let err = orthonormality_error(basis);
    if err > ORTHONORMAL_TOL {
        return Err(Error::InvalidInput(format!(
            "basis columns are not orthonormal (error {err:.3e})"
        )));
    }
    if k == 0 {
        return Ok(Matrix::identity(d));
    }
    if k == d {
        return Ok(Matrix::zeros(d, 0));
    }
    let dec = svd(basis)?;
    let full = dec.full_u();
    let rank = dec.rank();
    let idx: Vec<usize> = (rank..d).collect();
    Ok(full.select_columns(&idx))
}

/// Orthonormalises the rows of `b` with modified Gram-Schmidt (two passes),
/// keeping their order and span.
pub fn orthonormalize_rows(b: &Matrix) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(b.rows());
    for i in 0..b.rows() {
        let mut v = b.row(i).to_vec();
        let scale = norm(&v);
        for _ in 0..2 {
            for q in &rows {
                let c = dot(q, &v);
                for (x, qv) in v.iter_mut().zip(q) {
                    *x -= c * qv;
                }
            }
        }
        let r = norm(&v);
        if r <= 1e-10 * scale.max(f64::MIN_POSITIVE) || r == 0.0 {
            return Err(Error::InvalidInput(format!(
                "row {i} is linearly dependent on the rows before it"
            )));
        }
        v.iter_mut().for_each(|x| *x /= r);
        rows.push(v);
    }
    let data = rows.into_iter().flatten().collect();
    Ok(Matrix::from_vec_unchecked(b.rows(), b.cols(), data))
}

/// Orthonormal basis of the column span of `x` (columns with singular
/// value above the rank tolerance).
pub fn column_span(x: &Matrix) -> Result<Matrix> {
    let dec = svd(x)?;
    let idx: Vec<usize> = (0..dec.rank()).collect();
    let mut out = dec.u.select_columns(&idx);
    for j in 0..out.cols() {
        let mut c = out.column(j);
        canonical_sign(&mut c);
        out.set_column(j, &c);
    }
    Ok(out)
}

/// Lower-triangular `L` with `a = L Lᵀ`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape("cholesky needs a square matrix".into()));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "matrix is not positive definite (pivot {j} = {d:.3e})"
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}
