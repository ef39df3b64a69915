//! One-sided (Hestenes) Jacobi SVD.

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Sweep cap before the iteration is declared non-convergent.
pub const MAX_SWEEPS: usize = 100;

/// Thin singular value decomposition `a = u · diag(s) · vt`.
///
/// For an `m × n` input with `p = min(m, n)`, `u` is `m × p`, `s` has `p`
/// entries sorted descending and `vt` is `p × n`. In every row of `vt` the
/// entry of largest magnitude is non-negative; the paired column of `u` is
/// flipped with it. Left vectors paired with numerically-zero singular
/// values are completed deterministically so `u` always has orthonormal
/// columns.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
    rows: usize,
    cols: usize,
}

impl SvdResult {
    /// `1e-10 · max(m, n) · s_max`.
    pub fn rank_tolerance(&self) -> f64 {
        rank_tolerance(self.rows, self.cols, self.s.first().copied().unwrap_or(0.0))
    }

    /// Number of singular values above [`Self::rank_tolerance`].
    pub fn rank(&self) -> usize {
        let tol = self.rank_tolerance();
        self.s.iter().take_while(|&&v| v > tol).count()
    }

    pub fn is_numerically_zero(&self, i: usize) -> bool {
        self.s[i] <= self.rank_tolerance()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        us.matmul(&self.vt)
    }

    /// All `m` left singular vectors: the thin `u` extended by an orthonormal
    /// basis of its complement (the vectors paired with zero singular values
    /// in a full decomposition).
    pub fn full_u(&self) -> Matrix {
        let m = self.u.rows();
        let mut cols = self.u.columns();
        extend_orthonormal(&mut cols, m, m);
        for c in cols.iter_mut().skip(self.u.cols()) {
            canonical_sign(c);
        }
        Matrix::from_columns(m, &cols)
    }
}

pub(crate) fn rank_tolerance(rows: usize, cols: usize, s_max: f64) -> f64 {
    1e-10 * rows.max(cols) as f64 * s_max
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.is_empty() {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput(
            "svd input has non-finite entries".into(),
        ));
    }
    let (m, n) = a.shape();
    let (mut u, s, mut vt) = if m >= n {
        let (u, s, v) = jacobi_tall(a)?;
        (u, s, v.transpose())
    } else {
        // a = (aᵀ)ᵀ = v' s u'ᵀ
        let (u_t, s, v_t) = jacobi_tall(&a.transpose())?;
        (v_t, s, u_t.transpose())
    };
    for i in 0..s.len() {
        let row = vt.row(i);
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = j;
            }
        }
        if row[best] < 0.0 {
            for x in vt.row_mut(i) {
                *x = -*x;
            }
            for r in 0..u.rows() {
                u[(r, i)] = -u[(r, i)];
            }
        }
    }
    Ok(SvdResult {
        u,
        s,
        vt,
        rows: m,
        cols: n,
    })
}

/// Jacobi on an `m × n` matrix with `m ≥ n`. Returns `(u, s, v)` sorted by
/// descending singular value, `u` is `m × n` and `v` is `n × n`.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut g = a.columns();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = (m as f64) * f64::EPSILON;
    // Columns at round-off level carry no direction; rotating them against
    // the rest never satisfies the relative test.
    let negligible = (f64::EPSILON * a.frobenius_norm()).powi(2);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if alpha <= negligible
                    || beta <= negligible
                    || gamma == 0.0
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = g.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let s: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    let cutoff = rank_tolerance(m, n, s.first().copied().unwrap_or(0.0));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &i in &order {
        if sigma[i] > cutoff && sigma[i] > 0.0 {
            u_cols.push(g[i].iter().map(|x| x / sigma[i]).collect());
        } else {
            break;
        }
    }
    extend_orthonormal(&mut u_cols, m, n);
    let v_cols: Vec<Vec<f64>> = order.iter().map(|&i| v[i].clone()).collect();
    Ok((
        Matrix::from_columns(m, &u_cols),
        s,
        Matrix::from_columns(n, &v_cols),
    ))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Appends unit vectors to `cols` (assumed orthonormal, each of length
/// `dim`) until there are `target` of them. Candidates are the standard
/// basis vectors; each step takes the one with the largest residual against
/// the current columns (lowest index on ties) and orthogonalises it with two
/// rounds of Gram-Schmidt.
pub(crate) fn extend_orthonormal(cols: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    // captured[i] = squared norm of e_i's projection onto the current span
    let mut captured = vec![0.0; dim];
    for q in cols.iter() {
        for (c, x) in captured.iter_mut().zip(q) {
            *c += x * x;
        }
    }
    while cols.len() < target {
        let mut pick = 0;
        for i in 1..dim {
            if captured[i] < captured[pick] {
                pick = i;
            }
        }
        let mut cand = vec![0.0; dim];
        cand[pick] = 1.0;
        for _ in 0..2 {
            for q in cols.iter() {
                let c = dot(q, &cand);
                for (x, qv) in cand.iter_mut().zip(q) {
                    *x -= c * qv;
                }
            }
        }
        let r = norm(&cand);
        for (x, c) in cand.iter_mut().zip(captured.iter_mut()) {
            *x /= r;
            *c += *x * *x;
        }
        cols.push(cand);
    }
}

/// Flips `v` so its largest-magnitude entry is non-negative.
pub(crate) fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (j, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = j;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity() {
        let r = svd(&Matrix::identity(2)).unwrap();
        assert_eq!(r.s, vec![1.0, 1.0]);
        assert_eq!(r.u, Matrix::identity(2));
        assert_eq!(r.vt, Matrix::identity(2));
    }

    #[test]
    fn diagonal_with_negative_entry() {
        let r = svd(&m(&[&[3.0, 0.0], &[0.0, -2.0]])).unwrap();
        assert!((r.s[0] - 3.0).abs() < 1e-14 && (r.s[1] - 2.0).abs() < 1e-14);
        assert!((r.reconstruct().sub(&m(&[&[3.0, 0.0], &[0.0, -2.0]]))).max_abs() < 1e-14);
    }

    #[test]
    fn rank_one_sign_convention() {
        let a = m(&[&[0.0, 3.0], &[0.0, 4.0]]);
        let r = svd(&a).unwrap();
        assert!((r.s[0] - 5.0).abs() < 1e-14);
        assert!(r.s[1].abs() < 1e-14);
        assert!(r.is_numerically_zero(1));
        assert_eq!(r.rank(), 1);
        assert!((r.vt[(0, 0)]).abs() < 1e-14 && (r.vt[(0, 1)] - 1.0).abs() < 1e-14);
        assert!(r.reconstruct().sub(&a).max_abs() < 1e-14);
        // u stays orthonormal despite the zero singular value
        let utu = r.u.t_matmul(&r.u);
        assert!(utu.sub(&Matrix::identity(2)).max_abs() < 1e-14);
    }

    #[test]
    fn wide_and_tall_shapes() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let r = svd(&a).unwrap();
        assert_eq!(r.u.shape(), (2, 2));
        assert_eq!(r.vt.shape(), (2, 3));
        assert!(r.reconstruct().sub(&a).max_abs() < 1e-12);
        let rt = svd(&a.transpose()).unwrap();
        assert_eq!(rt.u.shape(), (3, 2));
        for (x, y) in r.s.iter().zip(&rt.s) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_and_bad_input() {
        let r = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0]);
        assert_eq!(r.rank(), 0);
        assert!(matches!(
            svd(&Matrix::zeros(0, 0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn full_u_is_square_orthogonal() {
        let a = Matrix::from_columns(3, &[[1.0, 1.0, 0.0]]);
        let full = svd(&a).unwrap().full_u();
        assert_eq!(full.shape(), (3, 3));
        assert!(full.t_matmul(&full).sub(&Matrix::identity(3)).max_abs() < 1e-14);
    }
}
