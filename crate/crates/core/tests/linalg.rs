//! Dense linear algebra against nalgebra as an independent oracle.

use inflora::linalg::{
    cholesky, orthonormal_complement, orthonormality_error, project_in, project_out, svd, Matrix,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn matrix(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c)
            .prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

/// Eigenvalues of `AᵀA` (or `AAᵀ`, whichever is smaller), descending, as
/// square roots.
fn singular_values_from_gram(a: &Matrix) -> Vec<f64> {
    let na = to_na(a);
    let gram = if a.rows() >= a.cols() {
        na.transpose() * &na
    } else {
        &na * na.transpose()
    };
    let mut ev: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn singular_values_match_gram_eigenvalues(a in matrix(8)) {
        let dec = svd(&a).unwrap();
        let oracle = singular_values_from_gram(&a);
        let scale = oracle[0].max(1.0);
        for (s, o) in dec.s.iter().zip(&oracle) {
            // √λ loses half the digits near zero, so compare squares there.
            let gap = if *o > 1e-4 * scale { (s - o).abs() } else { (s * s - o * o).abs() };
            prop_assert!(gap <= 1e-8 * scale, "{s} vs {o}");
        }
    }

    #[test]
    fn decomposition_is_exact_and_orthonormal(a in matrix(12)) {
        let dec = svd(&a).unwrap();
        let scale = a.frobenius_norm().max(1.0);
        prop_assert!(dec.reconstruct().sub(&a).max_abs() <= 1e-10 * scale);
        prop_assert!(orthonormality_error(&dec.u) <= 1e-10);
        prop_assert!(orthonormality_error(&dec.vt.transpose()) <= 1e-10);
        prop_assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(dec.s.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn singular_values_agree_with_nalgebra(a in matrix(10)) {
        let dec = svd(&a).unwrap();
        let mut theirs: Vec<f64> = to_na(&a).singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        let scale = theirs[0].max(1.0);
        for (s, o) in dec.s.iter().zip(&theirs) {
            prop_assert!((s - o).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn projections_split_every_vector(a in matrix(8), seed in 0u64..1000) {
        // An orthonormal basis from the SVD of a random matrix.
        let dec = svd(&a).unwrap();
        let k = dec.rank();
        let q = dec.u.select_columns(&(0..k).collect::<Vec<_>>());
        let d = q.rows();
        let x = Matrix::from_vec(
            d, 3,
            (0..3 * d).map(|i| ((seed as usize * 31 + i * 17) % 13) as f64 - 6.0).collect(),
        ).unwrap();
        let inside = project_in(&q, &x).unwrap();
        let outside = project_out(&q, &x).unwrap();
        prop_assert!(inside.add(&outside).sub(&x).max_abs() <= 1e-10 * x.max_abs().max(1.0));
        // Oracle: the projector Q Qᵀ built by nalgebra.
        let nq = to_na(&q);
        let p = &nq * nq.transpose() * to_na(&x);
        prop_assert!((to_na(&inside) - p).abs().max() <= 1e-10 * x.max_abs().max(1.0));
        prop_assert!(q.t_matmul(&outside).max_abs() <= 1e-10 * x.max_abs().max(1.0));
    }

    #[test]
    fn complement_completes_the_space(a in matrix(8)) {
        let dec = svd(&a).unwrap();
        let k = dec.rank();
        let q = dec.u.select_columns(&(0..k).collect::<Vec<_>>());
        let c = orthonormal_complement(&q).unwrap();
        prop_assert_eq!(c.cols(), q.rows() - k);
        let both = q.hstack(&c);
        prop_assert!(orthonormality_error(&both) <= 1e-10);
    }
}

#[test]
fn cholesky_matches_nalgebra() {
    let a = Matrix::from_rows(&[[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]]).unwrap();
    let ours = cholesky(&a).unwrap();
    let theirs = to_na(&a).cholesky().unwrap().l();
    assert!((to_na(&ours) - theirs).abs().max() < 1e-14);
}

#[test]
fn cholesky_rejects_indefinite_input() {
    let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
    assert!(matches!(
        cholesky(&a),
        Err(inflora::Error::NumericalFailure(_))
    ));
}

#[test]
fn full_u_extends_a_rank_deficient_decomposition() {
    let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
    let dec = svd(&a).unwrap();
    assert_eq!(dec.rank(), 1);
    let u = dec.full_u();
    assert_eq!(u.shape(), (3, 3));
    assert!(orthonormality_error(&u) < 1e-12);
}
