use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Cross-entropy restricted to the logits in `classes`.
///
/// Softmax runs over the rows in `classes` only, every other row of the
/// returned gradient is exactly zero, and the loss is the batch mean. With
/// `classes = 0..C` this is the ordinary (global) cross-entropy.
pub fn local_ce_loss(
    logits: &Matrix,
    labels: &[usize],
    classes: Range<usize>,
) -> Result<(f64, Matrix)> {
    let (c_total, n) = logits.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} logit columns",
            labels.len()
        )));
    }
    if classes.is_empty() || classes.end > c_total {
        return Err(Error::InvalidInput(format!(
            "class range {classes:?} does not fit {c_total} logits"
        )));
    }
    if let Some(bad) = labels.iter().find(|y| !classes.contains(y)) {
        return Err(Error::InvalidInput(format!(
            "label {bad} is outside the task classes {classes:?}"
        )));
    }
    let mut grad = Matrix::zeros(c_total, n);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    let mut probs = vec![0.0; classes.len()];
    for (j, &y) in labels.iter().enumerate() {
        let max = classes
            .clone()
            .map(|c| logits[(c, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (k, c) in classes.clone().enumerate() {
            probs[k] = (logits[(c, j)] - max).exp();
            total += probs[k];
        }
        loss += total.ln() - (logits[(y, j)] - max);
        for (k, c) in classes.clone().enumerate() {
            let p = probs[k] / total;
            let target = if c == y { 1.0 } else { 0.0 };
            grad[(c, j)] = (p - target) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_example() {
        let logits = Matrix::from_columns(4, &[[2.0, 1.0, 0.0, 0.0]]);
        let (loss, grad) = local_ce_loss(&logits, &[1], 0..2).unwrap();
        let expected = (1.0 + std::f64::consts::E).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 1.313262).abs() < 1e-6);
        assert_eq!(grad[(2, 0)], 0.0);
        assert_eq!(grad[(3, 0)], 0.0);
        assert!((grad[(0, 0)] + grad[(1, 0)]).abs() < 1e-15);
    }

    #[test]
    fn symmetric_logits() {
        let logits = Matrix::from_columns(3, &[[5.0, 5.0, 100.0]]);
        let (loss, _) = local_ce_loss(&logits, &[0], 0..2).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_labels_outside_range() {
        let logits = Matrix::zeros(4, 1);
        assert!(matches!(
            local_ce_loss(&logits, &[3], 0..2),
            Err(Error::InvalidInput(_))
        ));
    }
}
