use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits` (`N × C`) whose argmax equals the label.
pub fn top1_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape(
            "top1_accuracy",
            format!("logits {s:?} vs {} labels", labels.len()),
        ));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
