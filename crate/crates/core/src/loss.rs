use crate::error::{GapError, Result};
use crate::tensor::Tensor;

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(GapError::Shape(format!("logits must be [B, C], got {:?}", logits.shape())));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(GapError::Shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(GapError::LabelRange { label, n_classes: c });
    }
    Ok((b, c))
}

/// Mean cross-entropy of the row softmax and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = check_labels(logits, labels)?;
    let mut grad = Tensor::zeros(vec![b, c]);
    let mut total = 0.0;
    let scale = 1.0 / b as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        total += log_sum - (row[label] - max);
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp() / sum * scale;
        }
        g[label] -= scale;
    }
    Ok((total * scale, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn correct_count(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    check_labels(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count())
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(correct_count(logits, labels)? as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(b: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![b, c], v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(vec![3, 10]), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_prediction() {
        let (loss, grad) = softmax_cross_entropy(&t(1, 3, &[0.0, 1e6, 0.0]), &[1]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = t(2, 3, &[0.3, -1.2, 0.8, 2.0, 0.1, -0.4]);
        let labels = [2, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut up = logits.clone();
            up.data_mut()[k] += h;
            let mut dn = logits.clone();
            dn.data_mut()[k] -= h;
            let fd = (softmax_cross_entropy(&up, &labels).unwrap().0
                - softmax_cross_entropy(&dn, &labels).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[k];
            assert!((a - fd).abs() / a.abs().max(fd.abs()) < 1e-6, "k={k} a={a} fd={fd}");
        }
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(vec![1, 3]), &[3]),
            Err(GapError::LabelRange { label: 3, n_classes: 3 })
        ));
        assert!(matches!(
            accuracy(&Tensor::zeros(vec![1, 3]), &[5]),
            Err(GapError::LabelRange { .. })
        ));
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&Tensor::zeros(vec![4, 3]), &[0, 0, 0, 0]).unwrap(), 1.0);
        let sep = t(2, 2, &[5.0, -5.0, -5.0, 5.0]);
        assert_eq!(accuracy(&sep, &[0, 1]).unwrap(), 1.0);
        let l = t(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(accuracy(&l, &[0, 1, 0, 1]).unwrap(), 0.75);
    }
}
