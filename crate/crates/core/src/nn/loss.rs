use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct CrossEntropy<T: Scalar> {
    /// Mean negative log-likelihood over the batch.
    pub loss: T,
    /// Row-wise softmax of the logits.
    pub probs: Tensor<T>,
    /// Gradient of `loss` with respect to the logits: `(probs − onehot)/B`.
    pub grad: Tensor<T>,
}

/// Row-wise softmax of a `B×C` matrix, shifted by the row max for stability.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 || logits.dims()[1] == 0 {
        return Err(Error::invalid(format!(
            "softmax expects B×C logits, got {:?}",
            logits.dims()
        )));
    }
    let c = logits.dims()[1];
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(probs)
}

pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    let probs = softmax(logits)?;
    let (b, c) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != b {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let bf = T::from_f64(b as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (r, &label) in labels.iter().enumerate() {
        // log p computed from the shifted logits to avoid log(0) on saturated rows
        let row = &logits.data()[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss = loss + (lse - row[label]);
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        g[label] = g[label] - T::one();
        for v in g.iter_mut() {
            *v = *v / bf;
        }
    }
    Ok(CrossEntropy {
        loss: loss / bf,
        probs,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[1, 4]);
        let ce = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(ce.probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((ce.loss - 4f64.ln()).abs() < 1e-12);
        assert!((ce.loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_do_not_overflow() {
        let logits = Tensor::<f32>::new(vec![1, 4], vec![1000.0, 0.0, 0.0, 0.0]).unwrap();
        let ce = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(ce.loss.is_finite() && ce.loss.abs() < 1e-6);
        let wrong = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((wrong.loss - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f64>::zeros(&[2, 4]);
        assert!(softmax_cross_entropy(&logits, &[0, 4]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }
}
