use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct LossOutput<T: Scalar> {
    /// Mean negative log-likelihood over the batch.
    pub loss: T,
    /// `(softmax - onehot) / N`.
    pub grad_logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Softmax cross-entropy, stabilized by subtracting each row's maximum.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<LossOutput<T>> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::InvalidShape(format!("logits must be [N, K], got {s:?}"))),
    };
    if targets.len() != n {
        return Err(Error::InvalidShape(format!("{} targets for a batch of {n}", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let nt = T::from_usize(n).unwrap();
    let mut probs = logits.data().to_vec();
    let mut grad = vec![T::zero(); n * k];
    let mut total = T::zero();
    for i in 0..n {
        let row = &mut probs[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z = z + *v;
        }
        // -log softmax[t] = log z - (x_t - max)
        total = total + z.ln() - (logits.data()[i * k + targets[i]] - max);
        for v in row.iter_mut() {
            *v = *v / z;
        }
        for j in 0..k {
            let onehot = if j == targets[i] { T::one() } else { T::zero() };
            grad[i * k + j] = (row[j] - onehot) / nt;
        }
    }
    Ok(LossOutput {
        loss: total / nt,
        grad_logits: Tensor::from_vec(&[n, k], grad)?,
        probs: Tensor::from_vec(&[n, k], probs)?,
    })
}
