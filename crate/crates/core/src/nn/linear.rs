use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, Scalar, Tensor, Trans};

#[derive(Debug, Clone)]
pub struct LinearGrads<T: Scalar> {
    pub grad_x: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape(), b.shape()) {
        ([n, d], [d2, k], [k2]) if d == d2 && k == k2 => Ok((*n, *d, *k)),
        _ => Err(Error::ShapeMismatch { op: "linear", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() }),
    }
}

/// `x[N, D] * W[D, K] + b[K]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, k) = dims(x, w, b)?;
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, d, k, x.data(), Trans::No, w.data(), Trans::No, T::one(), &mut out);
    Tensor::from_vec(&[n, k], out)
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, d, k) = dims(x, w, b)?;
    if grad_out.shape() != [n, k] {
        return Err(Error::ShapeMismatch { op: "linear_backward", lhs: grad_out.shape().to_vec(), rhs: vec![n, k] });
    }
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); n * d];
    gemm(n, k, d, gy, Trans::No, w.data(), Trans::Yes, T::zero(), &mut gx);
    let mut gw = vec![T::zero(); d * k];
    gemm(d, n, k, x.data(), Trans::Yes, gy, Trans::No, T::zero(), &mut gw);
    let gb = par::map_range(k, |j| (0..n).map(|i| gy[i * k + j]).sum::<T>());
    Ok(LinearGrads {
        grad_x: Tensor::from_vec(&[n, d], gx)?,
        grad_weight: Tensor::from_vec(&[d, k], gw)?,
        grad_bias: Tensor::from_vec(&[k], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures() {
        let x = Tensor::<f32>::from_vec(&[1, 2], vec![1., 2.]).unwrap();
        let eye = Tensor::eye(2).unwrap();
        let zero = Tensor::zeros(&[2]).unwrap();
        assert_eq!(linear(&x, &eye, &zero).unwrap().data(), &[1., 2.]);
        let b = Tensor::from_vec(&[2], vec![3., 4.]).unwrap();
        assert_eq!(linear(&x, &eye, &b).unwrap().data(), &[4., 6.]);
        assert!(linear(&x, &Tensor::eye(3).unwrap(), &zero).is_err());
    }
}
