//! Per-channel batch normalization over NCHW activations.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Shape4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Learned affine parameters plus running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// gamma = 1, beta = 0, running mean 0 / variance 1, momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNormState {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// What backward needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    pub mode: Mode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub cache: BatchNormCache<T>,
    /// Updated (running_mean, running_var) in train mode; the caller commits them.
    pub running: Option<(Tensor<T>, Tensor<T>)>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Scalar> {
    pub grad_x: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, st: &BatchNormState<T>) -> Result<Shape4> {
    let s = x.shape4()?;
    if s.c != st.channels() {
        return Err(Error::InvalidShape(format!(
            "batch norm has {} channels, input has {}",
            st.channels(),
            s.c
        )));
    }
    Ok(s)
}

/// Per-channel reduction `f` summed over every (n, h, w) in a fixed order.
fn channel_sums<T: Scalar>(s: Shape4, data: &[T], f: impl Fn(usize, T) -> T + Sync + Send) -> Vec<T> {
    par::map_range(s.c, |c| {
        let mut acc = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * s.plane();
            acc = acc + data[base..base + s.plane()].iter().map(|&v| f(c, v)).sum::<T>();
        }
        acc
    })
}

pub fn batchnorm_forward<T: Scalar>(x: &Tensor<T>, st: &BatchNormState<T>, mode: Mode) -> Result<BatchNormOutput<T>> {
    let s = check(x, st)?;
    let m = s.n * s.plane();
    let (mean, var, running) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::InvalidShape(format!(
                    "train-mode batch norm needs at least 2 values per channel, got {m}"
                )));
            }
            let mt = T::from_usize(m).unwrap();
            let mean: Vec<T> = channel_sums(s, x.data(), |_, v| v).into_iter().map(|v| v / mt).collect();
            let var: Vec<T> = channel_sums(s, x.data(), |c, v| (v - mean[c]) * (v - mean[c]))
                .into_iter()
                .map(|v| v / mt)
                .collect();
            let unbias = mt / (mt - T::one());
            let mom = st.momentum;
            let keep = T::one() - mom;
            let rm: Vec<T> = st.running_mean.data().iter().zip(&mean).map(|(&r, &b)| keep * r + mom * b).collect();
            let rv: Vec<T> =
                st.running_var.data().iter().zip(&var).map(|(&r, &b)| keep * r + mom * b * unbias).collect();
            let running = (Tensor::from_vec(&[s.c], rm)?, Tensor::from_vec(&[s.c], rv)?);
            (mean, var, Some(running))
        }
        Mode::Eval => (st.running_mean.data().to_vec(), st.running_var.data().to_vec(), None),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + st.eps).sqrt()).collect();
    let mut xhat = x.data().to_vec();
    let mut out = vec![T::zero(); xhat.len()];
    let (g, b) = (st.gamma.data(), st.beta.data());
    par::for_each_chunk_mut(&mut xhat, s.plane(), |i, plane| {
        let c = i % s.c;
        plane.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
    });
    par::for_each_chunk_mut(&mut out, s.plane(), |i, plane| {
        let c = i % s.c;
        let src = &xhat[i * s.plane()..(i + 1) * s.plane()];
        plane.iter_mut().zip(src).for_each(|(o, &v)| *o = g[c] * v + b[c]);
    });
    Ok(BatchNormOutput {
        output: Tensor::from_vec(&s.dims(), out)?,
        cache: BatchNormCache { mode, xhat: Tensor::from_vec(&s.dims(), xhat)?, inv_std },
        running,
    })
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    st: &BatchNormState<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let s = check(grad_out, st)?;
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: cache.xhat.shape().to_vec(),
        });
    }
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let dbeta = channel_sums(s, gy, |_, v| v);
    let dgamma = par::map_range(s.c, |c| {
        let mut acc = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * s.plane();
            for j in base..base + s.plane() {
                acc = acc + gy[j] * xh[j];
            }
        }
        acc
    });
    let g = st.gamma.data();
    let mt = T::from_usize(s.n * s.plane()).unwrap();
    let mut gx = vec![T::zero(); gy.len()];
    par::for_each_chunk_mut(&mut gx, s.plane(), |i, plane| {
        let c = i % s.c;
        let base = i * s.plane();
        let scale = g[c] * cache.inv_std[c];
        match cache.mode {
            Mode::Train => {
                // dx = g*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
                for (j, o) in plane.iter_mut().enumerate() {
                    let k = base + j;
                    *o = scale / mt * (mt * gy[k] - dbeta[c] - xh[k] * dgamma[c]);
                }
            }
            Mode::Eval => {
                for (j, o) in plane.iter_mut().enumerate() {
                    *o = scale * gy[base + j];
                }
            }
        }
    });
    Ok(BatchNormGrads {
        grad_x: Tensor::from_vec(&s.dims(), gx)?,
        grad_gamma: Tensor::from_vec(&[s.c], dgamma)?,
        grad_beta: Tensor::from_vec(&[s.c], dbeta)?,
    })
}
