//! Max pooling (no padding) and global average pooling.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Shape4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    GlobalAvg,
}

/// Max-pool output plus, for each output element, the flat input index it
/// was taken from.
#[derive(Debug, Clone)]
pub struct MaxPoolOutput<T: Scalar> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn max_pool_output_hw(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("pool window and stride must be >= 1".into()));
    }
    if window > h || window > w {
        return Err(Error::InvalidShape(format!("{window}x{window} pool window larger than {h}x{w} input")));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Ties resolve to the first (lowest flat index) maximum in the window.
pub fn max_pool<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<MaxPoolOutput<T>> {
    let s = x.shape4()?;
    let (ho, wo) = max_pool_output_hw(s.h, s.w, window, stride)?;
    let so = Shape4::new(s.n, s.c, ho, wo)?;
    let xd = x.data();
    let planes: Vec<(Vec<T>, Vec<usize>)> = par::map_range(s.n * s.c, |p| {
        let base = p * s.plane();
        let mut vals = Vec::with_capacity(ho * wo);
        let mut idx = Vec::with_capacity(ho * wo);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * s.w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let j = base + (oy * stride + dy) * s.w + ox * stride + dx;
                        if xd[j] > xd[best] {
                            best = j;
                        }
                    }
                }
                vals.push(xd[best]);
                idx.push(best);
            }
        }
        (vals, idx)
    });
    let mut out = Vec::with_capacity(so.numel());
    let mut argmax = Vec::with_capacity(so.numel());
    for (v, i) in planes {
        out.extend(v);
        argmax.extend(i);
    }
    Ok(MaxPoolOutput { output: Tensor::from_vec(&so.dims(), out)?, argmax })
}

/// Routes each output gradient to its argmax input position.
pub fn max_pool_backward<T: Scalar>(input_shape: Shape4, argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::InvalidShape(format!(
            "max_pool_backward: {} argmax entries for {} gradients",
            argmax.len(),
            grad_out.numel()
        )));
    }
    let mut gx = vec![T::zero(); input_shape.numel()];
    for (&j, &g) in argmax.iter().zip(grad_out.data()) {
        gx[j] = gx[j] + g;
    }
    Tensor::from_vec(&input_shape.dims(), gx)
}

/// Channel means, shape `[N, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape4()?;
    let d = x.data();
    let inv = T::one() / T::from_usize(s.plane()).unwrap();
    let out = par::map_range(s.n * s.c, |p| d[p * s.plane()..(p + 1) * s.plane()].iter().copied().sum::<T>() * inv);
    Tensor::from_vec(&[s.n, s.c, 1, 1], out)
}

/// Spreads `g / (H*W)` over every position of the pooled plane.
pub fn global_avg_pool_backward<T: Scalar>(input_shape: Shape4, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.numel() != input_shape.n * input_shape.c {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            lhs: grad_out.shape().to_vec(),
            rhs: vec![input_shape.n, input_shape.c, 1, 1],
        });
    }
    let inv = T::one() / T::from_usize(input_shape.plane()).unwrap();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); input_shape.numel()];
    par::for_each_chunk_mut(&mut gx, input_shape.plane(), |p, plane| plane.fill(g[p] * inv));
    Tensor::from_vec(&input_shape.dims(), gx)
}

/// Dispatches on `kind`; `window`/`stride` are ignored for global pooling.
pub fn pool<T: Scalar>(x: &Tensor<T>, kind: PoolKind, window: usize, stride: usize) -> Result<Tensor<T>> {
    match kind {
        PoolKind::Max => Ok(max_pool(x, window, stride)?.output),
        PoolKind::GlobalAvg => global_avg_pool(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_two_by_two() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let out = max_pool(&x, 2, 2).unwrap();
        assert_eq!(out.output.data(), &[4.0]);
        assert_eq!(out.argmax, vec![3]);
        let g = max_pool_backward(x.shape4().unwrap(), &out.argmax, &Tensor::full(&[1, 1, 1, 1], 2.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0., 0., 0., 2.]);
    }

    #[test]
    fn ties_take_first_position() {
        let x = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0).unwrap();
        assert_eq!(max_pool(&x, 2, 2).unwrap().argmax, vec![0]);
    }

    #[test]
    fn window_too_large() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(max_pool(&x, 3, 1).is_err());
    }

    #[test]
    fn global_avg_constant_and_backward() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 2.5).unwrap();
        let y = pool(&x, PoolKind::GlobalAvg, 0, 0).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let g = global_avg_pool_backward(x.shape4().unwrap(), &Tensor::full(&[2, 3, 1, 1], 8.0).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
    }
}
