//! 2-D convolution (cross-correlation, zero padding) with two kernels:
//! a direct loop nest and im2col followed by GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, Scalar, Shape4, Tensor, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConvStrategy {
    /// Nested loops over the convolution sum. Also the correctness oracle.
    Direct,
    /// im2col unrolling followed by one GEMM per batch item.
    Unroll,
}

impl ConvStrategy {
    pub const ALL: [ConvStrategy; 2] = [ConvStrategy::Direct, ConvStrategy::Unroll];

    pub fn name(self) -> &'static str {
        match self {
            ConvStrategy::Direct => "DIRECT",
            ConvStrategy::Unroll => "UNROLL",
        }
    }
}

impl std::str::FromStr for ConvStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DIRECT" => Ok(ConvStrategy::Direct),
            "UNROLL" => Ok(ConvStrategy::Unroll),
            other => Err(Error::Config(format!("unknown conv strategy {other:?}"))),
        }
    }
}

/// Geometry of a square convolution, independent of its weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "conv needs positive channels, kernel and stride: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((h + 2p - k) / s) + 1`, or an error when the window does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::InvalidShape(format!(
                "{k}x{k} kernel does not fit a {h}x{w} input with padding {p}",
                k = self.kernel,
                p = self.padding
            )));
        }
        Ok(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// Convolution parameters: geometry plus weight `[out, in, k, k]` and an
/// optional per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub geometry: ConvGeometry,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(geometry: ConvGeometry, bias: bool) -> Result<Self> {
        geometry.validate()?;
        Ok(ConvParams {
            geometry,
            weight: Tensor::zeros(&geometry.weight_shape())?,
            bias: if bias { Some(Tensor::zeros(&[geometry.out_channels])?) } else { None },
        })
    }

    pub fn new(geometry: ConvGeometry, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        geometry.validate()?;
        if weight.shape() != geometry.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv weight",
                lhs: weight.shape().to_vec(),
                rhs: geometry.weight_shape().to_vec(),
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [geometry.out_channels] {
                return Err(Error::ShapeMismatch {
                    op: "conv bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![geometry.out_channels],
                });
            }
        }
        Ok(ConvParams { geometry, weight, bias })
    }

    /// Validates `x` against the parameters and returns (input, output) shapes.
    pub fn shapes(&self, x: &Tensor<T>) -> Result<(Shape4, Shape4)> {
        let s = x.shape4()?;
        let g = &self.geometry;
        if s.c != g.in_channels {
            return Err(Error::InvalidShape(format!(
                "conv expects {} input channels, got {}",
                g.in_channels, s.c
            )));
        }
        let (ho, wo) = g.output_hw(s.h, s.w)?;
        Ok((s, Shape4::new(s.n, g.out_channels, ho, wo)?))
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub grad_x: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Option<Tensor<T>>,
}

/// Valid output index range for one kernel tap along an axis: outputs `o`
/// with `0 <= o*s + tap - p < len`.
#[inline]
fn valid_range(out: usize, len: usize, tap: usize, s: usize, p: usize) -> (usize, usize) {
    // o*s + tap >= p
    let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
    // o*s + tap - p <= len - 1
    let hi = if len + p > tap { ((len + p - tap - 1) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unrolls one `[C, H, W]` item into the patch matrix `[C*k*k, Ho*Wo]`.
/// Row `r` of the matrix starts at `col[r * ld + offset]`, so several items
/// can share one wider matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    g: &ConvGeometry,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
    ld: usize,
    offset: usize,
) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane_out = ho * wo;
    for c in 0..g.in_channels {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ho, h, ky, s, p);
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ld + offset..row * ld + offset + plane_out];
                let (ox0, ox1) = valid_range(wo, w, kx, s, p);
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < oy0 || oy >= oy1 || ox0 >= ox1 {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ky - p;
                    line[..ox0].fill(T::zero());
                    line[ox1..].fill(T::zero());
                    let src = &xc[iy * w..(iy + 1) * w];
                    if s == 1 {
                        let ix0 = ox0 + kx - p;
                        line[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            line[ox] = src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Transposed unrolling: one row per output position, `[Ho*Wo, C*k*k]`.
pub fn im2col_t<T: Scalar>(x: &[T], g: &ConvGeometry, h: usize, w: usize, ho: usize, wo: usize, colt: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let kk = g.patch_len();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut colt[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for c in 0..g.in_channels {
                let xc = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut row[(c * k + ky) * k..(c * k + ky + 1) * k];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (kx, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatters a patch-gradient matrix (layout as in [`im2col`]) back onto
/// `[C, H, W]`, accumulating overlapping taps. `gx` must be zeroed.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    col: &[T],
    g: &ConvGeometry,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    gx: &mut [T],
    ld: usize,
    offset: usize,
) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.in_channels {
        let gc = &mut gx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ho, h, ky, s, p);
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ld + offset..];
                let (ox0, ox1) = valid_range(wo, w, kx, s, p);
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let dst = &mut gc[iy * w..(iy + 1) * w];
                    for ox in ox0..ox1 {
                        dst[ox * s + kx - p] = dst[ox * s + kx - p] + src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Batch items per UNROLL GEMM: enough that each GEMM has at least
/// `MIN_COLS` output columns. Depends on shape only, never on the pool.
fn group_size(n: usize, plane_out: usize) -> usize {
    const MIN_COLS: usize = 256;
    MIN_COLS.div_ceil(plane_out).clamp(1, n)
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, output rows split over the
/// pool. Each element's K reduction is unaffected by the split.
#[allow(clippy::too_many_arguments)]
fn par_gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], tb: Trans, beta: T, c: &mut [T]) {
    let threads = par::current_threads();
    let rows = if threads == 1 { m } else { m.div_ceil(threads * 2).max(16).min(m) };
    par::for_each_chunk_mut(&mut c[..m * n], rows * n, |blk, dst| {
        let r0 = blk * rows;
        let nr = dst.len() / n;
        gemm(nr, k, n, &a[r0 * k..(r0 + nr) * k], Trans::No, b, tb, beta, dst);
    });
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Forward convolution; output `[N, Cout, Ho, Wo]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>, strategy: ConvStrategy) -> Result<Tensor<T>> {
    let (si, so) = p.shapes(x)?;
    let mut out = vec![T::zero(); so.numel()];
    match strategy {
        ConvStrategy::Direct => direct_forward(x.data(), p, si, so, &mut out),
        ConvStrategy::Unroll => unroll_forward(x.data(), p, si, so, &mut out),
    }
    if let Some(b) = &p.bias {
        let b = b.data();
        let plane = so.plane();
        par::for_each_chunk_mut(&mut out, plane, |i, dst| {
            let bv = b[i % so.c];
            dst.iter_mut().for_each(|v| *v = *v + bv);
        });
    }
    Tensor::from_vec(&so.dims(), out)
}

fn direct_forward<T: Scalar>(x: &[T], p: &ConvParams<T>, si: Shape4, so: Shape4, out: &mut [T]) {
    let g = &p.geometry;
    let (k, s, pad) = (g.kernel, g.stride, g.padding);
    let w = p.weight.data();
    par::for_each_chunk_mut(out, so.plane(), |idx, dst| {
        let (n, co) = (idx / so.c, idx % so.c);
        for ci in 0..si.c {
            let xc = &x[(n * si.c + ci) * si.plane()..(n * si.c + ci + 1) * si.plane()];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(so.h, si.h, ky, s, pad);
                for kx in 0..k {
                    let wv = w[((co * si.c + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(so.w, si.w, kx, s, pad);
                    for oy in oy0..oy1 {
                        let row = &xc[(oy * s + ky - pad) * si.w..];
                        let o = &mut dst[oy * so.w..(oy + 1) * so.w];
                        for ox in ox0..ox1 {
                            o[ox] = o[ox] + wv * row[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    });
}

fn unroll_forward<T: Scalar>(x: &[T], p: &ConvParams<T>, si: Shape4, so: Shape4, out: &mut [T]) {
    let g = &p.geometry;
    let (kk, plane) = (g.patch_len(), so.plane());
    let w = p.weight.data();
    let gs = group_size(so.n, plane);
    par::for_each_chunk_mut(out, gs * so.item(), |grp, dst| {
        let n0 = grp * gs;
        let items = dst.len() / so.item();
        let ld = items * plane;
        let mut col = vec![T::zero(); kk * ld];
        for j in 0..items {
            let xn = &x[(n0 + j) * si.item()..(n0 + j + 1) * si.item()];
            im2col(xn, g, si.h, si.w, so.h, so.w, &mut col, ld, j * plane);
        }
        if items == 1 {
            par_gemm(so.c, kk, plane, w, &col, Trans::No, T::zero(), dst);
            return;
        }
        let mut tmp = vec![T::zero(); so.c * ld];
        par_gemm(so.c, kk, ld, w, &col, Trans::No, T::zero(), &mut tmp);
        for j in 0..items {
            for co in 0..so.c {
                dst[j * so.item() + co * plane..j * so.item() + (co + 1) * plane]
                    .copy_from_slice(&tmp[co * ld + j * plane..co * ld + (j + 1) * plane]);
            }
        }
    });
}

/// Backward convolution with a batch reduction order that is fixed
/// regardless of the worker count.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    strategy: ConvStrategy,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_with(x, p, strategy, grad_out, true)
}

/// Backward convolution. With `ordered == false` the UNROLL weight gradient
/// is reduced over the batch with a pool-dependent tree, which is faster but
/// not reproducible across thread counts.
pub fn conv2d_backward_with<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    strategy: ConvStrategy,
    grad_out: &Tensor<T>,
    ordered: bool,
) -> Result<ConvGrads<T>> {
    let (si, so) = p.shapes(x)?;
    if grad_out.shape() != so.dims() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward grad_out",
            lhs: grad_out.shape().to_vec(),
            rhs: so.dims().to_vec(),
        });
    }
    let (gx, gw) = match strategy {
        ConvStrategy::Direct => direct_backward(x.data(), p, si, so, grad_out.data()),
        ConvStrategy::Unroll => unroll_backward(x.data(), p, si, so, grad_out.data(), ordered),
    };
    let grad_bias = match &p.bias {
        Some(_) => {
            let go = grad_out.data();
            let sums = par::map_range(so.c, |co| {
                let mut acc = T::zero();
                for n in 0..so.n {
                    let base = (n * so.c + co) * so.plane();
                    acc = acc + go[base..base + so.plane()].iter().copied().sum::<T>();
                }
                acc
            });
            Some(Tensor::from_vec(&[so.c], sums)?)
        }
        None => None,
    };
    Ok(ConvGrads {
        grad_x: Tensor::from_vec(&si.dims(), gx)?,
        grad_weight: Tensor::from_vec(&p.geometry.weight_shape(), gw)?,
        grad_bias,
    })
}

fn direct_backward<T: Scalar>(x: &[T], p: &ConvParams<T>, si: Shape4, so: Shape4, go: &[T]) -> (Vec<T>, Vec<T>) {
    let g = &p.geometry;
    let (k, s, pad) = (g.kernel, g.stride, g.padding);
    let w = p.weight.data();

    let mut gx = vec![T::zero(); si.numel()];
    par::for_each_chunk_mut(&mut gx, si.plane(), |idx, dst| {
        let (n, ci) = (idx / si.c, idx % si.c);
        for co in 0..so.c {
            let gp = &go[(n * so.c + co) * so.plane()..(n * so.c + co + 1) * so.plane()];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(so.h, si.h, ky, s, pad);
                for kx in 0..k {
                    let wv = w[((co * si.c + ci) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(so.w, si.w, kx, s, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - pad;
                        let row = &mut dst[iy * si.w..(iy + 1) * si.w];
                        for ox in ox0..ox1 {
                            let ix = ox * s + kx - pad;
                            row[ix] = row[ix] + wv * gp[oy * so.w + ox];
                        }
                    }
                }
            }
        }
    });

    let mut gw = vec![T::zero(); w.len()];
    let kk = k * k;
    par::for_each_chunk_mut(&mut gw, kk, |idx, dst| {
        let (co, ci) = (idx / si.c, idx % si.c);
        for n in 0..so.n {
            let gp = &go[(n * so.c + co) * so.plane()..(n * so.c + co + 1) * so.plane()];
            let xc = &x[(n * si.c + ci) * si.plane()..(n * si.c + ci + 1) * si.plane()];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(so.h, si.h, ky, s, pad);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(so.w, si.w, kx, s, pad);
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let row = &xc[(oy * s + ky - pad) * si.w..];
                        for ox in ox0..ox1 {
                            acc = acc + gp[oy * so.w + ox] * row[ox * s + kx - pad];
                        }
                    }
                    dst[ky * k + kx] = dst[ky * k + kx] + acc;
                }
            }
        }
    });
    (gx, gw)
}

fn unroll_backward<T: Scalar>(
    x: &[T],
    p: &ConvParams<T>,
    si: Shape4,
    so: Shape4,
    go: &[T],
    ordered: bool,
) -> (Vec<T>, Vec<T>) {
    let g = &p.geometry;
    let (kk, plane) = (g.patch_len(), so.plane());
    let gs = group_size(so.n, plane);
    let groups = so.n.div_ceil(gs);
    let items_in = |grp: usize| gs.min(so.n - grp * gs);

    // Upstream gradient regrouped as [Cout, items * Ho*Wo] per group.
    let gathered: Vec<Vec<T>> = par::map_range(groups, |grp| {
        let (n0, items) = (grp * gs, items_in(grp));
        if items == 1 {
            return go[n0 * so.item()..(n0 + 1) * so.item()].to_vec();
        }
        let ld = items * plane;
        let mut m = vec![T::zero(); so.c * ld];
        for j in 0..items {
            for co in 0..so.c {
                let src = (n0 + j) * so.item() + co * plane;
                m[co * ld + j * plane..co * ld + (j + 1) * plane].copy_from_slice(&go[src..src + plane]);
            }
        }
        m
    });

    // grad_x: dcol = W^T * dy per group, then scatter.
    let wt = transpose(p.weight.data(), so.c, kk);
    let mut gx = vec![T::zero(); si.numel()];
    par::for_each_chunk_mut(&mut gx, gs * si.item(), |grp, dst| {
        let items = dst.len() / si.item();
        let ld = items * plane;
        let mut dcol = vec![T::zero(); kk * ld];
        par_gemm(kk, so.c, ld, &wt, &gathered[grp], Trans::No, T::zero(), &mut dcol);
        for j in 0..items {
            col2im(&dcol, g, si.h, si.w, so.h, so.w, &mut dst[j * si.item()..(j + 1) * si.item()], ld, j * plane);
        }
    });

    // grad_w^T = sum over groups of col_g * dy_g^T, groups in index order.
    let col_of = |grp: usize| -> Vec<T> {
        let (n0, items) = (grp * gs, items_in(grp));
        let ld = items * plane;
        let mut col = vec![T::zero(); kk * ld];
        for j in 0..items {
            let xn = &x[(n0 + j) * si.item()..(n0 + j + 1) * si.item()];
            im2col(xn, g, si.h, si.w, so.h, so.w, &mut col, ld, j * plane);
        }
        col
    };
    let dyt: Vec<Vec<T>> = par::map_range(groups, |grp| transpose(&gathered[grp], so.c, items_in(grp) * plane));
    let wlen = so.c * kk;
    let gwt = if ordered {
        let cols = par::map_range(groups, col_of);
        let mut gwt = vec![T::zero(); wlen];
        let threads = par::current_threads();
        let rows = if threads == 1 { kk } else { kk.div_ceil(threads * 2).max(16).min(kk) };
        par::for_each_chunk_mut(&mut gwt, rows * so.c, |blk, dst| {
            let r0 = blk * rows;
            let nr = dst.len() / so.c;
            for (grp, col) in cols.iter().enumerate() {
                let ld = items_in(grp) * plane;
                gemm(nr, ld, so.c, &col[r0 * ld..(r0 + nr) * ld], Trans::No, &dyt[grp], Trans::No, T::one(), dst);
            }
        });
        gwt
    } else {
        par::fold_reduce(
            groups,
            || vec![T::zero(); wlen],
            |mut acc, grp| {
                let col = col_of(grp);
                let ld = items_in(grp) * plane;
                gemm(kk, ld, so.c, &col, Trans::No, &dyt[grp], Trans::No, T::one(), &mut acc);
                acc
            },
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + y);
                a
            },
        )
    };
    let gw = transpose(&gwt, kk, so.c);
    (gx, gw)
}
