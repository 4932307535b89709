//! Forward and backward kernels for dense tensor operations.
//!
//! These are pure functions; [`crate::autodiff::Tape`] records which of them
//! produced a value and calls the matching backward routine.
//!
//! Per-image work inside `conv2d` may run on the rayon pool. Every parallel
//! section writes disjoint output regions and all reductions over images run
//! sequentially in index order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// conv2d

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

pub fn conv2d_geom(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Conv2dGeom> {
    let (&[_, _, cin, h, w], &[cout, wcin, kh, kw]) = (x_shape, w_shape) else {
        return Err(Error::ShapeMismatch {
            op: "conv2d (expected input [T,N,C,H,W] and kernel [Cout,Cin,kh,kw])",
            left: x_shape.to_vec(),
            right: w_shape.to_vec(),
        });
    };
    if cin != wcin {
        return Err(Error::ShapeMismatch {
            op: "conv2d input channels vs kernel Cin",
            left: x_shape.to_vec(),
            right: w_shape.to_vec(),
        });
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be >= 1"));
    }
    if kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d kernel larger than padded input",
            left: x_shape.to_vec(),
            right: w_shape.to_vec(),
        });
    }
    Ok(Conv2dGeom {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    })
}

fn im2col<F: Scalar>(x: &[F], g: &Conv2dGeom, col: &mut [F]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid columns form one contiguous run
                        let lo = g.pad.saturating_sub(kj).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kj).clamp(lo, g.wo);
                        dst[..lo].fill(F::zero());
                        dst[hi..].fill(F::zero());
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Scalar>(col: &[F], g: &Conv2dGeom, gx: &mut [F]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution applied independently at every `(t, n)` with shared weights.
pub fn conv2d<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let g = conv2d_geom(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: b.shape().to_vec(),
                right: vec![g.cout],
            });
        }
    }
    let (t, n) = (x.shape()[0], x.shape()[1]);
    let images = t * n;
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * g.out_pixels();
    let (k, p) = (g.patch(), g.out_pixels());
    let mut out = vec![F::zero(); images * out_stride];
    let xd = x.data();
    let wd = weight.data();
    out.par_chunks_mut(out_stride.max(1))
        .enumerate()
        .for_each_init(
            || vec![F::zero(); k * p],
            |col, (i, y)| {
                im2col(&xd[i * in_stride..(i + 1) * in_stride], &g, col);
                F::gemm_raw(
                    F::one(),
                    wd,
                    MatRef::row_major(g.cout, k),
                    col,
                    MatRef::row_major(k, p),
                    F::zero(),
                    y,
                    MatRef::row_major(g.cout, p),
                );
                if let Some(b) = bias {
                    for (co, row) in y.chunks_mut(p).enumerate() {
                        let bv = b.data()[co];
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
            },
        );
    Tensor::new(vec![t, n, g.cout, g.ho, g.wo], out)
}

pub struct Conv2dGrads<F> {
    pub input: Option<Tensor<F>>,
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    has_bias: bool,
    need_input: bool,
    stride: usize,
    pad: usize,
    gy: &Tensor<F>,
) -> Result<Conv2dGrads<F>> {
    let g = conv2d_geom(x.shape(), weight.shape(), stride, pad)?;
    let images = x.shape()[0] * x.shape()[1];
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * g.out_pixels();
    let (k, p) = (g.patch(), g.out_pixels());
    let wd = weight.data();
    let gyd = gy.data();

    let input = if need_input {
        let mut gx = vec![F::zero(); images * in_stride];
        gx.par_chunks_mut(in_stride.max(1))
            .enumerate()
            .for_each_init(
                || vec![F::zero(); k * p],
                |gcol, (i, gxi)| {
                    F::gemm_raw(
                        F::one(),
                        wd,
                        MatRef::transposed(k, g.cout),
                        &gyd[i * out_stride..(i + 1) * out_stride],
                        MatRef::row_major(g.cout, p),
                        F::zero(),
                        gcol,
                        MatRef::row_major(k, p),
                    );
                    col2im_add(gcol, &g, gxi);
                },
            );
        Some(Tensor::new(x.shape().to_vec(), gx)?)
    } else {
        None
    };

    let xd = x.data();
    let mut gw = vec![F::zero(); g.cout * k];
    let mut col = vec![F::zero(); k * p];
    for i in 0..images {
        im2col(&xd[i * in_stride..(i + 1) * in_stride], &g, &mut col);
        F::gemm_raw(
            F::one(),
            &gyd[i * out_stride..(i + 1) * out_stride],
            MatRef::row_major(g.cout, p),
            &col,
            MatRef::transposed(p, k),
            F::one(),
            &mut gw,
            MatRef::row_major(g.cout, k),
        );
    }

    let bias = has_bias.then(|| {
        let mut gb = vec![F::zero(); g.cout];
        for i in 0..images {
            for (co, row) in gyd[i * out_stride..(i + 1) * out_stride].chunks(p).enumerate() {
                gb[co] += row.iter().copied().sum::<F>();
            }
        }
        Tensor::new(vec![g.cout], gb).expect("bias shape")
    });

    Ok(Conv2dGrads {
        input,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias,
    })
}

// ---------------------------------------------------------------------------
// linear

fn linear_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let &[out, inp] = w else {
        return Err(Error::Rank {
            op: "linear weight",
            expected: 2,
            got: w.to_vec(),
        });
    };
    if x.len() < 3 {
        return Err(Error::Rank {
            op: "linear input [T,N,...]",
            expected: 3,
            got: x.to_vec(),
        });
    }
    let features: usize = x[2..].iter().product();
    if features != inp {
        return Err(Error::ShapeMismatch {
            op: "linear flattened features vs weight In",
            left: x.to_vec(),
            right: w.to_vec(),
        });
    }
    Ok((x[0], x[1], inp, out))
}

/// Per-timestep affine map on inputs flattened to `[T, N, In]`.
pub fn linear<F: Scalar>(x: &Tensor<F>, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    let (t, n, inp, out) = linear_dims(x.shape(), weight.shape())?;
    let m = t * n;
    let mut y = vec![F::zero(); m * out];
    if let Some(b) = bias {
        if b.shape() != [out] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: b.shape().to_vec(),
                right: vec![out],
            });
        }
        for row in y.chunks_mut(out) {
            row.copy_from_slice(b.data());
        }
    }
    F::gemm_raw(
        F::one(),
        x.data(),
        MatRef::row_major(m, inp),
        weight.data(),
        MatRef::transposed(inp, out),
        F::one(),
        &mut y,
        MatRef::row_major(m, out),
    );
    Tensor::new(vec![t, n, out], y)
}

pub fn linear_backward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    has_bias: bool,
    gy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Option<Tensor<F>>)> {
    let (t, n, inp, out) = linear_dims(x.shape(), weight.shape())?;
    let m = t * n;
    let mut gx = vec![F::zero(); m * inp];
    F::gemm_raw(
        F::one(),
        gy.data(),
        MatRef::row_major(m, out),
        weight.data(),
        MatRef::row_major(out, inp),
        F::zero(),
        &mut gx,
        MatRef::row_major(m, inp),
    );
    let mut gw = vec![F::zero(); out * inp];
    F::gemm_raw(
        F::one(),
        gy.data(),
        MatRef::transposed(out, m),
        x.data(),
        MatRef::row_major(m, inp),
        F::zero(),
        &mut gw,
        MatRef::row_major(out, inp),
    );
    let gb = has_bias.then(|| {
        let mut gb = vec![F::zero(); out];
        for row in gy.data().chunks(out) {
            for (a, &b) in gb.iter_mut().zip(row) {
                *a += b;
            }
        }
        Tensor::new(vec![out], gb).expect("bias shape")
    });
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        gb,
    ))
}

// ---------------------------------------------------------------------------
// pooling

fn pool_dims(shape: &[usize], k: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let &[t, n, c, h, w] = shape else {
        return Err(Error::Rank {
            op: "avgpool2d",
            expected: 5,
            got: shape.to_vec(),
        });
    };
    if k == 0 || stride == 0 {
        return Err(invalid("avgpool2d", "window and stride must be >= 1"));
    }
    if k > h || k > w {
        return Err(invalid("avgpool2d", format!("window {k} exceeds spatial dims {h}x{w}")));
    }
    Ok((t * n * c, h, w, (h - k) / stride + 1, (w - k) / stride + 1, c))
}

pub fn avgpool2d<F: Scalar>(x: &Tensor<F>, k: usize, stride: usize) -> Result<Tensor<F>> {
    let (planes, h, w, ho, wo, _) = pool_dims(x.shape(), k, stride)?;
    let inv = F::one() / F::c((k * k) as f64);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for plane in x.data().chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = F::zero();
                for dy in 0..k {
                    let row = &plane[(oy * stride + dy) * w..];
                    for dx in 0..k {
                        acc += row[ox * stride + dx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    let s = x.shape();
    Tensor::new(vec![s[0], s[1], s[2], ho, wo], out)
}

pub fn avgpool2d_backward<F: Scalar>(x_shape: &[usize], k: usize, stride: usize, gy: &Tensor<F>) -> Result<Tensor<F>> {
    let (planes, h, w, ho, wo, _) = pool_dims(x_shape, k, stride)?;
    let inv = F::one() / F::c((k * k) as f64);
    let mut gx = vec![F::zero(); planes * h * w];
    for (plane, gplane) in gx.chunks_mut(h * w).zip(gy.data().chunks(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gplane[oy * wo + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        plane[(oy * stride + dy) * w + ox * stride + dx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// Mean over `(H, W)`: `[T, N, C, H, W] -> [T, N, C]`.
pub fn global_avgpool<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let [t, n, c, h, w] = x.dims::<5>("global_avgpool")?;
    if h * w == 0 {
        return Err(invalid("global_avgpool", "empty spatial extent"));
    }
    let inv = F::one() / F::c((h * w) as f64);
    let out = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<F>() * inv).collect();
    Tensor::new(vec![t, n, c], out)
}

pub fn global_avgpool_backward<F: Scalar>(x_shape: &[usize], gy: &Tensor<F>) -> Tensor<F> {
    let hw = x_shape[3] * x_shape[4];
    let inv = F::one() / F::c(hw as f64);
    let mut gx = Vec::with_capacity(gy.len() * hw);
    for &g in gy.data() {
        gx.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(x_shape.to_vec(), gx).expect("pool grad shape")
}

// ---------------------------------------------------------------------------
// batch norm

pub const BN_EPS: f64 = 1e-5;

/// Saved forward state of a batch-norm application.
#[derive(Debug, Clone)]
pub struct BnSaved<F> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<F>,
    pub batch_mean: Vec<F>,
    pub batch_var_unbiased: Vec<F>,
    pub train: bool,
}

fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let &[t, n, c, h, w] = shape else {
        return Err(Error::Rank {
            op: "batchnorm",
            expected: 5,
            got: shape.to_vec(),
        });
    };
    Ok((t * n, c, h * w))
}

/// Batch norm with statistics over `(T, N, H, W)` per channel.
///
/// In eval mode `running` supplies `(mean, var)`; in train mode it is ignored.
pub fn batchnorm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    running: Option<(&Tensor<F>, &Tensor<F>)>,
) -> Result<(Tensor<F>, BnSaved<F>)> {
    let (blocks, c, hw) = bn_dims(x.shape())?;
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm affine parameters",
                left: p.shape().to_vec(),
                right: vec![c],
            });
        }
    }
    let m = blocks * hw;
    if m == 0 {
        return Err(invalid("batchnorm", "empty tensor"));
    }
    let xd = x.data();
    let eps = F::c(BN_EPS);
    let (mean, var, var_unbiased, train) = match running {
        None => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for b in 0..blocks {
                for ch in 0..c {
                    let s = &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    mean[ch] += s.iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for b in 0..blocks {
                for ch in 0..c {
                    let s = &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let mu = mean[ch];
                    var[ch] += s
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
            }
            let unbiased = var
                .iter()
                .map(|&v| if m > 1 { v / (m - 1) as f64 } else { 0.0 })
                .collect::<Vec<_>>();
            var.iter_mut().for_each(|v| *v /= m as f64);
            (
                mean.into_iter().map(F::c).collect::<Vec<F>>(),
                var.into_iter().map(F::c).collect::<Vec<F>>(),
                unbiased.into_iter().map(F::c).collect::<Vec<F>>(),
                true,
            )
        }
        Some((rm, rv)) => {
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm running stats",
                    left: rm.shape().to_vec(),
                    right: vec![c],
                });
            }
            (rm.data().to_vec(), rv.data().to_vec(), rv.data().to_vec(), false)
        }
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); xd.len()];
    let mut y = vec![F::zero(); xd.len()];
    for b in 0..blocks {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for ((xh, yv), &xv) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xd[r]) {
                *xh = (xv - mu) * is;
                *yv = *xh * ga + be;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BnSaved {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
            train,
        },
    ))
}

pub fn batchnorm_backward<F: Scalar>(
    saved: &BnSaved<F>,
    gamma: &Tensor<F>,
    gy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (blocks, c, hw) = bn_dims(gy.shape())?;
    let m = F::c((blocks * hw) as f64);
    let gyd = gy.data();
    let xh = saved.xhat.data();
    let mut sum_g = vec![F::zero(); c];
    let mut sum_gx = vec![F::zero(); c];
    for b in 0..blocks {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&g, &x) in gyd[r.clone()].iter().zip(&xh[r]) {
                sum_g[ch] += g;
                sum_gx[ch] += g * x;
            }
        }
    }
    let mut gx = vec![F::zero(); gyd.len()];
    for b in 0..blocks {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let scale = gamma.data()[ch] * saved.inv_std[ch];
            if saved.train {
                let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                for ((o, &g), &x) in gx[r.clone()].iter_mut().zip(&gyd[r.clone()]).zip(&xh[r]) {
                    *o = scale * (g - mg - x * mgx);
                }
            } else {
                for (o, &g) in gx[r.clone()].iter_mut().zip(&gyd[r]) {
                    *o = scale * g;
                }
            }
        }
    }
    Ok((
        Tensor::new(gy.shape().to_vec(), gx)?,
        Tensor::new(vec![c], sum_gx)?,
        Tensor::new(vec![c], sum_g)?,
    ))
}

// ---------------------------------------------------------------------------
// softmax / losses

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize)> {
    let &[a, b] = shape else {
        return Err(Error::Rank {
            op: "softmax",
            expected: 2,
            got: shape.to_vec(),
        });
    };
    match axis {
        0 => Ok((a, b)),
        1 => Ok((b, a)),
        _ => Err(invalid("softmax", format!("axis {axis} out of range for a 2-D tensor"))),
    }
}

/// Numerically stable softmax of a vector.
pub fn softmax_vec<F: Scalar>(v: &[F]) -> Vec<F> {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax along `axis` of a 2-D tensor.
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (len, count) = axis_layout(x.shape(), axis)?;
    let mut out = x.clone();
    let (outer_step, inner_step) = if axis == 0 { (1, count) } else { (len, 1) };
    let d = out.data_mut();
    let mut buf = vec![F::zero(); len];
    for j in 0..count {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = d[j * outer_step + i * inner_step];
        }
        for (i, v) in softmax_vec(&buf).into_iter().enumerate() {
            d[j * outer_step + i * inner_step] = v;
        }
    }
    Ok(out)
}

pub fn softmax_backward<F: Scalar>(y: &Tensor<F>, axis: usize, gy: &Tensor<F>) -> Result<Tensor<F>> {
    let (len, count) = axis_layout(y.shape(), axis)?;
    let (outer_step, inner_step) = if axis == 0 { (1, count) } else { (len, 1) };
    let (yd, gd) = (y.data(), gy.data());
    let mut gx = vec![F::zero(); yd.len()];
    for j in 0..count {
        let idx = |i: usize| j * outer_step + i * inner_step;
        let dot: F = (0..len).map(|i| yd[idx(i)] * gd[idx(i)]).sum();
        for i in 0..len {
            gx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), gx)
}

/// Mean over the leading (time) axis: `[T, ...] -> [...]`.
pub fn mean_time<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let t = *x.shape().first().ok_or_else(|| invalid("rate_decode", "scalar input"))?;
    if t == 0 {
        return Err(invalid("rate_decode", "T = 0"));
    }
    let stride = x.outer_stride();
    let mut out = vec![F::zero(); stride];
    for step in 0..t {
        for (o, &v) in out.iter_mut().zip(x.outer(step)) {
            *o += v;
        }
    }
    let inv = F::one() / F::c(t as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(x.shape()[1..].to_vec(), out)
}

pub fn mean_time_backward<F: Scalar>(x_shape: &[usize], gy: &Tensor<F>) -> Tensor<F> {
    let t = x_shape[0];
    let inv = F::one() / F::c(t as f64);
    let mut gx = Vec::with_capacity(gy.len() * t);
    for _ in 0..t {
        gx.extend(gy.data().iter().map(|&g| g * inv));
    }
    Tensor::new(x_shape.to_vec(), gx).expect("mean grad shape")
}

/// Mean cross-entropy of `logits [N, K]`; also returns the softmax probabilities.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Tensor<F>)> {
    let [n, k] = logits.dims::<2>("ce_loss")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "ce_loss labels",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(invalid("ce_loss", "empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = F::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        total += lse - row[label];
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    Ok((total / F::c(n as f64), Tensor::new(vec![n, k], probs)?))
}

pub fn cross_entropy_backward<F: Scalar>(probs: &Tensor<F>, labels: &[usize], g: F) -> Tensor<F> {
    let k = probs.shape()[1];
    let scale = g / F::c(labels.len() as f64);
    let mut gx = probs.clone();
    for (row, &label) in gx.data_mut().chunks_mut(k).zip(labels) {
        row[label] -= F::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    gx
}

// ---------------------------------------------------------------------------
// spiking

/// Rectangular surrogate derivative `(1/a) * 1[|h - theta| < a/2]`.
#[inline]
pub fn surrogate_grad<F: Scalar>(h: F, theta: F, a: F) -> F {
    if (h - theta).abs() < a * F::c(0.5) {
        F::one() / a
    } else {
        F::zero()
    }
}

#[inline]
pub fn heaviside<F: Scalar>(h: F, theta: F) -> F {
    if h >= theta {
        F::one()
    } else {
        F::zero()
    }
}

/// Parameters of the fused LIF sequence kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub theta: f64,
    pub surrogate_a: f64,
    /// Treat the spike in the soft-reset path as a constant during backward.
    pub detach_reset: bool,
}

/// Runs charge, fire and soft reset for every timestep of `input [T, ...]`,
/// starting from zero potential. Returns `(spikes, H)`.
pub fn lif_sequence<F: Scalar>(input: &Tensor<F>, p: &LifParams) -> Result<(Tensor<F>, Tensor<F>)> {
    let t = *input.shape().first().ok_or_else(|| invalid("lif", "scalar input"))?;
    if t == 0 {
        return Err(invalid("lif", "T = 0"));
    }
    let stride = input.outer_stride();
    let leak = F::one() - F::one() / F::c(p.tau);
    let theta = F::c(p.theta);
    let mut u = vec![F::zero(); stride];
    let mut spikes = vec![F::zero(); input.len()];
    let mut hs = vec![F::zero(); input.len()];
    let id = input.data();
    for step in 0..t {
        let r = step * stride..(step + 1) * stride;
        for (((uv, &i), s), h) in u.iter_mut().zip(&id[r.clone()]).zip(&mut spikes[r.clone()]).zip(&mut hs[r]) {
            *h = leak * *uv + i;
            *s = heaviside(*h, theta);
            *uv = *h - *s * theta;
        }
    }
    let shape = input.shape().to_vec();
    Ok((Tensor::new(shape.clone(), spikes)?, Tensor::new(shape, hs)?))
}

/// BPTT through [`lif_sequence`] given spike gradients; returns the input gradient.
pub fn lif_sequence_backward<F: Scalar>(h: &Tensor<F>, gs: &Tensor<F>, p: &LifParams) -> Tensor<F> {
    let t = h.shape()[0];
    let stride = h.outer_stride();
    let leak = F::one() - F::one() / F::c(p.tau);
    let (theta, a) = (F::c(p.theta), F::c(p.surrogate_a));
    let mut gu = vec![F::zero(); stride];
    let mut gi = vec![F::zero(); h.len()];
    let (hd, gd) = (h.data(), gs.data());
    for step in (0..t).rev() {
        let base = step * stride;
        for e in 0..stride {
            let sg = surrogate_grad(hd[base + e], theta, a);
            let reset = if p.detach_reset { F::one() } else { F::one() - theta * sg };
            let gh = gd[base + e] * sg + gu[e] * reset;
            gi[base + e] = gh;
            gu[e] = leak * gh;
        }
    }
    Tensor::new(h.shape().to_vec(), gi).expect("lif grad shape")
}

// ---------------------------------------------------------------------------
// temporal transformer pieces

fn temporal_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::Rank {
            op,
            expected: 5,
            got: shape.to_vec(),
        });
    }
    let rest: usize = shape[2..].iter().product();
    if rest == 0 || shape[0] == 0 || shape[1] == 0 {
        return Err(invalid(op, format!("empty tensor {shape:?}")));
    }
    Ok((shape[0], shape[1], rest))
}

/// Per-timestep, per-sample mean over `(C, H, W)`: `[T, N, ...] -> [T, N]`.
pub fn temporal_descriptor<F: Scalar>(o: &Tensor<F>) -> Result<Tensor<F>> {
    let (t, n, rest) = temporal_dims(o.shape(), "temporal_descriptor")?;
    let inv = F::one() / F::c(rest as f64);
    let out = o.data().chunks(rest).map(|c| c.iter().copied().sum::<F>() * inv).collect();
    Tensor::new(vec![t, n], out)
}

pub fn temporal_descriptor_backward<F: Scalar>(o_shape: &[usize], gy: &Tensor<F>) -> Tensor<F> {
    let rest: usize = o_shape[2..].iter().product();
    let inv = F::one() / F::c(rest as f64);
    let mut gx = Vec::with_capacity(gy.len() * rest);
    for &g in gy.data() {
        gx.extend(std::iter::repeat_n(g * inv, rest));
    }
    Tensor::new(o_shape.to_vec(), gx).expect("descriptor grad shape")
}

/// `W [T2, T1] x avg [T1, N] -> [T2, N]`.
pub fn time_mix<F: Scalar>(w: &Tensor<F>, avg: &Tensor<F>) -> Result<Tensor<F>> {
    let [t2, t1] = w.dims::<2>("temporal_score weight")?;
    let [at1, n] = avg.dims::<2>("temporal_score descriptor")?;
    if t1 != at1 {
        return Err(Error::ShapeMismatch {
            op: "temporal_score W vs descriptor",
            left: w.shape().to_vec(),
            right: avg.shape().to_vec(),
        });
    }
    let mut out = vec![F::zero(); t2 * n];
    F::gemm_raw(
        F::one(),
        w.data(),
        MatRef::row_major(t2, t1),
        avg.data(),
        MatRef::row_major(t1, n),
        F::zero(),
        &mut out,
        MatRef::row_major(t2, n),
    );
    Tensor::new(vec![t2, n], out)
}

pub fn time_mix_backward<F: Scalar>(w: &Tensor<F>, avg: &Tensor<F>, gy: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    let (t2, t1, n) = (w.shape()[0], w.shape()[1], avg.shape()[1]);
    let mut gw = vec![F::zero(); t2 * t1];
    F::gemm_raw(
        F::one(),
        gy.data(),
        MatRef::row_major(t2, n),
        avg.data(),
        MatRef::transposed(n, t1),
        F::zero(),
        &mut gw,
        MatRef::row_major(t2, t1),
    );
    let mut ga = vec![F::zero(); t1 * n];
    F::gemm_raw(
        F::one(),
        w.data(),
        MatRef::transposed(t1, t2),
        gy.data(),
        MatRef::row_major(t2, n),
        F::zero(),
        &mut ga,
        MatRef::row_major(t1, n),
    );
    (
        Tensor::new(vec![t2, t1], gw).expect("gw"),
        Tensor::new(vec![t1, n], ga).expect("ga"),
    )
}

/// Sum of `o` over time, per sample: `[T1, N, ...] -> [N, ...]`.
fn total_over_time<F: Scalar>(o: &Tensor<F>) -> Vec<F> {
    let stride = o.outer_stride();
    let mut total = vec![F::zero(); stride];
    for t in 0..o.shape()[0] {
        for (a, &v) in total.iter_mut().zip(o.outer(t)) {
            *a += v;
        }
    }
    total
}

/// `I2[t] = (sum_t' O1[t']) * d[t]`, broadcasting `d [T2, N]` over `(C, H, W)`.
pub fn reassign<F: Scalar>(o: &Tensor<F>, d: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, n, rest) = temporal_dims(o.shape(), "reassign")?;
    let [t2, dn] = d.dims::<2>("reassign scores")?;
    if dn != n {
        return Err(Error::ShapeMismatch {
            op: "reassign batch (O1 vs scores)",
            left: o.shape().to_vec(),
            right: d.shape().to_vec(),
        });
    }
    let total = total_over_time(o);
    let mut out = Vec::with_capacity(t2 * n * rest);
    for t in 0..t2 {
        for s in 0..n {
            let dv = d.data()[t * n + s];
            out.extend(total[s * rest..(s + 1) * rest].iter().map(|&v| v * dv));
        }
    }
    let mut shape = o.shape().to_vec();
    shape[0] = t2;
    Tensor::new(shape, out)
}

pub fn reassign_backward<F: Scalar>(o: &Tensor<F>, d: &Tensor<F>, gy: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    let (t1, n) = (o.shape()[0], o.shape()[1]);
    let t2 = d.shape()[0];
    let rest = o.outer_stride() / n;
    let total = total_over_time(o);
    let gyd = gy.data();
    let mut g_total = vec![F::zero(); n * rest];
    let mut gd = vec![F::zero(); t2 * n];
    for t in 0..t2 {
        for s in 0..n {
            let dv = d.data()[t * n + s];
            let gslice = &gyd[(t * n + s) * rest..(t * n + s + 1) * rest];
            let tslice = &total[s * rest..(s + 1) * rest];
            let mut acc = F::zero();
            for ((gt, &g), &tv) in g_total[s * rest..(s + 1) * rest].iter_mut().zip(gslice).zip(tslice) {
                *gt += g * dv;
                acc += g * tv;
            }
            gd[t * n + s] = acc;
        }
    }
    let mut go = Vec::with_capacity(o.len());
    for _ in 0..t1 {
        go.extend_from_slice(&g_total);
    }
    (
        Tensor::new(o.shape().to_vec(), go).expect("go"),
        Tensor::new(d.shape().to_vec(), gd).expect("gd"),
    )
}
