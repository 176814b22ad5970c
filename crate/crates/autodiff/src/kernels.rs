//! Forward and backward kernels operating directly on tensors.
//!
//! Convolutions transpose their operands to channels-last scratch buffers so
//! the innermost loops are contiguous `axpy` updates. Work is split across the
//! batch with rayon; every output element is written by exactly one task and
//! every cross-sample reduction runs in a fixed order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::{Scalar, Tensor};

/// Stride / padding / output padding of a transposed convolution, per `(height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposeSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
}

impl ConvTransposeSpec {
    pub fn unit() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            output_padding: (0, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (sh, sw) = self.stride;
        let (oh, ow) = self.output_padding;
        if sh == 0 || sw == 0 {
            return Err(shape_err("conv_transpose2d", "stride must be positive"));
        }
        if oh >= sh || ow >= sw {
            return Err(shape_err(
                "conv_transpose2d",
                format!(
                    "output_padding {:?} must be smaller than stride {:?}",
                    self.output_padding, self.stride
                ),
            ));
        }
        Ok(())
    }

    /// `(in − 1)·stride + kernel − 2·padding + output_padding` per dimension.
    pub fn output_size(&self, input: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
        let dim = |i: usize, k: usize, s: usize, p: usize, op: usize, name: &str| {
            let full = (i - 1) * s + k + op;
            if 2 * p >= full {
                Err(shape_err(
                    "conv_transpose2d",
                    format!("padding {p} leaves no output along {name} (input {i}, kernel {k})"),
                ))
            } else {
                Ok(full - 2 * p)
            }
        };
        Ok((
            dim(
                input.0,
                kernel.0,
                self.stride.0,
                self.padding.0,
                self.output_padding.0,
                "height",
            )?,
            dim(
                input.1,
                kernel.1,
                self.stride.1,
                self.padding.1,
                self.output_padding.1,
                "width",
            )?,
        ))
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// NCHW sample → HWC.
fn to_hwc<T: Scalar>(src: &[T], c: usize, hw: usize, dst: &mut [T]) {
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for (p, &v) in plane.iter().enumerate() {
            dst[p * c + ci] = v;
        }
    }
}

/// HWC → NCHW sample.
fn from_hwc<T: Scalar>(src: &[T], c: usize, hw: usize, dst: &mut [T]) {
    for p in 0..hw {
        for ci in 0..c {
            dst[ci * hw + p] = src[p * c + ci];
        }
    }
}

fn check_conv_weight<T: Scalar>(
    op: &'static str,
    weight: &Tensor<T>,
    in_channels: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (wi, wo, kh, kw) = weight.dims4(op)?;
    if wi != in_channels {
        return Err(shape_err(
            op,
            format!(
                "input has {in_channels} channels but weight expects {wi} (weight shape {:?})",
                weight.shape()
            ),
        ));
    }
    Ok((wi, wo, kh, kw))
}

fn check_bias<T: Scalar>(op: &'static str, bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(shape_err(
            op,
            format!(
                "bias shape {:?} does not match {channels} output channels",
                bias.shape()
            ),
        ));
    }
    Ok(())
}

/// Output tap position `i·stride + k − padding`, if it lands inside `0..limit`.
#[inline]
fn tap(i: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let pos = i * stride + k;
    if pos < pad || pos - pad >= limit {
        None
    } else {
        Some(pos - pad)
    }
}

/// Transposed convolution. `x`: `(N, Cin, H, W)`, `weight`: `(Cin, Cout, kh, kw)`, `bias`: `(Cout)`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvTransposeSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    spec.validate()?;
    let (n, cin, h, w) = x.dims4(OP)?;
    let (_, cout, kh, kw) = check_conv_weight(OP, weight, cin)?;
    check_bias(OP, bias, cout)?;
    let (ho, wo) = spec.output_size((h, w), (kh, kw))?;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;

    // [kh][kw][cin][cout]
    let mut wt = vec![T::zero(); weight.len()];
    let wd = weight.data();
    for ci in 0..cin {
        for co in 0..cout {
            for ki in 0..kh {
                for kj in 0..kw {
                    wt[((ki * kw + kj) * cin + ci) * cout + co] = wd[((ci * cout + co) * kh + ki) * kw + kj];
                }
            }
        }
    }

    let in_len = cin * h * w;
    let out_len = cout * ho * wo;
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(s, out_s)| {
        let mut xt = vec![T::zero(); in_len];
        to_hwc(&x.data()[s * in_len..(s + 1) * in_len], cin, h * w, &mut xt);
        let mut ot = vec![T::zero(); out_len];
        for i in 0..h {
            for j in 0..w {
                let xp = &xt[(i * w + j) * cin..(i * w + j + 1) * cin];
                for ki in 0..kh {
                    let Some(oi) = tap(i, ki, sh, ph, ho) else { continue };
                    for kj in 0..kw {
                        let Some(oj) = tap(j, kj, sw, pw, wo) else { continue };
                        let op = &mut ot[(oi * wo + oj) * cout..(oi * wo + oj + 1) * cout];
                        let wbase = (ki * kw + kj) * cin * cout;
                        for (ci, &a) in xp.iter().enumerate() {
                            if a != T::zero() {
                                axpy(op, a, &wt[wbase + ci * cout..wbase + (ci + 1) * cout]);
                            }
                        }
                    }
                }
            }
        }
        from_hwc(&ot, cout, ho * wo, out_s);
        for co in 0..cout {
            let b = bias.data()[co];
            for v in &mut out_s[co * ho * wo..(co + 1) * ho * wo] {
                *v += b;
            }
        }
    });
    Tensor::from_vec(&[n, cout, ho, wo], out)
}

/// Strided cross-correlation with a `(O, C, kh, kw)` weight, producing an
/// `out_size` map: `out[n,o,i,j] = Σ y[n,c,i·s+ki−p, j·s+kj−p] · w[o,c,ki,kj]`.
///
/// With the weight of a transposed convolution this is its exact adjoint, which
/// is how the transposed convolution's input gradient is computed.
pub fn conv2d<T: Scalar>(
    y: &Tensor<T>,
    weight: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    out_size: (usize, usize),
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    let (n, c, hy, wy) = y.dims4(OP)?;
    let (o, wc, kh, kw) = weight.dims4(OP)?;
    if wc != c {
        return Err(shape_err(
            OP,
            format!(
                "input has {c} channels but weight expects {wc} (weight shape {:?})",
                weight.shape()
            ),
        ));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(shape_err(OP, "stride must be positive"));
    }
    let (h, w) = out_size;
    // [kh][kw][c][o]
    let mut wt = vec![T::zero(); weight.len()];
    let wd = weight.data();
    for oi in 0..o {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    wt[((ki * kw + kj) * c + ci) * o + oi] = wd[((oi * c + ci) * kh + ki) * kw + kj];
                }
            }
        }
    }
    let in_len = c * hy * wy;
    let out_len = o * h * w;
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(s, out_s)| {
        let mut yt = vec![T::zero(); in_len];
        to_hwc(&y.data()[s * in_len..(s + 1) * in_len], c, hy * wy, &mut yt);
        let mut ot = vec![T::zero(); out_len];
        for i in 0..h {
            for j in 0..w {
                let op = &mut ot[(i * w + j) * o..(i * w + j + 1) * o];
                for ki in 0..kh {
                    let Some(yi) = tap(i, ki, stride.0, padding.0, hy) else {
                        continue;
                    };
                    for kj in 0..kw {
                        let Some(yj) = tap(j, kj, stride.1, padding.1, wy) else {
                            continue;
                        };
                        let yp = &yt[(yi * wy + yj) * c..(yi * wy + yj + 1) * c];
                        let wbase = (ki * kw + kj) * c * o;
                        for (ci, &a) in yp.iter().enumerate() {
                            if a != T::zero() {
                                axpy(op, a, &wt[wbase + ci * o..wbase + (ci + 1) * o]);
                            }
                        }
                    }
                }
            }
        }
        from_hwc(&ot, o, h * w, out_s);
    });
    Tensor::from_vec(&[n, o, h, w], out)
}

/// Gradients of [`conv_transpose2d`] with respect to `(x, weight, bias)`.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvTransposeSpec,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    const OP: &str = "conv_transpose2d_backward";
    let (n, cin, h, w) = x.dims4(OP)?;
    let (_, cout, kh, kw) = check_conv_weight(OP, weight, cin)?;
    let (_, dc, ho, wo) = dout.dims4(OP)?;
    if dc != cout {
        return Err(shape_err(OP, "output gradient channel mismatch"));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;

    let dx = conv2d(dout, weight, spec.stride, spec.padding, (h, w))?;

    let mut db = vec![T::zero(); cout];
    for s in 0..n {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = (s * cout + co) * ho * wo;
            *acc += dout.data()[base..base + ho * wo].iter().copied().sum::<T>();
        }
    }

    let in_len = cin * h * w;
    let out_len = cout * ho * wo;
    let mut xts = vec![T::zero(); n * in_len];
    xts.par_chunks_mut(in_len)
        .enumerate()
        .for_each(|(s, dst)| to_hwc(&x.data()[s * in_len..(s + 1) * in_len], cin, h * w, dst));
    let mut dts = vec![T::zero(); n * out_len];
    dts.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(s, dst)| to_hwc(&dout.data()[s * out_len..(s + 1) * out_len], cout, ho * wo, dst));

    // One task per kernel tap; each owns its [cin][cout] slab of the weight gradient.
    let mut dwt = vec![T::zero(); kh * kw * cin * cout];
    dwt.par_chunks_mut(cin * cout).enumerate().for_each(|(t, slab)| {
        let (ki, kj) = (t / kw, t % kw);
        for s in 0..n {
            let xt = &xts[s * in_len..(s + 1) * in_len];
            let dt = &dts[s * out_len..(s + 1) * out_len];
            for i in 0..h {
                let Some(oi) = tap(i, ki, sh, ph, ho) else { continue };
                for j in 0..w {
                    let Some(oj) = tap(j, kj, sw, pw, wo) else { continue };
                    let xp = &xt[(i * w + j) * cin..(i * w + j + 1) * cin];
                    let gp = &dt[(oi * wo + oj) * cout..(oi * wo + oj + 1) * cout];
                    for (ci, &a) in xp.iter().enumerate() {
                        if a != T::zero() {
                            axpy(&mut slab[ci * cout..(ci + 1) * cout], a, gp);
                        }
                    }
                }
            }
        }
    });
    let mut dw = vec![T::zero(); weight.len()];
    for ci in 0..cin {
        for co in 0..cout {
            for ki in 0..kh {
                for kj in 0..kw {
                    dw[((ci * cout + co) * kh + ki) * kw + kj] = dwt[((ki * kw + kj) * cin + ci) * cout + co];
                }
            }
        }
    }
    Ok((
        dx,
        Tensor::from_vec(weight.shape(), dw)?,
        Tensor::from_vec(&[cout], db)?,
    ))
}

/// Per-pixel channel mixing. `x`: `(N, Cin, H, W)`, `weight`: `(Cout, Cin)`, `bias`: `(Cout)`.
pub fn conv2d_1x1<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_1x1";
    let (n, cin, h, w) = x.dims4(OP)?;
    let (cout, wc) = match *weight.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(shape_err(
                OP,
                format!("weight must be (Cout, Cin), got {:?}", weight.shape()),
            ))
        }
    };
    if wc != cin {
        return Err(shape_err(
            OP,
            format!("input has {cin} channels but weight expects {wc}"),
        ));
    }
    check_bias(OP, bias, cout)?;
    let hw = h * w;
    let mut out = vec![T::zero(); n * cout * hw];
    out.par_chunks_mut(cout * hw).enumerate().for_each(|(s, out_s)| {
        let xs = &x.data()[s * cin * hw..(s + 1) * cin * hw];
        for co in 0..cout {
            let plane = &mut out_s[co * hw..(co + 1) * hw];
            plane.fill(bias.data()[co]);
            for ci in 0..cin {
                let a = weight.data()[co * cin + ci];
                axpy(plane, a, &xs[ci * hw..(ci + 1) * hw]);
            }
        }
    });
    Tensor::from_vec(&[n, cout, h, w], out)
}

pub fn conv2d_1x1_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, cin, h, w) = x.dims4("conv2d_1x1_backward")?;
    let cout = weight.shape()[0];
    let hw = h * w;
    let mut dx = vec![T::zero(); n * cin * hw];
    dx.par_chunks_mut(cin * hw).enumerate().for_each(|(s, dx_s)| {
        let gs = &dout.data()[s * cout * hw..(s + 1) * cout * hw];
        for ci in 0..cin {
            let plane = &mut dx_s[ci * hw..(ci + 1) * hw];
            for co in 0..cout {
                axpy(plane, weight.data()[co * cin + ci], &gs[co * hw..(co + 1) * hw]);
            }
        }
    });
    let mut dw = vec![T::zero(); cout * cin];
    let mut db = vec![T::zero(); cout];
    for s in 0..n {
        let xs = &x.data()[s * cin * hw..(s + 1) * cin * hw];
        let gs = &dout.data()[s * cout * hw..(s + 1) * cout * hw];
        for co in 0..cout {
            let g = &gs[co * hw..(co + 1) * hw];
            db[co] += g.iter().copied().sum::<T>();
            for ci in 0..cin {
                let xp = &xs[ci * hw..(ci + 1) * hw];
                dw[co * cin + ci] += g.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[cout, cin], dw)?,
        Tensor::from_vec(&[cout], db)?,
    ))
}

/// Per-channel batch statistics from a train-mode batch-norm pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divides by the count); used for normalization.
    pub var: Vec<T>,
    /// Unbiased variance; folded into the running estimate.
    pub var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchStats<T> {
    /// Exponential moving average update of running statistics.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let keep = T::one() - momentum;
        for c in 0..self.mean.len() {
            running_mean[c] = keep * running_mean[c] + momentum * self.mean[c];
            running_var[c] = keep * running_var[c] + momentum * self.var_unbiased[c];
        }
    }
}

pub(crate) fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<BatchStats<T>> {
    let (n, c, h, w) = x.dims4("batch_norm2d")?;
    let hw = h * w;
    let count = n * hw;
    if count <= 1 {
        return Err(Error::DegenerateBatch { count });
    }
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let inv = T::one() / T::of(count as f64);
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .copied()
                .sum::<T>();
        }
        let m = s * inv;
        let mut q = T::zero();
        for b in 0..n {
            q += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = q * inv;
    }
    let corr = T::of(count as f64 / (count as f64 - 1.0));
    let var_unbiased = var.iter().map(|&v| v * corr).collect();
    Ok(BatchStats {
        mean,
        var,
        var_unbiased,
    })
}

/// `y = gamma·(x − mean)·inv_std + beta`, per channel.
pub(crate) fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("batch_norm2d")?;
    let hw = h * w;
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for v in &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Nearest-neighbour resize: output `(r, c)` reads input `(⌊r·H/Ho⌋, ⌊c·W/Wo⌋)`.
pub fn nearest_upsample<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("nearest_upsample")?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err("nearest_upsample", "output size must be positive"));
    }
    let rows: Vec<usize> = (0..out_h).map(|r| r * h / out_h).collect();
    let cols: Vec<usize> = (0..out_w).map(|q| q * w / out_w).collect();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &r in &rows {
            out.extend(cols.iter().map(|&q| plane[r * w + q]));
        }
    }
    Tensor::from_vec(&[n, c, out_h, out_w], out)
}

pub(crate) fn nearest_upsample_backward<T: Scalar>(in_shape: &[usize], dout: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (_, _, out_h, out_w) = dout.dims4("nearest_upsample_backward")?;
    let mut dx = Tensor::zeros(in_shape);
    for (plane, g) in dx.data_mut().chunks_mut(h * w).zip(dout.data().chunks(out_h * out_w)) {
        for r in 0..out_h {
            let ir = r * h / out_h;
            for q in 0..out_w {
                plane[ir * w + q * w / out_w] += g[r * out_w + q];
            }
        }
    }
    Ok(dx)
}
