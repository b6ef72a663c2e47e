//! Raw forward/backward kernels on plain tensors. The graph layer in
//! `autodiff` wires these into the tape.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn dims5<S: Scalar>(x: &Tensor<S>, what: &str) -> Result<[usize; 5]> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("{what} expects rank 5, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// Output extent of a strided window sweep over a padded axis.
pub fn out_extent(axis: usize, n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim(axis, "stride must be >= 1"));
    }
    if k == 0 || n + 2 * pad < k {
        return Err(Error::dim(
            axis,
            format!("kernel {k} does not fit padded extent {}", n + 2 * pad),
        ));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*s + d - p < n`.
#[inline]
fn valid_range(n: usize, out: usize, d: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > d { (p - d).div_ceil(s) } else { 0 };
    if n + p <= d {
        return (0, 0);
    }
    let hi = ((n - 1 + p - d) / s + 1).min(out);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn unit() -> Self {
        Self {
            stride: [1; 3],
            pad: [0; 3],
        }
    }
}

struct ConvDims {
    b: usize,
    ci: usize,
    co: usize,
    inp: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
}

fn conv_dims<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: ConvGeom) -> Result<ConvDims> {
    let [b, ci, t, h, wd] = dims5(x, "conv3d input")?;
    let [co, wci, kt, kh, kw] = dims5(w, "conv3d weight")?;
    if wci != ci {
        return Err(Error::dim(1, format!("input has {ci} channels, weight expects {wci}")));
    }
    let inp = [t, h, wd];
    let k = [kt, kh, kw];
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = out_extent(a + 2, inp[a], k[a], g.stride[a], g.pad[a])?;
    }
    Ok(ConvDims {
        b,
        ci,
        co,
        inp,
        k,
        out,
    })
}

/// Cross-correlation over `[B, C_in, T, H, W]` with `[C_out, C_in, kt, kh, kw]`.
pub fn conv3d_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: ConvGeom) -> Result<Tensor<S>> {
    let d = conv_dims(x, w, g)?;
    let [t, h, wd] = d.inp;
    let [kt, kh, kw] = d.k;
    let [ot, oh, ow] = d.out;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let plane_in = t * h * wd;
    let plane_out = ot * oh * ow;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![S::zero(); d.b * d.co * plane_out];
    out.par_chunks_mut(plane_out.max(1))
        .enumerate()
        .for_each(|(idx, o)| {
            let bi = idx / d.co;
            let c = idx % d.co;
            for c_in in 0..d.ci {
                let xin = &xd[(bi * d.ci + c_in) * plane_in..][..plane_in];
                for dt in 0..kt {
                    let (tlo, thi) = valid_range(t, ot, dt, st, pt);
                    for dh in 0..kh {
                        let (hlo, hhi) = valid_range(h, oh, dh, sh, ph);
                        for dw in 0..kw {
                            let wv = wdat[(((c * d.ci + c_in) * kt + dt) * kh + dh) * kw + dw];
                            let (wlo, whi) = valid_range(wd, ow, dw, sw, pw);
                            for o_t in tlo..thi {
                                let it = o_t * st + dt - pt;
                                for o_h in hlo..hhi {
                                    let ih = o_h * sh + dh - ph;
                                    let orow = &mut o[(o_t * oh + o_h) * ow..][..ow];
                                    let irow = &xin[(it * h + ih) * wd..][..wd];
                                    if sw == 1 {
                                        let shift = dw as isize - pw as isize;
                                        for o_w in wlo..whi {
                                            orow[o_w] += wv * irow[(o_w as isize + shift) as usize];
                                        }
                                    } else {
                                        for o_w in wlo..whi {
                                            orow[o_w] += wv * irow[o_w * sw + dw - pw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(&[d.b, d.co, ot, oh, ow], out)
}

/// Gradients of `conv3d_forward` with respect to input and weight.
pub fn conv3d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: ConvGeom,
    grad_out: &Tensor<S>,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<S>>, Option<Tensor<S>>)> {
    let d = conv_dims(x, w, g)?;
    let [t, h, wd] = d.inp;
    let [kt, kh, kw] = d.k;
    let [ot, oh, ow] = d.out;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let plane_in = t * h * wd;
    let plane_out = ot * oh * ow;
    let xd = x.data();
    let wdat = w.data();
    let go = grad_out.data();

    let gx = if need_x {
        let mut gx = vec![S::zero(); d.b * d.ci * plane_in];
        gx.par_chunks_mut(plane_in.max(1))
            .enumerate()
            .for_each(|(idx, gi)| {
                let bi = idx / d.ci;
                let c_in = idx % d.ci;
                for c in 0..d.co {
                    let gop = &go[(bi * d.co + c) * plane_out..][..plane_out];
                    for dt in 0..kt {
                        let (tlo, thi) = valid_range(t, ot, dt, st, pt);
                        for dh in 0..kh {
                            let (hlo, hhi) = valid_range(h, oh, dh, sh, ph);
                            for dw in 0..kw {
                                let wv =
                                    wdat[(((c * d.ci + c_in) * kt + dt) * kh + dh) * kw + dw];
                                let (wlo, whi) = valid_range(wd, ow, dw, sw, pw);
                                for o_t in tlo..thi {
                                    let it = o_t * st + dt - pt;
                                    for o_h in hlo..hhi {
                                        let ih = o_h * sh + dh - ph;
                                        let grow = &gop[(o_t * oh + o_h) * ow..][..ow];
                                        let irow = &mut gi[(it * h + ih) * wd..][..wd];
                                        for o_w in wlo..whi {
                                            irow[o_w * sw + dw - pw] += wv * grow[o_w];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Some(Tensor::new(x.shape(), gx)?)
    } else {
        None
    };

    let gw = if need_w {
        let per_co = d.ci * kt * kh * kw;
        let mut gw = vec![S::zero(); d.co * per_co];
        gw.par_chunks_mut(per_co.max(1))
            .enumerate()
            .for_each(|(c, gwc)| {
                for c_in in 0..d.ci {
                    for dt in 0..kt {
                        let (tlo, thi) = valid_range(t, ot, dt, st, pt);
                        for dh in 0..kh {
                            let (hlo, hhi) = valid_range(h, oh, dh, sh, ph);
                            for dw in 0..kw {
                                let (wlo, whi) = valid_range(wd, ow, dw, sw, pw);
                                let mut acc = 0f64;
                                for bi in 0..d.b {
                                    let gop = &go[(bi * d.co + c) * plane_out..][..plane_out];
                                    let xin = &xd[(bi * d.ci + c_in) * plane_in..][..plane_in];
                                    for o_t in tlo..thi {
                                        let it = o_t * st + dt - pt;
                                        for o_h in hlo..hhi {
                                            let ih = o_h * sh + dh - ph;
                                            let grow = &gop[(o_t * oh + o_h) * ow..][..ow];
                                            let irow = &xin[(it * h + ih) * wd..][..wd];
                                            let mut row = S::zero();
                                            for o_w in wlo..whi {
                                                row += grow[o_w] * irow[o_w * sw + dw - pw];
                                            }
                                            acc += row.as_f64();
                                        }
                                    }
                                }
                                gwc[((c_in * kt + dt) * kh + dh) * kw + dw] = S::of(acc);
                            }
                        }
                    }
                }
            });
        Some(Tensor::new(w.shape(), gw)?)
    } else {
        None
    };
    Ok((gx, gw))
}

/// Max pooling without padding. Returns the output and, per output cell,
/// the linear input index of the first maximum.
pub fn maxpool3d_forward<S: Scalar>(
    x: &Tensor<S>,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<(Tensor<S>, Vec<usize>)> {
    let [b, c, t, h, wd] = dims5(x, "maxpool3d input")?;
    let inp = [t, h, wd];
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = out_extent(a + 2, inp[a], window[a], stride[a], 0)?;
    }
    let [ot, oh, ow] = out;
    let plane_in = t * h * wd;
    let plane_out = ot * oh * ow;
    let xd = x.data();
    let mut vals = vec![S::zero(); b * c * plane_out];
    let mut arg = vec![0usize; b * c * plane_out];
    vals.par_chunks_mut(plane_out.max(1))
        .zip(arg.par_chunks_mut(plane_out.max(1)))
        .enumerate()
        .for_each(|(pi, (v, a))| {
            let base = pi * plane_in;
            for o_t in 0..ot {
                for o_h in 0..oh {
                    for o_w in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_i = usize::MAX;
                        for dt in 0..window[0] {
                            for dh in 0..window[1] {
                                for dw in 0..window[2] {
                                    let i = ((o_t * stride[0] + dt) * h + o_h * stride[1] + dh)
                                        * wd
                                        + o_w * stride[2]
                                        + dw;
                                    let xv = xd[base + i];
                                    if best_i == usize::MAX || xv > best {
                                        best = xv;
                                        best_i = base + i;
                                    }
                                }
                            }
                        }
                        let oi = (o_t * oh + o_h) * ow + o_w;
                        v[oi] = best;
                        a[oi] = best_i;
                    }
                }
            }
        });
    Ok((Tensor::new(&[b, c, ot, oh, ow], vals)?, arg))
}

pub fn maxpool3d_backward<S: Scalar>(
    in_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut gx = Tensor::zeros(in_shape);
    let gd = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gd[i] += g;
    }
    Ok(gx)
}

/// Per-channel running statistics; `None` until the first train-mode call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub mean: Option<Vec<f64>>,
    pub var: Option<Vec<f64>>,
}

impl RunningStats {
    pub fn is_initialized(&self) -> bool {
        self.mean.is_some() && self.var.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Saved forward state needed for the backward pass.
pub struct BnSaved<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}

fn channel_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(axis, "channel axis out of range"));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn batchnorm_forward<S: Scalar>(
    x: &Tensor<S>,
    axis: usize,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    stats: &mut RunningStats,
    mode: BnMode,
) -> Result<(Tensor<S>, BnSaved<S>)> {
    let (outer, ch, inner) = channel_layout(x.shape(), axis)?;
    if gamma.numel() != ch || beta.numel() != ch {
        return Err(Error::dim(
            axis,
            format!("batchnorm affine params have {} / {} entries for {ch} channels", gamma.numel(), beta.numel()),
        ));
    }
    let m = outer * inner;
    let xd = x.data();
    let (mean, var) = match mode {
        BnMode::Train => {
            if m == 0 {
                return Err(Error::arg("batchnorm over empty batch"));
            }
            let mut mean = vec![0f64; ch];
            let mut var = vec![0f64; ch];
            for o in 0..outer {
                for c in 0..ch {
                    let row = &xd[(o * ch + c) * inner..][..inner];
                    mean[c] += row.iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            for mu in &mut mean {
                *mu /= m as f64;
            }
            for o in 0..outer {
                for c in 0..ch {
                    let row = &xd[(o * ch + c) * inner..][..inner];
                    var[c] += row
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean[c];
                            d * d
                        })
                        .sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m as f64;
            }
            // running variance tracks the unbiased estimate
            let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let rm = stats.mean.get_or_insert_with(|| vec![0.0; ch]);
            for (r, &mu) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * mu;
            }
            let rv = stats.var.get_or_insert_with(|| vec![1.0; ch]);
            for (r, &v) in rv.iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
            (mean, var)
        }
        BnMode::Eval => {
            let (Some(rm), Some(rv)) = (&stats.mean, &stats.var) else {
                return Err(Error::UninitializedStats);
            };
            if rm.len() != ch || rv.len() != ch {
                return Err(Error::dim(axis, "running stats do not match channel count"));
            }
            (rm.clone(), rv.clone())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![S::zero(); xd.len()];
    let mut y = vec![S::zero(); xd.len()];
    let gd = gamma.data();
    let bd = beta.data();
    for o in 0..outer {
        for c in 0..ch {
            let off = (o * ch + c) * inner;
            let mu = mean[c];
            let is = inv_std[c];
            let gm = gd[c];
            let bt = bd[c];
            for i in off..off + inner {
                let xh = S::of((xd[i].as_f64() - mu) * is);
                xhat[i] = xh;
                y[i] = gm * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        BnSaved {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
            mode,
        },
    ))
}

/// Returns (grad_x, grad_gamma, grad_beta).
pub fn batchnorm_backward<S: Scalar>(
    axis: usize,
    gamma: &Tensor<S>,
    saved: &BnSaved<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let shape = saved.xhat.shape();
    let (outer, ch, inner) = channel_layout(shape, axis)?;
    let m = (outer * inner) as f64;
    let gy = grad_out.data();
    let xh = saved.xhat.data();
    let mut sum_dy = vec![0f64; ch];
    let mut sum_dy_xh = vec![0f64; ch];
    for o in 0..outer {
        for c in 0..ch {
            let off = (o * ch + c) * inner;
            for i in off..off + inner {
                let g = gy[i].as_f64();
                sum_dy[c] += g;
                sum_dy_xh[c] += g * xh[i].as_f64();
            }
        }
    }
    let gd = gamma.data();
    let mut gx = vec![S::zero(); gy.len()];
    for o in 0..outer {
        for c in 0..ch {
            let off = (o * ch + c) * inner;
            let gm = gd[c].as_f64();
            let is = saved.inv_std[c];
            for i in off..off + inner {
                let g = gy[i].as_f64();
                gx[i] = S::of(match saved.mode {
                    BnMode::Train => {
                        gm * is / m * (m * g - sum_dy[c] - xh[i].as_f64() * sum_dy_xh[c])
                    }
                    BnMode::Eval => gm * is * g,
                });
            }
        }
    }
    Ok((
        Tensor::new(shape, gx)?,
        Tensor::new(gamma.shape(), sum_dy_xh.into_iter().map(S::of).collect())?,
        Tensor::new(gamma.shape(), sum_dy.into_iter().map(S::of).collect())?,
    ))
}

/// Nearest-neighbour replication along `axis`.
pub fn repeat_axis<S: Scalar>(x: &Tensor<S>, axis: usize, factor: usize) -> Result<Tensor<S>> {
    if factor == 0 {
        return Err(Error::arg("upsampling factor must be >= 1"));
    }
    let (outer, n, inner) = channel_layout(x.shape(), axis)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len() * factor);
    for o in 0..outer {
        for i in 0..n {
            let row = &xd[(o * n + i) * inner..][..inner];
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] *= factor;
    Tensor::new(&shape, out)
}

/// Adjoint of `repeat_axis`: sums each group of `factor` consecutive slices.
pub fn repeat_axis_backward<S: Scalar>(
    grad: &Tensor<S>,
    axis: usize,
    factor: usize,
) -> Result<Tensor<S>> {
    let (outer, nf, inner) = channel_layout(grad.shape(), axis)?;
    let n = nf / factor;
    let gd = grad.data();
    let mut out = vec![S::zero(); outer * n * inner];
    for o in 0..outer {
        for i in 0..n {
            let dst = &mut out[(o * n + i) * inner..][..inner];
            for f in 0..factor {
                let src = &gd[(o * nf + i * factor + f) * inner..][..inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    let mut shape = grad.shape().to_vec();
    shape[axis] = n;
    Tensor::new(&shape, out)
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![S::zero(); m * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..][..n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor::new(&[m, n], out)
}

pub fn transpose2<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    a.permute(&[1, 0])
}
