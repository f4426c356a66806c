//! Neural-network kernels on [`Tensor`]: convolution, batch normalization,
//! linear maps, bilinear sampling/upsampling, small spatial filters.
//!
//! Kernels are plain loops; the convolution forward/backward parallelize
//! over disjoint output planes with rayon, which keeps results
//! bit-deterministic (each element is accumulated in a fixed order).

use rayon::prelude::*;

use super::{accum, Element, Tensor};
use crate::error::{Error, Result};

/// 2-D convolution, NCHW input against OIKhKw weight.
pub fn conv2d<S: Element>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 4 || wshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects NCHW and OIKhKw, got {ishape:?} and {wshape:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (o, i, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if c != i {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels, weight expects {i}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?}, expected [{o}]",
                b.shape()
            )));
        }
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    let x = input.values();
    let wv = weight.values();
    let bv: Option<Vec<S>> = bias.map(|b| b.values().to_vec());

    let mut out = vec![S::zero(); n * o * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, chunk)| {
        let ni = plane / o;
        let oi = plane % o;
        let b0 = bv.as_ref().map(|b| b[oi]).unwrap_or_else(S::zero);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b0;
                for ci in 0..c {
                    let xbase = (ni * c + ci) * h * w;
                    let wbase = ((oi * c + ci) * kh) * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc
                                + x[xbase + iy as usize * w + ix as usize]
                                    * wv[wbase + ky * kw + kx];
                        }
                    }
                }
                chunk[oy * ow + ox] = acc;
            }
        }
    });

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let inp = input.clone();
    let wt = weight.clone();
    let bs = bias.cloned();
    Ok(Tensor::from_op(vec![n, o, oh, ow], out, parents, move |g| {
        let x = inp.values();
        let wv = wt.values();
        // input gradient: one plane (n, ci) per task
        if inp.requires_grad() {
            let mut dx = vec![S::zero(); x.len()];
            dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, chunk)| {
                let ni = plane / c;
                let ci = plane % c;
                for oi in 0..o {
                    let gbase = (ni * o + oi) * oh * ow;
                    let wbase = ((oi * c + ci) * kh) * kw;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[gbase + oy * ow + ox];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = iy as usize * w + ix as usize;
                                    chunk[idx] = chunk[idx] + gv * wv[wbase + ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            });
            accum(&inp, &dx);
        }
        if wt.requires_grad() {
            let mut dw = vec![S::zero(); wv.len()];
            dw.par_chunks_mut(c * kh * kw).enumerate().for_each(|(oi, chunk)| {
                for ci in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = S::zero();
                            for ni in 0..n {
                                let gbase = (ni * o + oi) * oh * ow;
                                let xbase = (ni * c + ci) * h * w;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc = acc
                                            + g[gbase + oy * ow + ox]
                                                * x[xbase + iy as usize * w + ix as usize];
                                    }
                                }
                            }
                            chunk[(ci * kh + ky) * kw + kx] = acc;
                        }
                    }
                }
            });
            accum(&wt, &dw);
        }
        if let Some(b) = &bs {
            if b.requires_grad() {
                let mut db = vec![S::zero(); o];
                for ni in 0..n {
                    for (oi, dbi) in db.iter_mut().enumerate() {
                        let gbase = (ni * o + oi) * oh * ow;
                        for p in 0..oh * ow {
                            *dbi = *dbi + g[gbase + p];
                        }
                    }
                }
                accum(b, &db);
            }
        }
    }))
}

/// Which statistics batch normalization uses.
pub enum BnMode<'a, S> {
    /// Normalize with batch statistics; returns them for running updates.
    Train,
    /// Normalize with the provided running statistics.
    Eval { mean: &'a [S], var: &'a [S] },
}

/// Per-channel batch normalization over N, H, W of an NCHW tensor.
///
/// In train mode the returned pair is `(batch_mean, batch_var_unbiased)`
/// for the caller's running-statistics update.
pub fn batch_norm2d<S: Element>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
    mode: BnMode<'_, S>,
) -> Result<(Tensor<S>, Option<(Vec<S>, Vec<S>)>)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("batch_norm2d expects NCHW, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batch_norm2d: gamma {:?} / beta {:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("batch_norm2d eps must be positive".into()));
    }
    let m = n * h * w;
    let plane = h * w;
    let x = input.values();
    let gm = gamma.values();
    let bt = beta.values();
    let eps_s = S::fp(eps);

    let (mean, var, stats_out, training) = match mode {
        BnMode::Train => {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ci in 0..c {
                let mut sum = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        sum = sum + x[base + i];
                    }
                }
                let mu = sum / S::fp(m as f64);
                let mut sq = S::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        let d = x[base + i] - mu;
                        sq = sq + d * d;
                    }
                }
                mean[ci] = mu;
                var[ci] = sq / S::fp(m as f64);
            }
            let unbiased: Vec<S> = if m > 1 {
                var.iter().map(|&v| v * S::fp(m as f64 / (m - 1) as f64)).collect()
            } else {
                var.clone()
            };
            (mean.clone(), var.clone(), Some((mean, unbiased)), true)
        }
        BnMode::Eval { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::Shape(format!(
                    "batch_norm2d: running stats length {} for {c} channels",
                    mean.len()
                )));
            }
            (mean.to_vec(), var.to_vec(), None, false)
        }
    };

    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps_s).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let xh = (x[base + i] - mean[ci]) * inv_std[ci];
                xhat[base + i] = xh;
                out[base + i] = gm[ci] * xh + bt[ci];
            }
        }
    }

    let inp = input.clone();
    let ga = gamma.clone();
    let be = beta.clone();
    let out_t = Tensor::from_op(
        shape.to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        move |g| {
            let gm = ga.values();
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        dgamma[ci] = dgamma[ci] + g[base + i] * xhat[base + i];
                        dbeta[ci] = dbeta[ci] + g[base + i];
                    }
                }
            }
            if inp.requires_grad() {
                let mut dx = vec![S::zero(); inp.len()];
                if training {
                    // dL/dx via the batch-statistics chain
                    let minv = S::fp(1.0 / m as f64);
                    for ci in 0..c {
                        let sum_dxhat = dbeta[ci] * gm[ci];
                        let sum_dxhat_xhat = dgamma[ci] * gm[ci];
                        for ni in 0..n {
                            let base = (ni * c + ci) * plane;
                            for i in 0..plane {
                                let dxhat = g[base + i] * gm[ci];
                                dx[base + i] = inv_std[ci]
                                    * (dxhat - minv * sum_dxhat
                                        - xhat[base + i] * minv * sum_dxhat_xhat);
                            }
                        }
                    }
                } else {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for i in 0..plane {
                                dx[base + i] = g[base + i] * gm[ci] * inv_std[ci];
                            }
                        }
                    }
                }
                accum(&inp, &dx);
            }
            accum(&ga, &dgamma);
            accum(&be, &dbeta);
        },
    );
    Ok((out_t, stats_out))
}

/// Affine map `x W^T + b` for input (N, F), weight (G, F), bias (G).
pub fn linear<S: Element>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 2 || wshape.len() != 2 {
        return Err(Error::Shape(format!(
            "linear expects (N,F) and (G,F), got {ishape:?} and {wshape:?}"
        )));
    }
    let (n, f) = (ishape[0], ishape[1]);
    let (g_out, f2) = (wshape[0], wshape[1]);
    if f != f2 {
        return Err(Error::Shape(format!("linear: feature extents {f} vs {f2}")));
    }
    if let Some(b) = bias {
        if b.shape() != [g_out] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?}, expected [{g_out}]",
                b.shape()
            )));
        }
    }
    let x = input.values();
    let wv = weight.values();
    let mut out = vec![S::zero(); n * g_out];
    for ni in 0..n {
        for gi in 0..g_out {
            let mut acc = bias.map(|b| b.values()[gi]).unwrap_or_else(S::zero);
            for fi in 0..f {
                acc = acc + x[ni * f + fi] * wv[gi * f + fi];
            }
            out[ni * g_out + gi] = acc;
        }
    }
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let inp = input.clone();
    let wt = weight.clone();
    let bs = bias.cloned();
    Ok(Tensor::from_op(vec![n, g_out], out, parents, move |g| {
        let x = inp.values();
        let wv = wt.values();
        if inp.requires_grad() {
            let mut dx = vec![S::zero(); x.len()];
            for ni in 0..n {
                for gi in 0..g_out {
                    let gv = g[ni * g_out + gi];
                    for fi in 0..f {
                        dx[ni * f + fi] = dx[ni * f + fi] + gv * wv[gi * f + fi];
                    }
                }
            }
            accum(&inp, &dx);
        }
        if wt.requires_grad() {
            let mut dw = vec![S::zero(); wv.len()];
            for ni in 0..n {
                for gi in 0..g_out {
                    let gv = g[ni * g_out + gi];
                    for fi in 0..f {
                        dw[gi * f + fi] = dw[gi * f + fi] + gv * x[ni * f + fi];
                    }
                }
            }
            accum(&wt, &dw);
        }
        if let Some(b) = &bs {
            if b.requires_grad() {
                let mut db = vec![S::zero(); g_out];
                for ni in 0..n {
                    for (gi, dbi) in db.iter_mut().enumerate() {
                        *dbi = *dbi + g[ni * g_out + gi];
                    }
                }
                accum(b, &db);
            }
        }
    }))
}

/// Bilinear sampling of a (C, H, W) image at pixel-unit coordinates
/// (2, H', W') with channel 0 = x, channel 1 = y. Out-of-bounds
/// coordinates produce zeros; the returned mask flags in-bounds samples.
/// Differentiable w.r.t. both the image and the coordinates.
pub fn bilinear_sample<S: Element>(
    input: &Tensor<S>,
    coords: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<bool>)> {
    let ishape = input.shape();
    let cshape = coords.shape();
    if ishape.len() != 3 || cshape.len() != 3 || cshape[0] != 2 {
        return Err(Error::Shape(format!(
            "bilinear_sample expects (C,H,W) and (2,H',W'), got {ishape:?} and {cshape:?}"
        )));
    }
    coords.check_finite("bilinear_sample coords")?;
    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (oh, ow) = (cshape[1], cshape[2]);
    let np = oh * ow;
    let x = input.values();
    let cv = coords.values();

    let mut mask = vec![false; np];
    let mut out = vec![S::zero(); c * np];
    // per-pixel interpolation stencil: (x0, y0, fx, fy)
    let mut stencil = vec![(0usize, 0usize, S::zero(), S::zero()); np];
    for p in 0..np {
        let px = cv[p].as_f64();
        let py = cv[np + p].as_f64();
        if px < 0.0 || px > (w - 1) as f64 || py < 0.0 || py > (h - 1) as f64 {
            continue;
        }
        mask[p] = true;
        let x0 = (px.floor() as usize).min(w - 1);
        let y0 = (py.floor() as usize).min(h - 1);
        let fx = S::fp(px - x0 as f64);
        let fy = S::fp(py - y0 as f64);
        stencil[p] = (x0, y0, fx, fy);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        for ci in 0..c {
            let base = ci * h * w;
            let v00 = x[base + y0 * w + x0];
            let v01 = x[base + y0 * w + x1];
            let v10 = x[base + y1 * w + x0];
            let v11 = x[base + y1 * w + x1];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            out[ci * np + p] = top + (bot - top) * fy;
        }
    }

    let inp = input.clone();
    let crd = coords.clone();
    let mask_b = mask.clone();
    let out_t = Tensor::from_op(
        vec![c, oh, ow],
        out,
        vec![input.clone(), coords.clone()],
        move |g| {
            let x = inp.values();
            let want_input = inp.requires_grad();
            let want_coords = crd.requires_grad();
            let mut dx = vec![S::zero(); x.len()];
            let mut dc = vec![S::zero(); 2 * np];
            for p in 0..np {
                if !mask_b[p] {
                    continue;
                }
                let (x0, y0, fx, fy) = stencil[p];
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                for ci in 0..c {
                    let gv = g[ci * np + p];
                    let base = ci * h * w;
                    if want_input {
                        let one = S::one();
                        dx[base + y0 * w + x0] =
                            dx[base + y0 * w + x0] + gv * (one - fx) * (one - fy);
                        dx[base + y0 * w + x1] = dx[base + y0 * w + x1] + gv * fx * (one - fy);
                        dx[base + y1 * w + x0] = dx[base + y1 * w + x0] + gv * (one - fx) * fy;
                        dx[base + y1 * w + x1] = dx[base + y1 * w + x1] + gv * fx * fy;
                    }
                    if want_coords {
                        let v00 = x[base + y0 * w + x0];
                        let v01 = x[base + y0 * w + x1];
                        let v10 = x[base + y1 * w + x0];
                        let v11 = x[base + y1 * w + x1];
                        let ddx = (v01 - v00) * (S::one() - fy) + (v11 - v10) * fy;
                        let ddy = (v10 - v00) * (S::one() - fx) + (v11 - v01) * fx;
                        dc[p] = dc[p] + gv * ddx;
                        dc[np + p] = dc[np + p] + gv * ddy;
                    }
                }
            }
            if want_input {
                accum(&inp, &dx);
            }
            if want_coords {
                accum(&crd, &dc);
            }
        },
    );
    Ok((out_t, mask))
}

/// Align-corners-false bilinear resize of the last two dimensions.
pub fn upsample_bilinear<S: Element>(
    input: &Tensor<S>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<S>> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "upsample_bilinear expects rank >= 2, got {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if target_h < h || target_w < w || target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "upsample_bilinear target {target_h}x{target_w} below source {h}x{w}"
        )));
    }
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let mut out_shape = shape.to_vec();
    let l = out_shape.len();
    out_shape[l - 2] = target_h;
    out_shape[l - 1] = target_w;

    // align-corners-false source coordinate, clamped to the valid range
    let axis_map = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, S)> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let i0 = (s.floor() as usize).min(n_src - 1);
                let i1 = (i0 + 1).min(n_src - 1);
                (i0, i1, S::fp(s - i0 as f64))
            })
            .collect()
    };
    let ymap = axis_map(h, target_h);
    let xmap = axis_map(w, target_w);

    let x = input.values();
    let mut out = vec![S::zero(); planes * target_h * target_w];
    for pl in 0..planes {
        let ibase = pl * h * w;
        let obase = pl * target_h * target_w;
        for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                let v00 = x[ibase + y0 * w + x0];
                let v01 = x[ibase + y0 * w + x1];
                let v10 = x[ibase + y1 * w + x0];
                let v11 = x[ibase + y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[obase + oy * target_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    let inp = input.clone();
    Ok(Tensor::from_op(out_shape, out, vec![input.clone()], move |g| {
        let mut dx = vec![S::zero(); inp.len()];
        for pl in 0..planes {
            let ibase = pl * h * w;
            let obase = pl * target_h * target_w;
            for (oy, &(y0, y1, fy)) in ymap.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xmap.iter().enumerate() {
                    let gv = g[obase + oy * target_w + ox];
                    let one = S::one();
                    dx[ibase + y0 * w + x0] = dx[ibase + y0 * w + x0] + gv * (one - fx) * (one - fy);
                    dx[ibase + y0 * w + x1] = dx[ibase + y0 * w + x1] + gv * fx * (one - fy);
                    dx[ibase + y1 * w + x0] = dx[ibase + y1 * w + x0] + gv * (one - fx) * fy;
                    dx[ibase + y1 * w + x1] = dx[ibase + y1 * w + x1] + gv * fx * fy;
                }
            }
        }
        accum(&inp, &dx);
    }))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i.clamp(0, n - 1) as usize
}

/// 3x3 box mean over the last two dimensions with reflect padding.
pub fn mean_filter3x3<S: Element>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!(
            "mean_filter3x3 expects rank >= 2, got {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let x = input.values();
    let ninth = S::fp(1.0 / 9.0);
    let mut out = vec![S::zero(); x.len()];
    for pl in 0..planes {
        let base = pl * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = S::zero();
                for dy in -1isize..=1 {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -1isize..=1 {
                        let sx = reflect(xx as isize + dx, w);
                        acc = acc + x[base + sy * w + sx];
                    }
                }
                out[base + y * w + xx] = acc * ninth;
            }
        }
    }
    let inp = input.clone();
    Ok(Tensor::from_op(shape.to_vec(), out, vec![input.clone()], move |g| {
        let mut dx = vec![S::zero(); inp.len()];
        for pl in 0..planes {
            let base = pl * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let gv = g[base + y * w + xx] * ninth;
                    for dy in -1isize..=1 {
                        let sy = reflect(y as isize + dy, h);
                        for dx2 in -1isize..=1 {
                            let sx = reflect(xx as isize + dx2, w);
                            dx[base + sy * w + sx] = dx[base + sy * w + sx] + gv;
                        }
                    }
                }
            }
        }
        accum(&inp, &dx);
    }))
}

/// Horizontal forward difference over the last dimension (width shrinks by 1).
pub fn diff_x<S: Element>(input: &Tensor<S>) -> Result<Tensor<S>> {
    spatial_diff(input, false)
}

/// Vertical forward difference over the second-to-last dimension.
pub fn diff_y<S: Element>(input: &Tensor<S>) -> Result<Tensor<S>> {
    spatial_diff(input, true)
}

fn spatial_diff<S: Element>(input: &Tensor<S>, vertical: bool) -> Result<Tensor<S>> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("spatial diff expects rank >= 2, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if (vertical && h < 2) || (!vertical && w < 2) {
        return Err(Error::Degenerate(format!(
            "spatial diff on degenerate extent (H={h}, W={w})"
        )));
    }
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let (nh, nw) = if vertical { (h - 1, w) } else { (h, w - 1) };
    let mut out_shape = shape.to_vec();
    let l = out_shape.len();
    out_shape[l - 2] = nh;
    out_shape[l - 1] = nw;
    let x = input.values();
    let mut out = vec![S::zero(); planes * nh * nw];
    for pl in 0..planes {
        let base = pl * h * w;
        let obase = pl * nh * nw;
        for y in 0..nh {
            for xx in 0..nw {
                let a = x[base + y * w + xx];
                let b = if vertical {
                    x[base + (y + 1) * w + xx]
                } else {
                    x[base + y * w + xx + 1]
                };
                out[obase + y * nw + xx] = b - a;
            }
        }
    }
    let inp = input.clone();
    Ok(Tensor::from_op(out_shape, out, vec![input.clone()], move |g| {
        let mut dx = vec![S::zero(); inp.len()];
        for pl in 0..planes {
            let base = pl * h * w;
            let obase = pl * nh * nw;
            for y in 0..nh {
                for xx in 0..nw {
                    let gv = g[obase + y * nw + xx];
                    dx[base + y * w + xx] = dx[base + y * w + xx] - gv;
                    if vertical {
                        dx[base + (y + 1) * w + xx] = dx[base + (y + 1) * w + xx] + gv;
                    } else {
                        dx[base + y * w + xx + 1] = dx[base + y * w + xx + 1] + gv;
                    }
                }
            }
        }
        accum(&inp, &dx);
    }))
}

/// Spatial mean of an NCHW tensor, producing (N, C).
pub fn global_avg_pool<S: Element>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("global_avg_pool expects NCHW, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let inv = S::fp(1.0 / plane as f64);
    let x = input.values();
    let mut out = vec![S::zero(); n * c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = S::zero();
            for i in 0..plane {
                acc = acc + x[base + i];
            }
            out[ni * c + ci] = acc * inv;
        }
    }
    let inp = input.clone();
    Ok(Tensor::from_op(vec![n, c], out, vec![input.clone()], move |g| {
        let mut dx = vec![S::zero(); inp.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let gv = g[ni * c + ci] * inv;
                for i in 0..plane {
                    dx[base + i] = gv;
                }
            }
        }
        accum(&inp, &dx);
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t64(&[1, 1, 3, 3], &[1.0; 9]);
        let w = t64(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_full_window_sum() {
        let x = t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t64(&[1, 1, 2, 2], &[1.0; 4]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.values(), &[10.0]);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let x = t64(&[1, 2, 3, 3], &[0.0; 18]);
        let w = t64(&[1, 3, 1, 1], &[0.0; 3]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn conv_output_shape_formula() {
        // exhaustive small-shape sweep for the shape contract
        for h in 1..=4usize {
            for w in 1..=4usize {
                for kh in 1..=h.min(3) {
                    for kw in 1..=w.min(3) {
                        for stride in 1..=2usize {
                            for pad in 0..=1usize {
                                let x = Tensor::<f64>::zeros(&[1, 1, h, w]);
                                let wt = Tensor::<f64>::zeros(&[1, 1, kh, kw]);
                                let y = conv2d(&x, &wt, None, stride, pad).unwrap();
                                let oh = (h + 2 * pad - kh) / stride + 1;
                                let ow = (w + 2 * pad - kw) / stride + 1;
                                assert_eq!(y.shape(), &[1, 1, oh, ow]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bn_identity_on_normalized_input() {
        // zero-mean unit-variance per channel stays (almost) unchanged
        let vals = vec![-1.0, 1.0, -1.0, 1.0];
        let x = t64(&[1, 1, 2, 2], &vals);
        let gamma = t64(&[1], &[1.0]);
        let beta = t64(&[1], &[0.0]);
        let (y, _) = batch_norm2d(&x, &gamma, &beta, 1e-5, BnMode::Train).unwrap();
        for (a, b) in y.values().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn bn_gamma_zero_gives_beta() {
        let x = t64(&[2, 1, 2, 2], &[1.0, -3.0, 2.0, 0.5, 0.0, 4.0, -1.0, 2.5]);
        let gamma = t64(&[1], &[0.0]);
        let beta = t64(&[1], &[0.7]);
        let (y, _) = batch_norm2d(&x, &gamma, &beta, 1e-5, BnMode::Train).unwrap();
        assert!(y.values().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn bn_normalizes_random_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (n, c, h, w) = (4, 8, 5, 5);
        let vals: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let x = t64(&[n, c, h, w], &vals);
        let gamma = t64(&[c], &[1.0; 8]);
        let beta = t64(&[c], &[0.0; 8]);
        let (y, _) = batch_norm2d(&x, &gamma, &beta, 1e-9, BnMode::Train).unwrap();
        // direct per-channel statistics oracle
        let m = (n * h * w) as f64;
        for ci in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    sum += y.values()[base + i];
                    sq += y.values()[base + i] * y.values()[base + i];
                }
            }
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-5, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ci} var {var}");
        }
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let x = t64(&[1, 2], &[1.0, 2.0]);
        let w_id = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = linear(&x, &w_id, None).unwrap();
        assert_eq!(y.values(), x.values());

        let w = t64(&[2, 2], &[1.0, 1.0, 0.0, 1.0]);
        let b = t64(&[2], &[0.0, 1.0]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.values(), &[3.0, 3.0]);
    }

    #[test]
    fn sample_identity_grid() {
        let img = t64(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let coords = t64(&[2, 2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let (y, mask) = bilinear_sample(&img, &coords).unwrap();
        assert_eq!(y.values(), img.values());
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn sample_four_neighbor_center() {
        let img = t64(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let coords = t64(&[2, 1, 1], &[0.5, 0.5]);
        let (y, mask) = bilinear_sample(&img, &coords).unwrap();
        assert!((y.values()[0] - 1.5).abs() < 1e-12);
        assert!(mask[0]);
    }

    #[test]
    fn sample_out_of_bounds_is_zero_and_masked() {
        let img = t64(&[1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let coords = t64(&[2, 1, 2], &[-0.5, 5.0, 0.0, 0.0]);
        let (y, mask) = bilinear_sample(&img, &coords).unwrap();
        assert_eq!(y.values(), &[0.0, 0.0]);
        assert_eq!(mask, vec![false, false]);
    }

    #[test]
    fn upsample_identity_and_hand_case() {
        let x = t64(&[1, 1, 1, 2], &[0.0, 2.0]);
        let same = upsample_bilinear(&x, 1, 2).unwrap();
        assert_eq!(same.values(), x.values());
        let up = upsample_bilinear(&x, 1, 4).unwrap();
        let expect = [0.0, 0.5, 1.5, 2.0];
        for (a, b) in up.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", up.values());
        }
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 5], 0.4);
        let up = upsample_bilinear(&x, 7, 11).unwrap();
        assert!(up.values().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn upsample_shrink_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(upsample_bilinear(&x, 2, 4).is_err());
    }

    #[test]
    fn mean_filter_constant() {
        let x = Tensor::<f64>::full(&[1, 4, 5], 2.5);
        let y = mean_filter3x3(&x).unwrap();
        assert!(y.values().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn diff_ops() {
        let x = t64(&[1, 2, 3], &[1.0, 2.0, 4.0, 0.0, 1.0, 3.0]);
        let dx = diff_x(&x).unwrap();
        assert_eq!(dx.shape(), &[1, 2, 2]);
        assert_eq!(dx.values(), &[1.0, 2.0, 1.0, 2.0]);
        let dy = diff_y(&x).unwrap();
        assert_eq!(dy.shape(), &[1, 1, 3]);
        assert_eq!(dy.values(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn diff_degenerate_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1]);
        assert!(diff_x(&x).is_err());
        assert!(diff_y(&x).is_err());
    }

    #[test]
    fn gap_values() {
        let x = t64(&[1, 2, 1, 2], &[1.0, 3.0, 5.0, 7.0]);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.values(), &[2.0, 6.0]);
    }
}
