//! Forward and backward kernels on plain tensors.
//!
//! The [`Graph`](super::Graph) records these and replays the backward halves.
//! All spatial kernels operate on `C×D×H×W` tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use super::gemm::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Upper bound on the number of `f32`s held by one im2col slab.
const IM2COL_BUDGET: usize = if cfg!(test) { 256 } else { 1 << 23 };

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn check_conv_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, [usize; 3])> {
    let (c_in, dims) = x.dims4("conv3d")?;
    let ws = w.shape();
    if ws.len() != 5 {
        return Err(shape_err("conv3d", format!("kernel must be C_out×C_in×k×k×k, got {ws:?}")));
    }
    let k = ws[2];
    if !(k == 1 || k == 3) || ws[3] != k || ws[4] != k {
        return Err(shape_err("conv3d", format!("kernel spatial extent must be 1³ or 3³, got {ws:?}")));
    }
    if ws[1] != c_in {
        return Err(shape_err(
            "conv3d",
            format!("input has {c_in} channels but kernel {ws:?} expects {}", ws[1]),
        ));
    }
    if b.shape() != [ws[0]] {
        return Err(shape_err(
            "conv3d",
            format!("bias shape {:?} does not match {} output channels", b.shape(), ws[0]),
        ));
    }
    Ok((c_in, ws[0], k, dims))
}

fn planes_per_slab(rows: usize, plane: usize, depth: usize) -> usize {
    (IM2COL_BUDGET / (rows * plane).max(1)).clamp(1, depth)
}

/// Fills `col` (`C_in·27 × planes·H·W`) with the zero-padded 3³ neighbourhoods of
/// depth planes `d0..d0+planes`.
fn im2col(x: &[f32], c_in: usize, [dd, hh, ww]: [usize; 3], d0: usize, planes: usize, col: &mut [f32]) {
    let plane = hh * ww;
    let ncols = planes * plane;
    col[..c_in * 27 * ncols].fill(0.0);
    for ci in 0..c_in {
        let src = &x[ci * dd * plane..(ci + 1) * dd * plane];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ci * 27 + kd * 9 + kh * 3 + kw;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    for p in 0..planes {
                        let sd = (d0 + p + kd) as isize - 1;
                        if sd < 0 || sd >= dd as isize {
                            continue;
                        }
                        for h in 0..hh {
                            let sh = (h + kh) as isize - 1;
                            if sh < 0 || sh >= hh as isize {
                                continue;
                            }
                            let srow = &src[(sd as usize * hh + sh as usize) * ww..][..ww];
                            let drow = &mut dst[(p * hh + h) * ww..][..ww];
                            match kw {
                                0 => drow[1..].copy_from_slice(&srow[..ww - 1]),
                                1 => drow.copy_from_slice(srow),
                                _ => drow[..ww - 1].copy_from_slice(&srow[1..]),
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im(col: &[f32], c_in: usize, [dd, hh, ww]: [usize; 3], d0: usize, planes: usize, dx: &mut [f32]) {
    let plane = hh * ww;
    let ncols = planes * plane;
    for ci in 0..c_in {
        let dst = &mut dx[ci * dd * plane..(ci + 1) * dd * plane];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ci * 27 + kd * 9 + kh * 3 + kw;
                    let src = &col[row * ncols..(row + 1) * ncols];
                    for p in 0..planes {
                        let sd = (d0 + p + kd) as isize - 1;
                        if sd < 0 || sd >= dd as isize {
                            continue;
                        }
                        for h in 0..hh {
                            let sh = (h + kh) as isize - 1;
                            if sh < 0 || sh >= hh as isize {
                                continue;
                            }
                            let drow = &mut dst[(sd as usize * hh + sh as usize) * ww..][..ww];
                            let crow = &src[(p * hh + h) * ww..][..ww];
                            let (d, c) = match kw {
                                0 => (&mut drow[..ww - 1], &crow[1..]),
                                1 => (&mut drow[..], &crow[..]),
                                _ => (&mut drow[1..], &crow[..ww - 1]),
                            };
                            for (a, b) in d.iter_mut().zip(c) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with zero "same" padding.
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c_in, c_out, k, dims) = check_conv_shapes(x, w, b)?;
    let n = dims.iter().product::<usize>();
    let mut out = vec![0.0f32; c_out * n];
    if k == 1 {
        gemm(
            MatRef::new(w.data(), c_out, c_in),
            MatRef::new(x.data(), c_in, n),
            0.0,
            &mut out,
            n,
        );
    } else {
        let rows = c_in * 27;
        let plane = dims[1] * dims[2];
        let slab = planes_per_slab(rows, plane, dims[0]);
        let mut col = vec![0.0f32; rows * slab * plane];
        let mut d0 = 0;
        while d0 < dims[0] {
            let planes = slab.min(dims[0] - d0);
            let ncols = planes * plane;
            im2col(x.data(), c_in, dims, d0, planes, &mut col);
            gemm(
                MatRef::new(w.data(), c_out, rows),
                MatRef::new(&col[..rows * ncols], rows, ncols),
                0.0,
                &mut out[d0 * plane..],
                n,
            );
            d0 += planes;
        }
    }
    for (co, &bias) in b.data().iter().enumerate() {
        for v in &mut out[co * n..(co + 1) * n] {
            *v += bias;
        }
    }
    Tensor::new(vec![c_out, dims[0], dims[1], dims[2]], out)
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn conv3d_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, dims) = x.dims4("conv3d")?;
    let ws = w.shape().to_vec();
    let (c_out, k) = (ws[0], ws[2]);
    let n = dims.iter().product::<usize>();
    let mut dx = vec![0.0f32; c_in * n];
    let mut dw = vec![0.0f32; w.len()];
    let db: Vec<f32> = (0..c_out)
        .map(|co| dy.data()[co * n..(co + 1) * n].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    if k == 1 {
        gemm(
            MatRef::new(dy.data(), c_out, n),
            MatRef::new(x.data(), c_in, n).t(),
            0.0,
            &mut dw,
            c_in,
        );
        gemm(
            MatRef::new(w.data(), c_out, c_in).t(),
            MatRef::new(dy.data(), c_out, n),
            0.0,
            &mut dx,
            n,
        );
    } else {
        let rows = c_in * 27;
        let plane = dims[1] * dims[2];
        let slab = planes_per_slab(rows, plane, dims[0]);
        let mut col = vec![0.0f32; rows * slab * plane];
        let mut d0 = 0;
        while d0 < dims[0] {
            let planes = slab.min(dims[0] - d0);
            let ncols = planes * plane;
            let dy_slab = MatRef::strided(&dy.data()[d0 * plane..], c_out, ncols, n);
            im2col(x.data(), c_in, dims, d0, planes, &mut col);
            gemm(
                dy_slab,
                MatRef::new(&col[..rows * ncols], rows, ncols).t(),
                if d0 == 0 { 0.0 } else { 1.0 },
                &mut dw,
                rows,
            );
            gemm(
                MatRef::new(w.data(), c_out, rows).t(),
                dy_slab,
                0.0,
                &mut col[..rows * ncols],
                ncols,
            );
            col2im(&col, c_in, dims, d0, planes, &mut dx);
            d0 += planes;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(ws, dw)?,
        Tensor::new(vec![c_out], db)?,
    ))
}

fn check_even(op: &'static str, dims: [usize; 3]) -> Result<()> {
    for (axis, &e) in dims.iter().enumerate() {
        if e % 2 != 0 {
            return Err(Error::OddExtent { op, axis, extent: e });
        }
    }
    Ok(())
}

/// 2×2×2 max pooling with stride 2. Also returns, per output voxel, the flat
/// input index of the winning voxel (first in scan order on ties).
pub fn maxpool3d(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, [d, h, w]) = x.dims4("maxpool3d")?;
    check_even("maxpool3d", [d, h, w])?;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    let src = x.data();
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((ci * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                if best_idx == usize::MAX || src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, od, oh, ow], out)?, arg))
}

pub fn maxpool3d_backward(input_shape: &[usize], argmax: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let buf = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        buf[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample3d(x: &Tensor) -> Result<Tensor> {
    let (c, [d, h, w]) = x.dims4("upsample3d")?;
    let (ud, uh, uw) = (2 * d, 2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0f32; c * ud * uh * uw];
    for ci in 0..c {
        for z in 0..ud {
            for y in 0..uh {
                let srow = &src[((ci * d + z / 2) * h + y / 2) * w..][..w];
                let drow = &mut out[((ci * ud + z) * uh + y) * uw..][..uw];
                for (xx, v) in drow.iter_mut().enumerate() {
                    *v = srow[xx / 2];
                }
            }
        }
    }
    Tensor::new(vec![c, ud, uh, uw], out)
}

pub fn upsample3d_backward(dy: &Tensor) -> Result<Tensor> {
    let (c, [ud, uh, uw]) = dy.dims4("upsample3d")?;
    let (d, h, w) = (ud / 2, uh / 2, uw / 2);
    let mut dx = vec![0.0f32; c * d * h * w];
    let g = dy.data();
    for ci in 0..c {
        for z in 0..ud {
            for y in 0..uh {
                let grow = &g[((ci * ud + z) * uh + y) * uw..][..uw];
                let drow = &mut dx[((ci * d + z / 2) * h + y / 2) * w..][..w];
                for (xx, v) in grow.iter().enumerate() {
                    drow[xx / 2] += v;
                }
            }
        }
    }
    Tensor::new(vec![c, d, h, w], dx)
}

/// Running per-channel moments for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningMoments {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormConfig {
    pub momentum: f32,
    pub var_floor: f32,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            var_floor: 1e-5,
        }
    }
}

/// Per-channel statistics kept from a batchnorm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// True where the batch variance fell below the floor (variance treated as constant).
    pub floored: Vec<bool>,
    pub train: bool,
}

fn check_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<(usize, usize)> {
    let (c, dims) = x.dims4("batchnorm")?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(shape_err(
            "batchnorm",
            format!(
                "scale {:?} / shift {:?} must have length {c}",
                scale.shape(),
                shift.shape()
            ),
        ));
    }
    Ok((c, dims.iter().product()))
}

/// Train mode normalizes each channel over its spatial positions and folds the
/// batch moments into `running`; infer mode reads `running`.
pub fn batchnorm(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    running: Option<&mut RunningMoments>,
    infer_moments: Option<&RunningMoments>,
    cfg: &BatchNormConfig,
) -> Result<(Tensor, BatchNormCache)> {
    let (c, n) = check_affine(x, scale, shift)?;
    let train = infer_moments.is_none();
    let mut mean = vec![0.0f32; c];
    let mut inv_std = vec![0.0f32; c];
    let mut floored = vec![false; c];
    let mut batch_var = vec![0.0f32; c];
    for ci in 0..c {
        let (m, var) = if let Some(r) = infer_moments {
            (r.mean[ci] as f64, r.var[ci] as f64)
        } else {
            let ch = x.channel(ci);
            let m = ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = ch.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            (m, var)
        };
        batch_var[ci] = var as f32;
        floored[ci] = var < cfg.var_floor as f64;
        mean[ci] = m as f32;
        inv_std[ci] = (1.0 / var.max(cfg.var_floor as f64).sqrt()) as f32;
    }
    let mut out = vec![0.0f32; c * n];
    for ci in 0..c {
        let (m, s, g, b) = (mean[ci], inv_std[ci], scale.data()[ci], shift.data()[ci]);
        for (o, &v) in out[ci * n..(ci + 1) * n].iter_mut().zip(x.channel(ci)) {
            *o = g * ((v - m) * s) + b;
        }
    }
    if train {
        if let Some(r) = running {
            let mo = cfg.momentum;
            for ci in 0..c {
                r.mean[ci] = mo * r.mean[ci] + (1.0 - mo) * mean[ci];
                r.var[ci] = mo * r.var[ci] + (1.0 - mo) * batch_var[ci];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormCache {
            mean,
            inv_std,
            floored,
            train,
        },
    ))
}

/// Returns `(d_input, d_scale, d_shift)`.
pub fn batchnorm_backward(
    x: &Tensor,
    scale: &Tensor,
    cache: &BatchNormCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, dims) = x.dims4("batchnorm")?;
    let n: usize = dims.iter().product();
    let mut dx = vec![0.0f32; c * n];
    let mut dscale = vec![0.0f32; c];
    let mut dshift = vec![0.0f32; c];
    for ci in 0..c {
        let (m, s, g) = (cache.mean[ci], cache.inv_std[ci], scale.data()[ci]);
        let xs = x.channel(ci);
        let gs = dy.channel(ci);
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for (&v, &gy) in xs.iter().zip(gs) {
            let xhat = ((v - m) * s) as f64;
            sum_g += gy as f64;
            sum_gx += gy as f64 * xhat;
        }
        dscale[ci] = sum_gx as f32;
        dshift[ci] = sum_g as f32;
        let out = &mut dx[ci * n..(ci + 1) * n];
        let k = (g * s) as f64;
        if cache.train {
            let mean_g = sum_g / n as f64;
            let mean_gx = if cache.floored[ci] { 0.0 } else { sum_gx / n as f64 };
            for ((o, &v), &gy) in out.iter_mut().zip(xs).zip(gs) {
                let xhat = ((v - m) * s) as f64;
                *o = (k * (gy as f64 - mean_g - xhat * mean_gx)) as f32;
            }
        } else {
            for (o, &gy) in out.iter_mut().zip(gs) {
                *o = (k * gy as f64) as f32;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dscale)?,
        Tensor::new(vec![c], dshift)?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient 0 at 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Stacks channels; `a`'s channels come first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, da) = a.dims4("concat_channels")?;
    let (cb, db) = b.dims4("concat_channels")?;
    if da != db {
        return Err(shape_err(
            "concat_channels",
            format!("spatial extents differ: {da:?} vs {db:?}"),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, da[0], da[1], da[2]], data)
}

pub fn split_channels(dy: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (c, dims) = dy.dims4("concat_channels")?;
    let n: usize = dims.iter().product();
    let (ga, gb) = dy.data().split_at(first * n);
    Ok((
        Tensor::new(vec![first, dims[0], dims[1], dims[2]], ga.to_vec())?,
        Tensor::new(vec![c - first, dims[0], dims[1], dims[2]], gb.to_vec())?,
    ))
}

pub fn scale(x: &Tensor, factor: f32) -> Tensor {
    x.map(|v| v * factor)
}

/// Softmax over the channel axis, evaluated in `f64` with max subtraction.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (c, dims) = x.dims4("softmax_channels")?;
    if c < 2 {
        return Err(shape_err("softmax_channels", format!("needs at least 2 channels, got {c}")));
    }
    let n: usize = dims.iter().product();
    let src = x.data();
    let mut out = vec![0.0f32; c * n];
    let mut buf = vec![0.0f64; c];
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for ci in 0..c {
            max = max.max(src[ci * n + v] as f64);
        }
        let mut total = 0.0;
        for ci in 0..c {
            buf[ci] = (src[ci * n + v] as f64 - max).exp();
            total += buf[ci];
        }
        for ci in 0..c {
            out[ci * n + v] = (buf[ci] / total) as f32;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_channels_backward(p: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (c, dims) = p.dims4("softmax_channels")?;
    let n: usize = dims.iter().product();
    let (pd, gd) = (p.data(), dy.data());
    let mut dx = vec![0.0f32; c * n];
    for v in 0..n {
        let dot: f64 = (0..c).map(|ci| pd[ci * n + v] as f64 * gd[ci * n + v] as f64).sum();
        for ci in 0..c {
            let i = ci * n + v;
            dx[i] = (pd[i] as f64 * (gd[i] as f64 - dot)) as f32;
        }
    }
    Tensor::new(p.shape().to_vec(), dx)
}

pub fn gaussian_noise<R: Rng + ?Sized>(x: &Tensor, sigma: f32, rng: &mut R) -> Tensor {
    let mut out = x.clone();
    if sigma > 0.0 {
        for v in out.data_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    out
}

/// Inverted dropout; returns the output and the per-element multiplier.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f32, rng: &mut R) -> (Tensor, Vec<f32>) {
    let keep = 1.0 - rate;
    let mask: Vec<f32> = if rate > 0.0 {
        (0..x.len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { 1.0 / keep })
            .collect()
    } else {
        vec![1.0; x.len()]
    };
    let mut out = x.clone();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    (out, mask)
}
