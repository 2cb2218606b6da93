//! Test-only oracles: naive `f64` reference forwards, central finite differences,
//! and random instance generators. Nothing here calls the library kernels it checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradsuite;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values rounded to `f32` and back, so the library and the oracle see identical inputs.
pub fn f32_exact(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&a, &b) in analytic.iter().zip(numeric) {
        let a = a as f64;
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// volgrad reference forwards, C×D×H×W row-major.

pub fn conv3d_ref(x: &[f64], c_in: usize, dims: [usize; 3], w: &[f64], c_out: usize, k: usize, b: &[f64]) -> Vec<f64> {
    let [d, h, wd] = dims;
    let r = (k / 2) as isize;
    let mut out = vec![0.0; c_out * d * h * wd];
    for co in 0..c_out {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let sz = z as isize + kd as isize - r;
                                    let sy = y as isize + kh as isize - r;
                                    let sx = xx as isize + kw as isize - r;
                                    if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    let wi = (((co * c_in + ci) * k + kd) * k + kh) * k + kw;
                                    let xi = ((ci * d + sz as usize) * h + sy as usize) * wd + sx as usize;
                                    acc += w[wi] * x[xi];
                                }
                            }
                        }
                    }
                    out[((co * d + z) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn maxpool_ref(x: &[f64], c: usize, [d, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::new();
    for ci in 0..c {
        for z in 0..d / 2 {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x[((ci * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx]);
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

pub fn upsample_ref(x: &[f64], c: usize, [d, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::new();
    for ci in 0..c {
        for z in 0..2 * d {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(x[((ci * d + z / 2) * h + y / 2) * w + xx / 2]);
                }
            }
        }
    }
    out
}

/// Train-mode batch normalization with a variance floor.
pub fn batchnorm_ref(x: &[f64], c: usize, n: usize, scale: &[f64], shift: &[f64], floor: f64) -> Vec<f64> {
    let mut out = vec![0.0; c * n];
    for ci in 0..c {
        let ch = &x[ci * n..(ci + 1) * n];
        let mean = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let s = 1.0 / var.max(floor).sqrt();
        for (o, v) in out[ci * n..(ci + 1) * n].iter_mut().zip(ch) {
            *o = scale[ci] * (v - mean) * s + shift[ci];
        }
    }
    out
}

pub fn softmax_ref(x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * n];
    for v in 0..n {
        let m = (0..c).map(|ci| x[ci * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|ci| (x[ci * n + v] - m).exp()).sum();
        for ci in 0..c {
            out[ci * n + v] = (x[ci * n + v] - m).exp() / z;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Loss references, written directly from the formulas.

pub fn soft_dice_ref(p: &[f64], labels: &[u8], l: usize, eps: f64) -> Vec<f64> {
    let n = labels.len();
    (0..l)
        .map(|i| {
            let mut inter = 0.0;
            let mut sum = 0.0;
            for x in 0..n {
                let delta = if labels[x] as usize == i { 1.0 } else { 0.0 };
                inter += delta * p[i * n + x];
                sum += delta + p[i * n + x];
            }
            (2.0 * inter + eps) / (sum + eps)
        })
        .collect()
}

pub fn exp_log_dice_ref(p: &[f64], labels: &[u8], l: usize, eps: f64, gamma: f64) -> f64 {
    let d = soft_dice_ref(p, labels, l, eps);
    d.iter().map(|v| (-v.ln()).powf(gamma)).sum::<f64>() / l as f64
}

pub fn linear_dice_ref(p: &[f64], labels: &[u8], l: usize, eps: f64) -> f64 {
    let d = soft_dice_ref(p, labels, l, eps);
    d.iter().map(|v| 1.0 - v).sum::<f64>() / l as f64
}

pub fn wce_ref(p: &[f64], labels: &[u8], w: &[f64], gamma: f64) -> f64 {
    let n = labels.len();
    labels
        .iter()
        .enumerate()
        .map(|(x, &lab)| {
            let q = p[lab as usize * n + x].clamp(1e-7, 1.0);
            w[lab as usize] * (-q.ln()).powf(gamma)
        })
        .sum::<f64>()
        / n as f64
}

pub fn focal_ref(p: &[f64], labels: &[u8], w: &[f64], gamma: f64) -> f64 {
    let n = labels.len();
    labels
        .iter()
        .enumerate()
        .map(|(x, &lab)| {
            let q = p[lab as usize * n + x].clamp(1e-7, 1.0);
            w[lab as usize] * (1.0 - q).powf(gamma) * (-q.ln())
        })
        .sum::<f64>()
        / n as f64
}

pub fn combined_ref(p: &[f64], labels: &[u8], l: usize, w: &[f64], gamma: f64, wd: f64, wc: f64) -> f64 {
    wd * exp_log_dice_ref(p, labels, l, 1.0, gamma) + wc * wce_ref(p, labels, w, gamma)
}

/// Random probability-like tensor with entries in `[0.1, 0.9]` (not normalized, which
/// the losses do not require; the lower bound keeps finite-difference truncation small),
/// random labels, and random positive weights.
pub struct LossInstance {
    pub l: usize,
    pub dims: [usize; 3],
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
    pub weights: Vec<f64>,
}

pub fn loss_instance(rng: &mut impl Rng) -> LossInstance {
    let l = rng.random_range(2..=5);
    let dims = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
    let n: usize = dims.iter().product();
    let probs = f32_exact(uniform_vec(rng, l * n, 0.1, 0.9));
    let labels = (0..n).map(|_| rng.random_range(0..l) as u8).collect();
    let weights = uniform_vec(rng, l, 0.5, 3.0);
    LossInstance {
        l,
        dims,
        probs,
        labels,
        weights,
    }
}

/// `|f′(x)|` sampled at `n` evenly spaced interior points of `(0, 1)`.
pub fn derivative_scan(f_prime: impl Fn(f64) -> f64, n: usize) -> Vec<(f64, f64)> {
    (1..=n)
        .map(|i| {
            let x = i as f64 / (n + 1) as f64;
            (x, f_prime(x).abs())
        })
        .collect()
}

/// Location of the smallest `|f′|` in a scan, and whether it lies strictly inside.
pub fn interior_minimum(scan: &[(f64, f64)]) -> Option<f64> {
    let (i, _) = scan
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))?;
    (i > 0 && i + 1 < scan.len()).then_some(scan[i].0)
}

pub fn strictly_decreasing(scan: &[(f64, f64)]) -> bool {
    scan.windows(2).all(|w| w[1].1 < w[0].1)
}

/// One convolution of the architecture: `(in, out, kernel, followed_by_batchnorm)`.
pub type ConvLayer = (usize, usize, usize, bool);

/// Every convolution of the encoder-decoder listed explicitly, for parameter
/// counting independent of the library's per-block formula.
pub fn conv_layers(cfg: &elseg_core::elnet::NetworkConfig) -> Vec<ConvLayer> {
    let ch: Vec<usize> = (0..cfg.levels).map(|l| cfg.base_channels * 2usize.pow(l as u32)).collect();
    let mut layers = Vec::new();
    let block = |layers: &mut Vec<ConvLayer>, c_in: usize, n: usize, k: usize| {
        for j in 0..k {
            layers.push((if j == 0 { c_in } else { n }, n, 3, true));
        }
        layers.push((c_in, n, 1, false));
    };
    let mut c_in = 1;
    for l in 0..cfg.levels {
        block(&mut layers, c_in, ch[l], cfg.convs[l]);
        c_in = ch[l];
    }
    for l in (0..cfg.levels - 1).rev() {
        layers.push((ch[l + 1], ch[l], 1, false));
        block(&mut layers, 2 * ch[l], ch[l], cfg.convs[l]);
        let supervised = cfg.deep_supervision && l > 0;
        if supervised {
            layers.push((ch[l], cfg.num_labels, 1, false));
        }
    }
    if cfg.deep_supervision && cfg.supervise_deepest {
        layers.push((ch[cfg.levels - 1], cfg.num_labels, 1, false));
    }
    layers.push((ch[0], cfg.num_labels, 1, false));
    layers
}

pub fn count_params(cfg: &elseg_core::elnet::NetworkConfig) -> usize {
    conv_layers(cfg)
        .into_iter()
        .map(|(i, o, k, bn)| i * o * k.pow(3) + o + if bn { 2 * o } else { 0 })
        .sum()
}
