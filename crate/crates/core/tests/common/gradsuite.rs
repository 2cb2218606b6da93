//! Finite-difference gradient checks shared by the unit-level gradient tests and
//! the acceptance suite. Each check returns the worst relative error seen.

use elseg_core::losses::{self, GroundTruth, LossConfig, LossKind};
use elseg_core::volgrad::{BatchNormConfig, BatchNormMode, Graph, ParamStore, RunningMoments, Tensor};
use rand::Rng;

use super::*;

pub const INSTANCES: usize = 20;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub worst: f64,
    pub instances: usize,
}

fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), to_f32(v)).unwrap()
}

fn small_dims(rng: &mut impl Rng, lo: usize, hi: usize) -> [usize; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn worst_of(name: &'static str, seed: u64, mut one: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> f64) -> CheckResult {
    let mut r = rng(seed);
    let worst = (0..INSTANCES).map(|_| one(&mut r)).fold(0.0, f64::max);
    CheckResult {
        name,
        worst,
        instances: INSTANCES,
    }
}

/// Seeds the backward pass with random weights `r` so the checked scalar is `Σ r·y`.
fn seeded_backward(g: &Graph, node: elseg_core::volgrad::NodeId, r: &[f64]) -> elseg_core::volgrad::Gradients {
    let shape = g.value(node).shape().to_vec();
    g.backward_from(node, tensor(&shape, r)).unwrap()
}

pub fn conv3d(seed: u64) -> CheckResult {
    let mut k_toggle = 0;
    worst_of("conv3d", seed, |r| {
        let (c_in, c_out) = (r.random_range(1..=3), r.random_range(1..=3));
        let k = if k_toggle % 2 == 0 { 3 } else { 1 };
        k_toggle += 1;
        let dims = small_dims(r, 2, 5);
        let n: usize = dims.iter().product();
        let x = f32_exact(uniform_vec(r, c_in * n, -1.0, 1.0));
        let w = f32_exact(uniform_vec(r, c_out * c_in * k * k * k, -0.5, 0.5));
        let b = f32_exact(uniform_vec(r, c_out, -0.5, 0.5));
        let rw = f32_exact(uniform_vec(r, c_out * n, -1.0, 1.0));

        let mut store = ParamStore::new();
        let wid = store.insert("w", tensor(&[c_out, c_in, k, k, k], &w));
        let bid = store.insert("b", tensor(&[c_out], &b));
        let mut g = Graph::new();
        let xn = g.input(tensor(&[c_in, dims[0], dims[1], dims[2]], &x));
        let (wn, bn) = (g.param(&store, wid), g.param(&store, bid));
        let y = g.conv3d(xn, wn, bn).unwrap();
        let grads = seeded_backward(&g, y, &rw);

        let mut analytic = grads.input(xn).unwrap().data().to_vec();
        analytic.extend_from_slice(grads.param(wid).unwrap().data());
        analytic.extend_from_slice(grads.param(bid).unwrap().data());
        let (nx, nw) = (x.len(), w.len());
        let mut all = x.clone();
        all.extend(&w);
        all.extend(&b);
        let numeric = central_differences(
            |v| dot(&rw, &conv3d_ref(&v[..nx], c_in, dims, &v[nx..nx + nw], c_out, k, &v[nx + nw..])),
            &all,
            FD_STEP,
        );
        relative_error(&analytic, &numeric)
    })
}

pub fn maxpool3d(seed: u64) -> CheckResult {
    worst_of("maxpool3d", seed, |r| {
        let c = r.random_range(1..=3);
        let dims = [2 * r.random_range(1..=2), 2 * r.random_range(1..=2), 2 * r.random_range(1..=2)];
        let n: usize = dims.iter().product();
        // distinct values spaced 0.05 apart so no perturbation can change a window's argmax
        let mut x: Vec<f64> = (0..c * n).map(|i| i as f64 * 0.05).collect();
        for i in (1..x.len()).rev() {
            let j = r.random_range(0..=i);
            x.swap(i, j);
        }
        let x = f32_exact(x);
        let out_n = c * n / 8;
        let rw = f32_exact(uniform_vec(r, out_n, -1.0, 1.0));
        let mut g = Graph::new();
        let xn = g.input(tensor(&[c, dims[0], dims[1], dims[2]], &x));
        let y = g.maxpool3d(xn).unwrap();
        let grads = seeded_backward(&g, y, &rw);
        let numeric = central_differences(|v| dot(&rw, &maxpool_ref(v, c, dims)), &x, FD_STEP);
        relative_error(grads.input(xn).unwrap().data(), &numeric)
    })
}

pub fn upsample3d(seed: u64) -> CheckResult {
    worst_of("upsample3d", seed, |r| {
        let c = r.random_range(1..=3);
        let dims = small_dims(r, 1, 3);
        let n: usize = dims.iter().product();
        let x = f32_exact(uniform_vec(r, c * n, -1.0, 1.0));
        let rw = f32_exact(uniform_vec(r, c * n * 8, -1.0, 1.0));
        let mut g = Graph::new();
        let xn = g.input(tensor(&[c, dims[0], dims[1], dims[2]], &x));
        let y = g.upsample3d(xn).unwrap();
        let grads = seeded_backward(&g, y, &rw);
        let numeric = central_differences(|v| dot(&rw, &upsample_ref(v, c, dims)), &x, FD_STEP);
        relative_error(grads.input(xn).unwrap().data(), &numeric)
    })
}

pub fn batchnorm(seed: u64) -> CheckResult {
    worst_of("batchnorm", seed, |r| {
        let c = r.random_range(1..=3);
        let dims = small_dims(r, 2, 4);
        let n: usize = dims.iter().product();
        let x = f32_exact(uniform_vec(r, c * n, -2.0, 2.0));
        let scale = f32_exact(uniform_vec(r, c, 0.5, 1.5));
        let shift = f32_exact(uniform_vec(r, c, -0.5, 0.5));
        let rw = f32_exact(uniform_vec(r, c * n, -1.0, 1.0));
        let cfg = BatchNormConfig::default();

        let mut store = ParamStore::new();
        let sid = store.insert("scale", tensor(&[c], &scale));
        let tid = store.insert("shift", tensor(&[c], &shift));
        let mut running = RunningMoments::new(c);
        let mut g = Graph::new();
        let xn = g.input(tensor(&[c, dims[0], dims[1], dims[2]], &x));
        let (sn, tn) = (g.param(&store, sid), g.param(&store, tid));
        let y = g.batchnorm(xn, sn, tn, BatchNormMode::Train(&mut running), &cfg).unwrap();
        let grads = seeded_backward(&g, y, &rw);

        let mut analytic = grads.input(xn).unwrap().data().to_vec();
        analytic.extend_from_slice(grads.param(sid).unwrap().data());
        analytic.extend_from_slice(grads.param(tid).unwrap().data());
        let mut all = x.clone();
        all.extend(&scale);
        all.extend(&shift);
        let nx = x.len();
        let floor = cfg.var_floor as f64;
        let numeric = central_differences(
            |v| dot(&rw, &batchnorm_ref(&v[..nx], c, n, &v[nx..nx + c], &v[nx + c..], floor)),
            &all,
            FD_STEP,
        );
        relative_error(&analytic, &numeric)
    })
}

pub fn pointwise(seed: u64) -> CheckResult {
    worst_of("relu/add/concat/scale", seed, |r| {
        let (ca, cb) = (r.random_range(1..=3), r.random_range(1..=3));
        let dims = small_dims(r, 1, 3);
        let n: usize = dims.iter().product();
        // keep relu inputs away from the kink
        let away = |v: f64| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v };
        let a = f32_exact(uniform_vec(r, ca * n, -1.0, 1.0).into_iter().map(away).collect());
        let b = f32_exact(uniform_vec(r, cb * n, -1.0, 1.0));
        let bb = f32_exact(uniform_vec(r, ca * n, -1.0, 1.0));
        let factor = r.random_range(-2.0f32..2.0) as f64;
        let rw = f32_exact(uniform_vec(r, (ca + cb) * n, -1.0, 1.0));

        // y = concat(scale(relu(a) + bb, factor), b)
        let mut g = Graph::new();
        let an = g.input(tensor(&[ca, dims[0], dims[1], dims[2]], &a));
        let bn = g.input(tensor(&[cb, dims[0], dims[1], dims[2]], &b));
        let bbn = g.input(tensor(&[ca, dims[0], dims[1], dims[2]], &bb));
        let ra = g.relu(an);
        let s = g.add(ra, bbn).unwrap();
        let sc = g.scale(s, factor as f32);
        let y = g.concat_channels(sc, bn).unwrap();
        let grads = seeded_backward(&g, y, &rw);

        let mut analytic = grads.input(an).unwrap().data().to_vec();
        analytic.extend_from_slice(grads.input(bn).unwrap().data());
        analytic.extend_from_slice(grads.input(bbn).unwrap().data());
        let mut all = a.clone();
        all.extend(&b);
        all.extend(&bb);
        let (na, nb) = (a.len(), b.len());
        let numeric = central_differences(
            |v| {
                let mut y: Vec<f64> = v[..na]
                    .iter()
                    .zip(&v[na + nb..])
                    .map(|(x, o)| (x.max(0.0) + o) * factor)
                    .collect();
                y.extend_from_slice(&v[na..na + nb]);
                dot(&rw, &y)
            },
            &all,
            FD_STEP,
        );
        relative_error(&analytic, &numeric)
    })
}

pub fn softmax(seed: u64) -> CheckResult {
    worst_of("softmax_channels", seed, |r| {
        let c = r.random_range(2..=5);
        let dims = small_dims(r, 1, 3);
        let n: usize = dims.iter().product();
        let x = f32_exact(uniform_vec(r, c * n, -3.0, 3.0));
        let rw = f32_exact(uniform_vec(r, c * n, -1.0, 1.0));
        let mut g = Graph::new();
        let xn = g.input(tensor(&[c, dims[0], dims[1], dims[2]], &x));
        let y = g.softmax_channels(xn).unwrap();
        let grads = seeded_backward(&g, y, &rw);
        let numeric = central_differences(|v| dot(&rw, &softmax_ref(v, c, n)), &x, FD_STEP);
        relative_error(grads.input(xn).unwrap().data(), &numeric)
    })
}

/// conv → relu → mean, differentiated through `Graph::backward`.
pub fn composite(seed: u64) -> CheckResult {
    worst_of("conv3d→relu→mean", seed, |r| loop {
        let (c_in, c_out) = (r.random_range(1..=2), r.random_range(1..=2));
        let dims = small_dims(r, 2, 3);
        let n: usize = dims.iter().product();
        let x = f32_exact(uniform_vec(r, c_in * n, -1.0, 1.0));
        let w = f32_exact(uniform_vec(r, c_out * c_in * 27, -0.5, 0.5));
        let b = f32_exact(uniform_vec(r, c_out, -0.2, 0.2));
        let pre = conv3d_ref(&x, c_in, dims, &w, c_out, 3, &b);
        // resample instances with a pre-activation near the relu kink
        if pre.iter().any(|v| v.abs() < 0.02) {
            continue;
        }
        let mut store = ParamStore::new();
        let wid = store.insert("w", tensor(&[c_out, c_in, 3, 3, 3], &w));
        let bid = store.insert("b", tensor(&[c_out], &b));
        let mut g = Graph::new();
        let xn = g.input(tensor(&[c_in, dims[0], dims[1], dims[2]], &x));
        let (wn, bn) = (g.param(&store, wid), g.param(&store, bid));
        let y = g.conv3d(xn, wn, bn).unwrap();
        let a = g.relu(y);
        let loss = g.mean(a);
        let grads = g.backward(loss).unwrap();

        let mut analytic = grads.input(xn).unwrap().data().to_vec();
        analytic.extend_from_slice(grads.param(wid).unwrap().data());
        analytic.extend_from_slice(grads.param(bid).unwrap().data());
        let (nx, nw) = (x.len(), w.len());
        let mut all = x.clone();
        all.extend(&w);
        all.extend(&b);
        let numeric = central_differences(
            |v| {
                let out = conv3d_ref(&v[..nx], c_in, dims, &v[nx..nx + nw], c_out, 3, &v[nx + nw..]);
                out.iter().map(|o| o.max(0.0)).sum::<f64>() / out.len() as f64
            },
            &all,
            FD_STEP,
        );
        break relative_error(&analytic, &numeric);
    })
}

fn loss_check(
    name: &'static str,
    seed: u64,
    analytic: impl Fn(&LossInstance, &Tensor, &GroundTruth, f64) -> Tensor,
    reference: impl Fn(&LossInstance, &[f64], f64) -> f64,
    gamma_range: (f64, f64),
) -> CheckResult {
    worst_of(name, seed, |r| {
        let inst = loss_instance(r);
        let gamma = r.random_range(gamma_range.0..gamma_range.1);
        let [d, h, w] = inst.dims;
        let probs = tensor(&[inst.l, d, h, w], &inst.probs);
        let gt = GroundTruth::new(inst.dims, inst.labels.clone(), inst.l).unwrap();
        let grad = analytic(&inst, &probs, &gt, gamma);
        let numeric = central_differences(|v| reference(&inst, v, gamma), &inst.probs, FD_STEP);
        relative_error(grad.data(), &numeric)
    })
}

pub fn exp_log_dice(seed: u64) -> CheckResult {
    loss_check(
        "exp_log_dice",
        seed,
        |_, p, gt, g| losses::exp_log_dice(p, gt, 1.0, g, true).unwrap().grad,
        |i, v, g| exp_log_dice_ref(v, &i.labels, i.l, 1.0, g),
        (0.2, 2.5),
    )
}

pub fn weighted_exp_cross_entropy(seed: u64) -> CheckResult {
    loss_check(
        "weighted_exp_cross_entropy",
        seed,
        |i, p, gt, g| losses::weighted_exp_cross_entropy(p, gt, &i.weights, g).unwrap().grad,
        |i, v, g| wce_ref(v, &i.labels, &i.weights, g),
        (0.2, 2.5),
    )
}

pub fn combined(seed: u64) -> CheckResult {
    loss_check(
        "combined (exp_log_combined)",
        seed,
        |i, p, gt, g| {
            let cfg = LossConfig::new(LossKind::ExpLogCombined)
                .with_gamma(g)
                .with_label_weights(i.weights.clone());
            losses::combined_loss(p, gt, &cfg).unwrap().grad
        },
        |i, v, g| combined_ref(v, &i.labels, i.l, &i.weights, g, 0.8, 0.2),
        (0.2, 2.5),
    )
}

pub fn linear_dice(seed: u64) -> CheckResult {
    loss_check(
        "linear_dice",
        seed,
        |_, p, gt, _| losses::linear_dice_loss(p, gt, 1.0).unwrap().grad,
        |i, v, _| linear_dice_ref(v, &i.labels, i.l, 1.0),
        (1.0, 1.5),
    )
}

pub fn focal(seed: u64) -> CheckResult {
    loss_check(
        "focal",
        seed,
        |i, p, gt, g| losses::focal_loss(p, gt, &i.weights, g).unwrap().grad,
        |i, v, g| focal_ref(v, &i.labels, &i.weights, g),
        (0.0, 3.0),
    )
}

pub fn all_ops(seed: u64) -> Vec<CheckResult> {
    vec![
        conv3d(seed),
        maxpool3d(seed + 1),
        upsample3d(seed + 2),
        pointwise(seed + 3),
        softmax(seed + 4),
        composite(seed + 5),
    ]
}

pub fn all_losses(seed: u64) -> Vec<CheckResult> {
    vec![
        exp_log_dice(seed),
        weighted_exp_cross_entropy(seed + 1),
        combined(seed + 2),
        linear_dice(seed + 3),
        focal(seed + 4),
    ]
}

/// Tiny configuration used for the whole-network gradient check. Noise and
/// dropout are disabled so the reference forward needs no replayed masks.
pub fn tiny_network_config() -> elseg_core::elnet::NetworkConfig {
    elseg_core::elnet::NetworkConfig {
        levels: 2,
        base_channels: 2,
        convs: vec![1, 2],
        num_labels: 3,
        extent: 8,
        noise_sigma: 0.0,
        dropout_rate: 0.0,
        ..elseg_core::elnet::NetworkConfig::desk()
    }
}

/// Step for the whole-network check. The reference runs in `f64`, so a step this
/// small keeps rounding negligible while making relu and max-pool switches
/// between the two probes unlikely.
pub const NETWORK_FD_STEP: f64 = 1e-6;

/// Whole-network check of `Σ_x ln p_{y(x)}(x)` for random input and labels in
/// train mode: the library's analytic gradient against central differences of
/// an independent `f64` forward. Returns the relative error over all parameters.
pub fn network(seed: u64) -> CheckResult {
    use elseg_core::elnet::Network;
    use elseg_core::volgrad::Mode;

    let cfg = tiny_network_config();
    let mut r = rng(seed);
    let mut net = Network::new(cfg.clone(), seed).unwrap();
    let e = cfg.extent;
    let n = e * e * e;
    let x = f32_exact(uniform_vec(&mut r, n, -1.0, 1.0));
    let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..cfg.num_labels) as u8).collect();

    let mut g = Graph::new();
    let out = net.forward(&mut g, &tensor(&[1, e, e, e], &x), Mode::Train, &mut r).unwrap();
    let p = g.value(out).clone();
    let mut seed_grad = vec![0.0f32; p.len()];
    for (v, &l) in labels.iter().enumerate() {
        let i = l as usize * n + v;
        seed_grad[i] = 1.0 / p.data()[i];
    }
    let grads = g.backward_from(out, Tensor::new(p.shape().to_vec(), seed_grad).unwrap()).unwrap();

    let names: Vec<String> = net.params().iter().map(|(_, name, _)| name.to_string()).collect();
    let mut values: std::collections::HashMap<String, Vec<f64>> = net
        .params()
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.data().iter().map(|&v| v as f64).collect()))
        .collect();
    let objective = |params: &std::collections::HashMap<String, Vec<f64>>| {
        let probs = reference_network(&cfg, params, &x);
        labels
            .iter()
            .enumerate()
            .map(|(v, &l)| probs[l as usize * n + v].ln())
            .sum::<f64>()
    };

    // the reference forward must agree with the library before its slopes mean anything
    let ref_probs = reference_network(&cfg, &values, &x);
    let forward_gap = p.data().iter().zip(&ref_probs).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(forward_gap < 1e-5, "library and reference forwards differ by {forward_gap:e}");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in &names {
        let id = net.params().id(name).unwrap();
        analytic.extend_from_slice(grads.param(id).unwrap().data());
        for i in 0..values[name].len() {
            let orig = values[name][i];
            values.get_mut(name).unwrap()[i] = orig + NETWORK_FD_STEP;
            let up = objective(&values);
            values.get_mut(name).unwrap()[i] = orig - NETWORK_FD_STEP;
            let down = objective(&values);
            values.get_mut(name).unwrap()[i] = orig;
            numeric.push((up - down) / (2.0 * NETWORK_FD_STEP));
        }
    }
    CheckResult {
        name: "tiny network",
        worst: relative_error(&analytic, &numeric),
        instances: 1,
    }
}

/// Direct `f64` transcription of the architecture: residual blocks of
/// conv → batchnorm (batch statistics) → relu plus a 1×1×1 skip, max pooling
/// between encoder levels, upsample → 1×1×1 channel halving → concat → block in
/// the decoder, supervision heads upsampled and summed with the output logits.
pub fn reference_network(
    cfg: &elseg_core::elnet::NetworkConfig,
    params: &std::collections::HashMap<String, Vec<f64>>,
    x: &[f64],
) -> Vec<f64> {
    let floor = cfg.batchnorm.var_floor as f64;
    let p = |name: &str| params[name].as_slice();
    let conv = |x: &[f64], c_in: usize, dims: [usize; 3], name: &str, c_out: usize, k: usize| {
        conv3d_ref(x, c_in, dims, p(&format!("{name}.w")), c_out, k, p(&format!("{name}.b")))
    };
    let block = |x: &[f64], c_in: usize, dims: [usize; 3], name: &str, n: usize, k: usize| {
        let voxels: usize = dims.iter().product();
        let mut h = x.to_vec();
        let mut c = c_in;
        for j in 0..k {
            h = conv(&h, c, dims, &format!("{name}.conv{j}"), n, 3);
            h = batchnorm_ref(
                &h,
                n,
                voxels,
                p(&format!("{name}.bn{j}.scale")),
                p(&format!("{name}.bn{j}.shift")),
                floor,
            );
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            c = n;
        }
        let skip = conv(x, c_in, dims, &format!("{name}.skip"), n, 1);
        h.iter().zip(&skip).map(|(a, b)| a + b).collect::<Vec<f64>>()
    };
    let ch = |l: usize| cfg.base_channels << l;
    let dims_at = |l: usize| [cfg.extent >> l; 3];
    let l_out = cfg.num_labels;

    let mut skips = Vec::new();
    let mut h = x.to_vec();
    let mut c = 1;
    for l in 0..cfg.levels {
        if l > 0 {
            h = maxpool_ref(&h, c, dims_at(l - 1));
        }
        h = block(&h, c, dims_at(l), &format!("enc{l}"), ch(l), cfg.convs[l]);
        c = ch(l);
        skips.push(h.clone());
    }
    let full: usize = dims_at(0).iter().product();
    let mut logits = vec![0.0; l_out * full];
    let add_head = |h: &[f64], l: usize, logits: &mut Vec<f64>| {
        let name = format!("head{l}");
        if !params.contains_key(&format!("{name}.w")) {
            return;
        }
        let mut y = conv(h, ch(l), dims_at(l), &name, l_out, 1);
        for s in (1..=l).rev() {
            y = upsample_ref(&y, l_out, dims_at(s));
        }
        logits.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
    };
    add_head(&h, cfg.levels - 1, &mut logits);
    for l in (0..cfg.levels - 1).rev() {
        let up = upsample_ref(&h, ch(l + 1), dims_at(l + 1));
        let up = conv(&up, ch(l + 1), dims_at(l), &format!("dec{l}.up"), ch(l), 1);
        let mut cat = skips[l].clone();
        cat.extend(up);
        h = block(&cat, 2 * ch(l), dims_at(l), &format!("dec{l}"), ch(l), cfg.convs[l]);
        if l > 0 {
            add_head(&h, l, &mut logits);
        }
    }
    let out = conv(&h, ch(0), dims_at(0), "out", l_out, 1);
    logits.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
    softmax_ref(&logits, l_out, full)
}
