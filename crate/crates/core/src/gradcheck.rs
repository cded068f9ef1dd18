//! Central finite-difference checks of every analytic gradient.
//!
//! Each check perturbs one scalar at a time by `±eps` and compares
//! `(L(+eps) - L(-eps)) / (2 eps)` against the analytic derivative of a
//! scalar loss. Where the forward pass has max-pooling or ReLU, a
//! perturbation that changes the routing (an argmax or an activity pattern)
//! crosses a kink; such scalars are counted as skipped instead of compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{Init, LayerSpec, Stack};
use crate::error::Result;
use crate::fisher::{fisher_layer_backward, fisher_layer_forward, FisherParams};
use crate::net::{FisherNet, LiveGroups, NetConfig};
use crate::patches::{spp_backward, spp_forward, Rect};
use crate::tensor::Tensor;
use crate::training::sigmoid_ce_loss;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor of [`rel_err`] used by every check here. It equals the
/// finite-difference step: a central difference with step `h` carries an
/// `O(h^2)` truncation error, so derivatives smaller than `h` cannot be
/// resolved to a useful relative accuracy and are compared absolutely
/// (to about `tolerance * h`).
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckResult { name: name.into(), max_rel_err: 0.0, checked: 0, skipped: 0, tolerance }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric, REL_FLOOR);
        if e > self.max_rel_err || e.is_nan() {
            self.max_rel_err = e;
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tolerance
    }

    pub fn merge(&mut self, other: &CheckResult) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_err > self.max_rel_err || other.max_rel_err.is_nan() {
            self.max_rel_err = other.max_rel_err;
        }
    }
}

fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fisher layer gradients for `x`, `w` and `b` on one random instance, with
/// the scalar loss `r . FV` for a random direction `r`.
pub fn check_fisher_layer(m: usize, k: usize, d: usize, eps: f64, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(&[m, d], normal_vec(m * d, &mut rng))?;
    let w = Tensor::from_vec(&[k, d], (0..k * d).map(|_| rng.gen_range(0.5..2.0)).collect())?;
    let b = Tensor::from_vec(&[k, d], normal_vec(k * d, &mut rng))?;
    let params = FisherParams::new(w, b)?;
    let r = normal_vec(2 * k * d, &mut rng);

    let (_, cache) = fisher_layer_forward(&x, &params)?;
    let g = fisher_layer_backward(&cache, &params, &r)?;
    let loss = |x: &Tensor<f64>, p: &FisherParams<f64>| -> Result<f64> {
        Ok(dot(fisher_layer_forward(x, p)?.0.values(), &r))
    };

    let mut res = CheckResult::new(&format!("fisher layer m={m} K={k} D={d}"), tol);
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        res.record(g.dx.data()[i], (loss(&xp, &params)? - loss(&xm, &params)?) / (2.0 * eps));
    }
    for which in 0..2 {
        for i in 0..k * d {
            let mut pp = params.clone();
            let mut pm = params.clone();
            let (tp, tm, a) = if which == 0 {
                (&mut pp.w, &mut pm.w, g.dw.data()[i])
            } else {
                (&mut pp.b, &mut pm.b, g.db.data()[i])
            };
            tp.data_mut()[i] += eps;
            tm.data_mut()[i] -= eps;
            res.record(a, (loss(&x, &pp)? - loss(&x, &pm)?) / (2.0 * eps));
        }
    }
    Ok(res)
}

/// Gradient of the summed sigmoid cross-entropy for random scores.
pub fn check_loss(classes: usize, eps: f64, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<f64> = normal_vec(classes, &mut rng).iter().map(|v| 3.0 * v).collect();
    let y: Vec<u8> = (0..classes).map(|_| u8::from(rng.gen_bool(0.5))).collect();
    let (_, g) = sigmoid_ce_loss(&s, &y)?;
    let mut res = CheckResult::new(&format!("sigmoid cross-entropy C={classes}"), tol);
    for i in 0..classes {
        let mut sp = s.clone();
        sp[i] += eps;
        let mut sm = s.clone();
        sm[i] -= eps;
        let n = (sigmoid_ce_loss(&sp, &y)?.0 - sigmoid_ce_loss(&sm, &y)?.0) / (2.0 * eps);
        res.record(g[i], n);
    }
    Ok(res)
}

/// SPP pooling gradient with respect to the feature map.
pub fn check_spp(eps: f64, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (2, 7, 9);
    let fm = Tensor::from_vec(&[c, h, w], normal_vec(c * h * w, &mut rng))?;
    let rect = Rect::new(1, 1, 7, 5);
    let grid = (2, 3);
    let (out, cache) = spp_forward(&fm, rect, grid)?;
    let r = normal_vec(out.len(), &mut rng);
    let d_out = Tensor::from_vec(out.shape(), r.clone())?;
    let g = spp_backward(&cache, &d_out, fm.shape())?;
    let mut res = CheckResult::new("spp pooling", tol);
    for i in 0..fm.len() {
        let eval = |delta: f64| -> Result<(f64, Vec<usize>)> {
            let mut f = fm.clone();
            f.data_mut()[i] += delta;
            let (o, cc) = spp_forward(&f, rect, grid)?;
            Ok((dot(o.data(), &r), cc.argmax().to_vec()))
        };
        let (lp, ap) = eval(eps)?;
        let (lm, am) = eval(-eps)?;
        if ap != cache.argmax() || am != cache.argmax() {
            res.skipped += 1;
            continue;
        }
        res.record(g.data()[i], (lp - lm) / (2.0 * eps));
    }
    Ok(res)
}

/// Parameter and input gradients of a small conv stack followed by fc layers.
pub fn check_stack(eps: f64, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = [
        LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Fc { out_dim: 5 },
        LayerSpec::Relu,
        LayerSpec::Fc { out_dim: 3 },
    ];
    let input_shape = [2, 8, 8];
    let mut stack: Stack<f64> = Stack::new(&input_shape, &specs, Init::Gaussian(0.5), &mut rng)?;
    for p in stack.params_mut() {
        // non-zero biases keep ReLUs away from exact zeros
        if p.ndim() == 1 {
            p.data_mut().iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = 0.1 * z;
            });
        }
    }
    let x = Tensor::from_vec(&input_shape, normal_vec(2 * 64, &mut rng))?;
    let (out, cache) = stack.forward(&x)?;
    let r = normal_vec(out.len(), &mut rng);
    let mut grads = stack.zero_grads();
    let dx = stack
        .backward(&cache, &Tensor::from_vec(out.shape(), r.clone())?, &mut grads, true)?
        .expect("input gradient");
    let sig = Stack::routing_signature(&cache);
    let mut res = CheckResult::new("conv/fc stack", tol);

    let eval = |s: &Stack<f64>, x: &Tensor<f64>| -> Result<(f64, Vec<u64>)> {
        let (o, c) = s.forward(x)?;
        Ok((dot(o.data(), &r), Stack::routing_signature(&c)))
    };
    let compare = |res: &mut CheckResult, a: f64, p: (f64, Vec<u64>), m: (f64, Vec<u64>)| {
        if p.1 != sig || m.1 != sig {
            res.skipped += 1;
        } else {
            res.record(a, (p.0 - m.0) / (2.0 * eps));
        }
    };
    let n_params = stack.params().len();
    for pi in 0..n_params {
        for i in 0..stack.params()[pi].len() {
            let orig = stack.params()[pi].data()[i];
            stack.params_mut()[pi].data_mut()[i] = orig + eps;
            let lp = eval(&stack, &x)?;
            stack.params_mut()[pi].data_mut()[i] = orig - eps;
            let lm = eval(&stack, &x)?;
            stack.params_mut()[pi].data_mut()[i] = orig;
            compare(&mut res, grads[pi].data()[i], lp, lm);
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        compare(&mut res, dx.data()[i], eval(&stack, &xp)?, eval(&stack, &xm)?);
    }
    Ok(res)
}

/// The tiny end-to-end network: 8×8 single-channel input, one conv stage,
/// SPP 2×2, head fc(4)-relu-fc(3), K=2, C=2.
pub fn tiny_net_config() -> NetConfig {
    NetConfig {
        in_channels: 1,
        image_size: 8,
        trunk: vec![
            LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
        ],
        head_hidden: vec![4],
        descriptor_dim: 3,
        components: 2,
        grid: (2, 2),
        patch_scales: vec![6],
        patch_step: 2,
        classes: 2,
        backbone_init: Init::Gaussian(0.5),
        init_std: 0.5,
    }
}

/// Every trainable scalar of `net` along the patch-based path (trunk, head,
/// Fisher layer, score head), on one image with the given patches and
/// labels.
pub fn check_network(
    net: &mut FisherNet<f64>,
    image: &Tensor<f64>,
    rects: &[Rect],
    labels: &[u8],
    eps: f64,
    tol: f64,
) -> Result<CheckResult> {
    let fwd = net.forward(image, Some(rects))?;
    let (_, d) = sigmoid_ce_loss(&fwd.scores, labels)?;
    let mut grads = net.zero_grads();
    let live = LiveGroups { classifier: false, ..LiveGroups::all() };
    net.backward(&fwd, &d, &mut grads, live)?;
    let sig = fwd.routing_signature();
    let groups = net.param_groups();

    let eval = |n: &FisherNet<f64>| -> Result<(f64, Vec<u64>)> {
        let f = n.forward(image, Some(rects))?;
        Ok((sigmoid_ce_loss(&f.scores, labels)?.0, f.routing_signature()))
    };
    let mut res = CheckResult::new("end-to-end network", tol);
    for pi in 0..grads.len() {
        if !live.contains(groups[pi]) {
            continue;
        }
        for i in 0..grads[pi].len() {
            let orig = net.params()[pi].data()[i];
            net.params_mut()[pi].data_mut()[i] = orig + eps;
            let (lp, sp) = eval(net)?;
            net.params_mut()[pi].data_mut()[i] = orig - eps;
            let (lm, sm) = eval(net)?;
            net.params_mut()[pi].data_mut()[i] = orig;
            if sp != sig || sm != sig {
                res.skipped += 1;
                continue;
            }
            res.record(grads[pi].data()[i], (lp - lm) / (2.0 * eps));
        }
    }
    Ok(res)
}

/// Every trainable scalar along the whole-image path (trunk, head,
/// classifier).
pub fn check_whole_image(
    net: &mut FisherNet<f64>,
    image: &Tensor<f64>,
    labels: &[u8],
    eps: f64,
    tol: f64,
) -> Result<CheckResult> {
    let fwd = net.forward_whole(image)?;
    let (_, d) = sigmoid_ce_loss(&fwd.scores, labels)?;
    let mut grads = net.zero_grads();
    let live = LiveGroups { trunk: true, head: true, classifier: true, ..Default::default() };
    net.backward_whole(&fwd, &d, &mut grads, live)?;
    let sig = fwd.routing_signature();
    let groups = net.param_groups();
    let eval = |n: &FisherNet<f64>| -> Result<(f64, Vec<u64>)> {
        let f = n.forward_whole(image)?;
        Ok((sigmoid_ce_loss(&f.scores, labels)?.0, f.routing_signature()))
    };
    let mut res = CheckResult::new("whole-image network", tol);
    for pi in 0..grads.len() {
        if !live.contains(groups[pi]) {
            continue;
        }
        for i in 0..grads[pi].len() {
            let orig = net.params()[pi].data()[i];
            net.params_mut()[pi].data_mut()[i] = orig + eps;
            let (lp, sp) = eval(net)?;
            net.params_mut()[pi].data_mut()[i] = orig - eps;
            let (lm, sm) = eval(net)?;
            net.params_mut()[pi].data_mut()[i] = orig;
            if sp != sig || sm != sig {
                res.skipped += 1;
                continue;
            }
            res.record(grads[pi].data()[i], (lp - lm) / (2.0 * eps));
        }
    }
    Ok(res)
}

/// A random tiny network with non-trivial Fisher parameters and biases, plus
/// a random image, two overlapping patches and labels `[1, 0]`.
pub fn tiny_instance(seed: u64) -> Result<(FisherNet<f64>, Tensor<f64>, Vec<Rect>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = FisherNet::new(tiny_net_config(), &mut rng)?;
    let (k, d) = (net.config.components, net.config.descriptor_dim);
    net.fisher = FisherParams::new(
        Tensor::from_vec(&[k, d], (0..k * d).map(|_| rng.gen_range(0.5..2.0)).collect())?,
        Tensor::from_vec(&[k, d], normal_vec(k * d, &mut rng))?,
    )?;
    let layout = net.layout();
    for (i, p) in net.params_mut().into_iter().enumerate() {
        if i < layout.fisher && p.ndim() == 1 {
            p.data_mut().iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = 0.1 * z;
            });
        }
    }
    let image = Tensor::from_vec(&[1, 8, 8], normal_vec(64, &mut rng))?;
    let rects = vec![Rect::new(0, 0, 6, 6), Rect::new(2, 2, 6, 6)];
    Ok((net, image, rects, vec![1, 0]))
}

/// The full suite with its default tolerances: Fisher layer, loss, SPP,
/// conv/fc stack, end-to-end and whole-image paths.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut fl = CheckResult::new("fisher layer (20 instances)", 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..20 {
        let (m, k, d) = (rng.gen_range(1..=8), rng.gen_range(1..=5), rng.gen_range(2..=8));
        fl.merge(&check_fisher_layer(m, k, d, 1e-5, 1e-4, seed.wrapping_add(i))?);
    }
    out.push(fl);
    out.push(check_loss(5, 1e-5, 1e-6, seed)?);
    out.push(check_spp(1e-5, 1e-6, seed)?);
    out.push(check_stack(1e-5, 1e-4, seed)?);
    let (mut net, image, rects, labels) = tiny_instance(seed)?;
    out.push(check_network(&mut net, &image, &rects, &labels, 1e-5, 1e-4)?);
    out.push(check_whole_image(&mut net, &image, &labels, 1e-5, 1e-4)?);
    Ok(out)
}

/// `check,max_rel_err,tolerance,checked,skipped,status` lines.
pub fn report(results: &[CheckResult]) -> String {
    let mut s = String::from("check,max_rel_err,tolerance,checked,skipped,status\n");
    for r in results {
        s.push_str(&format!(
            "{},{:.3e},{:.0e},{},{},{}\n",
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.checked,
            r.skipped,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0, 1e-8), 0.0);
        assert!((rel_err(2.0, 1.0, 1e-8) - 0.5).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-12, 1e-8) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn suite_passes() {
        let results = run_suite(1).unwrap();
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
    }
}
