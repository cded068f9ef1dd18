//! Multi-label loss, SGD, learning-rate schedule and the training loop.

use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{flip_horizontal, resize_longest, Checkpoint, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::net::{FisherNet, Group, LiveGroups};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear map from an encoding to per-class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHead<T> {
    /// C×F
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ScoreHead<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (c, _) = weight.dims2()?;
        if bias.shape() != [c] {
            return Err(shape_err(format!("score bias {:?} for {c} classes", bias.shape())));
        }
        Ok(ScoreHead { weight, bias })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, v: &[T]) -> Result<Vec<T>> {
        let (c, f) = self.weight.dims2()?;
        if v.len() != f {
            return Err(shape_err(format!("score head expects {f} inputs, got {}", v.len())));
        }
        Ok((0..c)
            .map(|r| self.bias.data()[r] + self.weight.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
            .collect())
    }

    /// Adds parameter gradients (when `accumulate`) and returns `d/dv`.
    pub fn backward(
        &self,
        v: &[T],
        d_scores: &[T],
        d_weight: &mut Tensor<T>,
        d_bias: &mut Tensor<T>,
        accumulate: bool,
    ) -> Result<Vec<T>> {
        let (c, f) = self.weight.dims2()?;
        if d_scores.len() != c || v.len() != f {
            return Err(shape_err("score head backward shapes"));
        }
        let mut dv = vec![T::zero(); f];
        for (r, &g) in d_scores.iter().enumerate() {
            if accumulate {
                d_bias.data_mut()[r] += g;
                for (dw, &x) in d_weight.row_mut(r).iter_mut().zip(v) {
                    *dw += g * x;
                }
            }
            for (d, &w) in dv.iter_mut().zip(self.weight.row(r)) {
                *d += g * w;
            }
        }
        Ok(dv)
    }
}

/// Summed sigmoid cross-entropy over classes and its gradient `sigmoid(s) - y`.
pub fn sigmoid_ce_loss<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<(T, Vec<T>)> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        let y = if y == 1 { T::one() } else { T::zero() };
        loss += s.max(T::zero()) - s * y + (-s.abs()).exp().ln_1p();
        let sig = if s >= T::zero() {
            T::one() / (T::one() + (-s).exp())
        } else {
            let e = s.exp();
            e / (T::one() + e)
        };
        grad.push(sig - y);
    }
    Ok((loss, grad))
}

/// `v <- momentum*v - lr*(grad + weight_decay*param); param <- param + v`
pub fn sgd_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *p);
        *p += *v;
    }
}

/// Step schedule `base * factor^floor(iter / step_size)`.
pub fn lr_at(iter: usize, base: f64, step_size: usize, factor: f64) -> f64 {
    if step_size == 0 {
        return base;
    }
    base * factor.powi((iter / step_size) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Whole-image classifier; no Fisher layer.
    Finetune,
    /// Standard Fisher Vectors on frozen features; nothing is trained.
    FvFixed,
    /// Only the Fisher layer and score head learn.
    FisherOnly,
    /// Everything learns end to end.
    Full,
}

impl Regime {
    pub fn live_groups(self) -> LiveGroups {
        match self {
            Regime::Finetune => LiveGroups { trunk: true, head: true, classifier: true, ..Default::default() },
            Regime::FvFixed => LiveGroups::default(),
            Regime::FisherOnly => LiveGroups { fisher: true, score: true, ..Default::default() },
            Regime::Full => LiveGroups { trunk: true, head: true, fisher: true, score: true, classifier: false },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Finetune => "finetune",
            Regime::FvFixed => "fv-fixed",
            Regime::FisherOnly => "fisher-only",
            Regime::Full => "full",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Regime::Finetune),
            "fv-fixed" => Ok(Regime::FvFixed),
            "fisher-only" => Ok(Regime::FisherOnly),
            "full" => Ok(Regime::Full),
            other => Err(Error::InvalidArgument(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Base learning rate per group. The defaults suit training the small
    /// backbone from scratch; a pretrained backbone would use
    /// 0.0001 / 0.0001 / 0.1 / 0.001 for trunk, head, Fisher layer and score.
    pub lr_trunk: f64,
    pub lr_head: f64,
    pub lr_fisher: f64,
    pub lr_score: f64,
    pub lr_classifier: f64,
    pub lr_step: usize,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Longest-side sizes sampled per image; empty keeps the native size.
    pub scales: Vec<usize>,
    pub flip: bool,
    pub seed: u64,
    pub regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 2,
            lr_trunk: 0.001,
            lr_head: 0.001,
            lr_fisher: 0.003,
            lr_score: 0.01,
            lr_classifier: 0.003,
            lr_step: 3000,
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            scales: Vec::new(),
            flip: true,
            seed: 0,
            regime: Regime::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        let lrs = [self.lr_trunk, self.lr_head, self.lr_fisher, self.lr_score, self.lr_classifier];
        if lrs.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::InvalidArgument("learning rates must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn base_lr(&self, g: Group) -> f64 {
        match g {
            Group::Trunk => self.lr_trunk,
            Group::Head => self.lr_head,
            Group::Fisher => self.lr_fisher,
            Group::Score => self.lr_score,
            Group::Classifier => self.lr_classifier,
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocities: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &FisherNet<T>) -> Self {
        OptimizerState { velocities: net.zero_grads() }
    }

    pub fn save(&self, net: &FisherNet<T>, ck: &mut Checkpoint) {
        for (name, v) in net.param_names().iter().zip(&self.velocities) {
            ck.insert(&format!("opt.{name}"), v);
        }
    }

    /// Restores buffers present in `ck`; missing ones start at zero.
    pub fn load(net: &FisherNet<T>, ck: &Checkpoint) -> Result<Self> {
        let mut st = OptimizerState::new(net);
        for (name, v) in net.param_names().iter().zip(st.velocities.iter_mut()) {
            if let Some(t) = ck.get_dyn(&format!("opt.{name}")) {
                if t.shape() != v.shape() {
                    return Err(shape_err(format!("optimizer state `{name}` has the wrong shape")));
                }
                *v = t.to_typed();
            }
        }
        Ok(st)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Draws the training view of an image: optional rescale and horizontal flip.
pub fn augment<T: Scalar, R: Rng>(img: &Tensor<T>, cfg: &TrainConfig, rng: &mut R) -> Result<Tensor<T>> {
    let mut out = match cfg.scales.choose(rng) {
        Some(&s) => resize_longest(img, s)?,
        None => img.clone(),
    };
    if cfg.flip && rng.gen_bool(0.5) {
        out = flip_horizontal(&out)?;
    }
    Ok(out)
}

/// Loss and gradient of one image under `regime`, added into `grads`.
pub fn image_loss_and_grad<T: Scalar>(
    net: &FisherNet<T>,
    image: &Tensor<T>,
    labels: &[u8],
    regime: Regime,
    grads: &mut [Tensor<T>],
) -> Result<T> {
    let live = regime.live_groups();
    match regime {
        Regime::Finetune => {
            let fwd = net.forward_whole(image)?;
            let (loss, d) = sigmoid_ce_loss(&fwd.scores, labels)?;
            net.backward_whole(&fwd, &d, grads, live)?;
            Ok(loss)
        }
        _ => {
            let fwd = net.forward(image, None)?;
            let (loss, d) = sigmoid_ce_loss(&fwd.scores, labels)?;
            net.backward(&fwd, &d, grads, live)?;
            Ok(loss)
        }
    }
}

/// Runs SGD on `net` in place and returns the per-iteration log.
///
/// Images are visited in a seeded random order, reshuffled every epoch. Each
/// iteration averages loss and gradients over `batch_size` images; only
/// groups that are live for the regime and have a positive learning rate
/// are updated.
pub fn train<T: Scalar>(
    net: &mut FisherNet<T>,
    opt: &mut OptimizerState<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&LogRow, &FisherNet<T>, &OptimizerState<T>) -> Result<()>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if data.classes() != net.config.classes {
        return Err(shape_err(format!(
            "dataset has {} classes, network {}",
            data.classes(),
            net.config.classes
        )));
    }
    if opt.velocities.len() != net.params().len() {
        return Err(shape_err("optimizer state does not match the network"));
    }
    let live = cfg.regime.live_groups();
    let groups = net.param_groups();
    let updating: Vec<bool> = groups
        .iter()
        .map(|&g| live.contains(g) && cfg.base_lr(g) > 0.0)
        .collect();
    let mut log = Vec::new();
    if cfg.regime == Regime::FvFixed || !updating.iter().any(|&u| u) {
        info!("regime {} has nothing to train", cfg.regime.name());
        return Ok(log);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let inv_batch = T::one() / T::from_usize_lossy(cfg.batch_size);

    for iter in 0..cfg.iterations {
        let mut grads = net.zero_grads();
        let mut loss = T::zero();
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let img = augment(&data.images()[idx], cfg, &mut rng)?;
            loss += image_loss_and_grad(net, &img, &data.labels()[idx], cfg.regime, &mut grads)?;
        }
        let loss = (loss * inv_batch).as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { iter, loss });
        }
        let schedule = lr_at(iter, 1.0, cfg.lr_step, cfg.lr_factor);
        let (mom, wd) = (T::lit(cfg.momentum), T::lit(cfg.weight_decay));
        for (i, p) in net.params_mut().into_iter().enumerate() {
            if !updating[i] {
                continue;
            }
            let lr = T::lit(cfg.base_lr(groups[i]) * schedule);
            grads[i].scale(inv_batch);
            sgd_step(p.data_mut(), grads[i].data(), opt.velocities[i].data_mut(), lr, mom, wd);
        }
        let row = LogRow {
            iter,
            loss,
            lr: lr_at(iter, cfg.base_lr(primary_group(cfg.regime)), cfg.lr_step, cfg.lr_factor),
        };
        debug!("iter {} loss {:.6} lr {:.3e}", row.iter, row.loss, row.lr);
        on_iter(&row, net, opt)?;
        log.push(row);
    }
    Ok(log)
}

fn primary_group(regime: Regime) -> Group {
    match regime {
        Regime::Finetune => Group::Trunk,
        _ => Group::Fisher,
    }
}

/// `iter,loss,lr` lines with a header.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.iter, r.loss, r.lr));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_at_zero_score() {
        let (l, g) = sigmoid_ce_loss(&[0.0f64], &[1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, vec![-0.5]);
    }

    #[test]
    fn loss_saturated_and_stable() {
        let (l, g) = sigmoid_ce_loss(&[30.0f64], &[1]).unwrap();
        assert!(l <= 1e-12 && g[0].abs() <= 1e-12);
        let (l, g) = sigmoid_ce_loss(&[100.0f64, -100.0, 100.0, -100.0], &[0, 1, 1, 0]).unwrap();
        assert!((l - 200.0).abs() < 1e-9);
        assert!(g.iter().all(|v| v.is_finite()));
        let (l, _) = sigmoid_ce_loss(&[100.0f32, -100.0], &[0, 1]).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn loss_rejects_non_binary_labels() {
        assert!(sigmoid_ce_loss(&[0.0f64], &[2]).is_err());
        assert!(sigmoid_ce_loss(&[0.0f64, 1.0], &[1]).is_err());
    }

    #[test]
    fn sgd_plain_and_momentum() {
        let mut p = [1.0f64, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, [0.95, -2.1]);

        let mut p = [3.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p, [3.0]);

        // two steps on a constant gradient: -lr*g*(1 + 1.9)
        let mut p = [0.0f64];
        let mut v = [0.0];
        let (lr, g) = (0.01, 2.0);
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        assert!((p[0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_pulls_toward_zero() {
        let mut p = [2.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.5, 0.0, 0.1);
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn step_schedule() {
        assert_eq!(lr_at(0, 0.01, 3000, 0.1), 0.01);
        assert!((lr_at(3000, 0.01, 3000, 0.1) - 0.001).abs() < 1e-18);
        assert!((lr_at(6500, 0.5, 3000, 0.1) - 0.005).abs() < 1e-15);
        assert_eq!(lr_at(2999, 0.01, 3000, 0.1), 0.01);
    }

    #[test]
    fn regime_parsing() {
        for r in [Regime::Finetune, Regime::FvFixed, Regime::FisherOnly, Regime::Full] {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
        assert!("nope".parse::<Regime>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { weight_decay: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_head: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
