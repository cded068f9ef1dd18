//! Feature extraction for evaluation, one-vs-all linear SVMs and AP/mAP.

use log::warn;

use crate::data::{resize_longest, Checkpoint, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::fisher::{l2_normalize, power_normalize};
use crate::net::FisherNet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which encoding feeds the SVM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    /// Trainable Fisher layer with the network's current parameters.
    FisherLayer,
    /// Standard Fisher Vector under the attached codebook.
    StandardFv,
}

/// One feature row per image: encodings averaged over `scales` (longest
/// side in pixels; empty means the native size), then power- and
/// L2-normalized. Scales at which an image yields no patches are skipped.
pub fn extract_features<T: Scalar>(
    net: &FisherNet<T>,
    data: &Dataset<T>,
    scales: &[usize],
    encoder: Encoder,
) -> Result<Tensor<T>> {
    let f = net.config.fv_len();
    let mut out = Vec::with_capacity(data.len() * f);
    for (name, img) in data.names().iter().zip(data.images()) {
        let mut acc = vec![T::zero(); f];
        let mut used = 0usize;
        let views: Vec<Option<usize>> = if scales.is_empty() {
            vec![None]
        } else {
            scales.iter().map(|&s| Some(s)).collect()
        };
        for view in views {
            let resized;
            let im = match view {
                Some(s) => {
                    resized = resize_longest(img, s)?;
                    &resized
                }
                None => img,
            };
            let fv = match encoder {
                Encoder::FisherLayer => net.encode_layer(im),
                Encoder::StandardFv => net.encode_standard(im),
            };
            match fv {
                Ok(fv) => {
                    for (a, &v) in acc.iter_mut().zip(fv.values()) {
                        *a += v;
                    }
                    used += 1;
                }
                Err(Error::NoPatches) => continue,
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(Error::InvalidArgument(format!("image {name} yields no patches at any scale")));
        }
        let inv = T::one() / T::from_usize_lossy(used);
        acc.iter_mut().for_each(|v| *v *= inv);
        out.extend(l2_normalize(&power_normalize(&acc)));
    }
    Tensor::from_vec(&[data.len(), f], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Relative duality-gap tolerance.
    pub tol: f64,
    /// Outer iterations; each is `n` pair updates.
    pub max_outer: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 1.0, tol: 1e-4, max_outer: 1000 }
    }
}

/// One-vs-all linear SVMs. Classes whose training labels were all equal are
/// left untrained (`trained[c] == false`) and score zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel<T> {
    pub c: f64,
    /// classes × features
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub trained: Vec<bool>,
}

impl<T: Scalar> SvmModel<T> {
    pub fn classes(&self) -> usize {
        self.trained.len()
    }

    /// N×C decision values.
    pub fn decision(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, f) = x.dims2()?;
        let (c, wf) = self.weight.dims2()?;
        if f != wf {
            return Err(shape_err(format!("features have {f} columns, SVM expects {wf}")));
        }
        let mut out = Vec::with_capacity(n * c);
        for row in x.rows() {
            for k in 0..c {
                let w = self.weight.row(k);
                out.push(self.bias.data()[k] + w.iter().zip(row).map(|(&a, &b)| a * b).sum::<T>());
            }
        }
        Tensor::from_vec(&[n, c], out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("svm.weight", &self.weight);
        ck.insert("svm.bias", &self.bias);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, c: f64) -> Result<Self> {
        let weight: Tensor<T> = ck.get("svm.weight")?;
        let bias: Tensor<T> = ck.get("svm.bias")?;
        let (k, _) = weight.dims2()?;
        if bias.shape() != [k] {
            return Err(shape_err("svm.bias does not match svm.weight"));
        }
        let trained = (0..k).map(|r| weight.row(r).iter().any(|v| *v != T::zero())).collect();
        Ok(SvmModel { c, weight, bias, trained })
    }
}

/// A trained binary SVM plus the monitored primal objective per outer
/// iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub objective: Vec<f64>,
}

/// Gram matrix of the rows of `x`, in f64.
pub fn gram<T: Scalar>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, _) = x.dims2()?;
    let rows: Vec<Vec<f64>> = x.rows().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    Ok(g)
}

/// Hinge-loss sum `sum_t max(0, -g_t - y_t b)` minimized over `b`, where
/// `g_t = y_t w.x_t - 1`. Returns `(b, loss)`.
fn best_bias(g: &[f64], y: &[f64]) -> (f64, f64) {
    let loss = |b: f64| -> f64 { g.iter().zip(y).map(|(&gt, &yt)| (-gt - yt * b).max(0.0)).sum() };
    // The loss is convex and piecewise linear with kinks at b = -g_t / y_t.
    let mut kinks: Vec<f64> = g.iter().zip(y).map(|(&gt, &yt)| -gt / yt).collect();
    kinks.sort_by(|a, b| a.total_cmp(b));
    kinks.dedup();
    // Slope at b (from the right): -#{y=+1, b < kink} + #{y=-1, b >= kink}.
    let (mut lo, mut hi) = (0usize, kinks.len() - 1);
    let slope_right = |b: f64| -> f64 {
        g.iter()
            .zip(y)
            .map(|(&gt, &yt)| {
                let k = -gt / yt;
                if yt > 0.0 {
                    if b < k { -1.0 } else { 0.0 }
                } else if b >= k {
                    1.0
                } else {
                    0.0
                }
            })
            .sum()
    };
    // First kink whose right slope is non-negative is a minimizer.
    if slope_right(kinks[hi]) < 0.0 {
        let b = kinks[hi];
        return (b, loss(b));
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if slope_right(kinks[mid]) >= 0.0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let b = kinks[lo];
    (b, loss(b))
}

/// Exact minimizer of `1/2 |w|^2 + c * sum max(0, 1 - y_i (w.x_i + b))` with
/// an unregularized bias, by two-coordinate dual ascent on a precomputed
/// Gram matrix.
///
/// After every outer iteration the bias is re-optimized for the current `w`
/// and the primal objective is evaluated; the best iterate so far is kept,
/// so the recorded objective never increases. Stops once the relative
/// duality gap of the kept iterate is below `cfg.tol`.
pub fn train_binary_svm(gram: &[f64], n: usize, y: &[f64], cfg: &SvmConfig) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    if gram.len() != n * n || y.len() != n {
        return Err(shape_err("SVM inputs disagree on the sample count"));
    }
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    if pos == 0 || pos == n {
        return Err(Error::InvalidArgument("SVM needs both classes".into()));
    }
    if !(cfg.c > 0.0) {
        return Err(Error::InvalidArgument("SVM cost must be positive".into()));
    }
    const TAU: f64 = 1e-12;
    let c = cfg.c;
    let q = |i: usize, j: usize| y[i] * y[j] * gram[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut trace = Vec::new();

    for _outer in 0..cfg.max_outer {
        let mut optimal = false;
        for _ in 0..n {
            // maximal violating pair
            let (mut i, mut gmax) = (usize::MAX, f64::NEG_INFINITY);
            let (mut j, mut gmin) = (usize::MAX, f64::INFINITY);
            for t in 0..n {
                let v = -y[t] * grad[t];
                let up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
                let low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
                if up && v > gmax {
                    gmax = v;
                    i = t;
                }
                if low && v < gmin {
                    gmin = v;
                    j = t;
                }
            }
            if i == usize::MAX || j == usize::MAX || gmax - gmin < 1e-12 {
                optimal = true;
                break;
            }
            let (ai, aj) = (alpha[i], alpha[j]);
            if y[i] != y[j] {
                let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(TAU);
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = ai - aj;
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(TAU);
                let delta = (grad[i] - grad[j]) / quad;
                let sum = ai + aj;
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
            for (t, g) in grad.iter_mut().enumerate() {
                *g += q(t, i) * di + q(t, j) * dj;
            }
        }

        // grad_t + 1 = y_t w.x_t, so |w|^2 = sum alpha_t (grad_t + 1).
        let w2: f64 = alpha.iter().zip(&grad).map(|(a, g)| a * (g + 1.0)).sum();
        let (b, hinge) = best_bias(&grad, y);
        let primal = 0.5 * w2 + c * hinge;
        let dual = alpha.iter().sum::<f64>() - 0.5 * w2;
        if best.as_ref().is_none_or(|(p, _, _)| primal < *p) {
            best = Some((primal, alpha.clone(), b));
        }
        let kept = best.as_ref().map(|(p, _, _)| *p).unwrap_or(primal);
        trace.push(kept);
        if optimal || kept - dual <= cfg.tol * kept.abs().max(1e-12) {
            break;
        }
    }
    let (_, alpha, b) = best.expect("at least one outer iteration");
    Ok((alpha, b, trace))
}

/// Binary SVM on feature rows `x` with labels in {-1, +1}.
pub fn train_svm<T: Scalar>(x: &Tensor<T>, y: &[f64], cfg: &SvmConfig) -> Result<BinarySvm> {
    let (n, f) = x.dims2()?;
    let g = gram(x)?;
    let (alpha, bias, objective) = train_binary_svm(&g, n, y, cfg)?;
    let mut weight = vec![0.0; f];
    for (i, row) in x.rows().enumerate() {
        let a = alpha[i] * y[i];
        if a != 0.0 {
            for (w, v) in weight.iter_mut().zip(row) {
                *w += a * v.as_f64();
            }
        }
    }
    Ok(BinarySvm { weight, bias, objective })
}

/// One-vs-all SVMs over the columns of an N×C binary label matrix.
pub fn train_svm_ova<T: Scalar>(x: &Tensor<T>, labels: &[Vec<u8>], cfg: &SvmConfig) -> Result<SvmModel<T>> {
    let (n, f) = x.dims2()?;
    if labels.len() != n {
        return Err(shape_err(format!("{n} feature rows vs {} label rows", labels.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("SVM training needs at least two samples".into()));
    }
    let classes = labels[0].len();
    let g = gram(x)?;
    let mut weight = Tensor::zeros(&[classes, f]);
    let mut bias = Tensor::zeros(&[classes]);
    let mut trained = vec![false; classes];
    for k in 0..classes {
        let y: Vec<f64> = labels.iter().map(|l| if l[k] == 1 { 1.0 } else { -1.0 }).collect();
        let pos = y.iter().filter(|&&v| v > 0.0).count();
        if pos == 0 || pos == n {
            warn!("class {k} has only one label value in training; skipped");
            continue;
        }
        let (alpha, b, _) = train_binary_svm(&g, n, &y, cfg)?;
        let w = weight.row_mut(k);
        for (i, row) in x.rows().enumerate() {
            let a = alpha[i] * y[i];
            if a != 0.0 {
                for (wv, v) in w.iter_mut().zip(row) {
                    *wv += T::lit(a * v.as_f64());
                }
            }
        }
        bias.data_mut()[k] = T::lit(b);
        trained[k] = true;
    }
    Ok(SvmModel { c: cfg.c, weight, bias, trained })
}

/// All-points average precision. Ranks by descending score, ties by
/// ascending index.
pub fn average_precision<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::InvalidArgument("average precision needs a positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN").then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Mean over the defined entries; `None` marks a class whose AP is undefined.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Empty("per-class AP list"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-class AP of decision values (N×C) against binary labels. Classes
/// without a positive test label, or untrained ones, are undefined.
pub fn evaluate<T: Scalar>(scores: &Tensor<T>, labels: &[Vec<u8>], trained: &[bool]) -> Result<Vec<Option<f64>>> {
    let (n, c) = scores.dims2()?;
    if labels.len() != n || trained.len() != c {
        return Err(shape_err("scores, labels and classes disagree"));
    }
    (0..c)
        .map(|k| {
            let col: Vec<T> = (0..n).map(|i| scores.data()[i * c + k]).collect();
            let y: Vec<u8> = labels.iter().map(|l| l[k]).collect();
            if !trained[k] || !y.contains(&1) {
                warn!("AP undefined for class {k}");
                return Ok(None);
            }
            average_precision(&col, &y).map(Some)
        })
        .collect()
}

/// `class,ap` rows followed by a `mAP` row; undefined classes print `nan`.
pub fn ap_csv(per_class: &[Option<f64>]) -> Result<String> {
    let mut s = String::from("class,ap\n");
    for (k, ap) in per_class.iter().enumerate() {
        match ap {
            Some(v) => s.push_str(&format!("{k},{v}\n")),
            None => s.push_str(&format!("{k},nan\n")),
        }
    }
    s.push_str(&format!("mAP,{}\n", mean_ap(per_class)?));
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[0.9f64, 0.8, 0.7], &[1, 0, 1]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.1f64, 0.2, 0.9], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.3f64], &[1]).unwrap(), 1.0);
        assert!(average_precision(&[0.3f64, 0.1], &[0, 0]).is_err());
        // tie goes to the lower index
        assert_eq!(average_precision(&[0.5f64, 0.5], &[1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5f64, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn map_examples() {
        assert_eq!(mean_ap(&[Some(1.0)]).unwrap(), 1.0);
        assert!((mean_ap(&[Some(0.8), Some(0.6)]).unwrap() - 0.7).abs() < 1e-15);
        assert!((mean_ap(&[Some(0.8), None, Some(0.6)]).unwrap() - 0.7).abs() < 1e-15);
        assert!(mean_ap(&[]).is_err());
        assert!(mean_ap(&[None]).is_err());
    }

    #[test]
    fn best_bias_is_minimizer() {
        let g = [-2.0, 0.5, -0.3, 1.0, -1.5];
        let y = [1.0, -1.0, 1.0, -1.0, -1.0];
        let (_, loss) = best_bias(&g, &y);
        for i in -400..=400 {
            let b = i as f64 * 0.01;
            let l: f64 = g.iter().zip(&y).map(|(gt, yt)| (-gt - yt * b).max(0.0)).sum();
            assert!(loss <= l + 1e-12, "b={b}");
        }
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let pts = [[0.0, 0.0], [0.5, 0.3], [0.2, 0.6], [3.0, 3.0], [3.5, 2.6], [2.8, 3.9]];
        let x = Tensor::from_vec(&[6, 2], pts.iter().flatten().copied().collect()).unwrap();
        let y = [-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let svm = train_svm(&x, &y, &SvmConfig::default()).unwrap();
        for (row, &t) in x.rows().zip(&y) {
            let s = svm.bias + svm.weight.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            assert!(s * t > 0.0);
        }
        assert!(svm.objective.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn one_sided_class_is_skipped() {
        let x = Tensor::from_vec(&[2, 1], vec![0.0f64, 1.0]).unwrap();
        let m = train_svm_ova(&x, &[vec![1, 0], vec![1, 1]], &SvmConfig::default()).unwrap();
        assert_eq!(m.trained, vec![false, true]);
        assert!(m.weight.row(0).iter().all(|&v| v == 0.0));
    }
}
