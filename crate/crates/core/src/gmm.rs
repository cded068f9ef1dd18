//! Diagonal-covariance Gaussian mixtures: densities, soft assignments and EM.
//!
//! All probability arithmetic happens in log space. Responsibilities are
//! normalized with a log-sum-exp shift so a descriptor far from every
//! component still receives a valid distribution over components.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::Tensor;

/// Mixture of `k` axis-aligned Gaussians in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel<T> {
    k: usize,
    d: usize,
    weights: Vec<T>,
    /// k×d, row-major.
    means: Vec<T>,
    /// k×d standard deviations.
    sigmas: Vec<T>,
}

impl<T: Scalar> GmmModel<T> {
    pub fn new(weights: Vec<T>, means: Tensor<T>, sigmas: Tensor<T>) -> Result<Self> {
        let (k, d) = means.dims2()?;
        if k == 0 || d == 0 {
            return Err(Error::InvalidArgument("GMM needs K >= 1 and D >= 1".into()));
        }
        if sigmas.shape() != means.shape() || weights.len() != k {
            return Err(shape_err(format!(
                "weights {} / means {:?} / sigmas {:?}",
                weights.len(),
                means.shape(),
                sigmas.shape()
            )));
        }
        if weights.iter().any(|&w| !(w > T::zero()) || !w.is_finite()) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        let total: T = weights.iter().copied().sum();
        let tol = T::lit(1e-12).max(T::epsilon() * T::from_usize_lossy(16 * k));
        if (total - T::one()).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if sigmas.data().iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(Error::InvalidArgument("sigmas must be positive and finite".into()));
        }
        if !means.is_finite() {
            return Err(Error::InvalidArgument("means must be finite".into()));
        }
        Ok(GmmModel {
            k,
            d,
            weights,
            means: means.into_data(),
            sigmas: sigmas.into_data(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[T] {
        &self.means[k * self.d..(k + 1) * self.d]
    }

    pub fn sigma(&self, k: usize) -> &[T] {
        &self.sigmas[k * self.d..(k + 1) * self.d]
    }

    pub fn means(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.k, self.d], self.means.clone()).expect("k×d")
    }

    pub fn sigmas(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.k, self.d], self.sigmas.clone()).expect("k×d")
    }

    /// Per-component `ln ω_k + ln u_k(x)`.
    pub fn weighted_log_densities(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d {
            return Err(shape_err(format!(
                "descriptor has {} dims, model has {}",
                x.len(),
                self.d
            )));
        }
        Ok((0..self.k)
            .map(|k| self.weights[k].ln() + log_density_unchecked(x, self.mean(k), self.sigma(k)))
            .collect())
    }

    /// Reorders components; used by permutation-invariance checks.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.k {
            return Err(shape_err("permutation length"));
        }
        let mut weights = Vec::with_capacity(self.k);
        let mut means = Vec::with_capacity(self.k * self.d);
        let mut sigmas = Vec::with_capacity(self.k * self.d);
        for &k in order {
            weights.push(self.weights[k]);
            means.extend_from_slice(self.mean(k));
            sigmas.extend_from_slice(self.sigma(k));
        }
        GmmModel::new(
            weights,
            Tensor::from_vec(&[self.k, self.d], means)?,
            Tensor::from_vec(&[self.k, self.d], sigmas)?,
        )
    }
}

fn log_density_unchecked<T: Scalar>(x: &[T], mu: &[T], sigma: &[T]) -> T {
    let half = T::lit(0.5);
    let mut log_det = T::zero();
    let mut quad = T::zero();
    for ((&xd, &md), &sd) in x.iter().zip(mu).zip(sigma) {
        let z = (xd - md) / sd;
        quad += z * z;
        log_det += sd.ln();
    }
    let d = T::from_usize_lossy(x.len());
    -half * d * (T::TAU()).ln() - log_det - half * quad
}

/// `ln u(x)` for a diagonal Gaussian with per-dimension standard deviations.
pub fn gaussian_log_density<T: Scalar>(x: &[T], mu: &[T], sigma: &[T]) -> Result<T> {
    if x.len() != mu.len() || x.len() != sigma.len() {
        return Err(shape_err(format!(
            "x {} / mu {} / sigma {}",
            x.len(),
            mu.len(),
            sigma.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Empty("descriptor"));
    }
    if sigma.iter().any(|&s| !(s > T::zero())) {
        return Err(Error::InvalidArgument("sigma must be strictly positive".into()));
    }
    Ok(log_density_unchecked(x, mu, sigma))
}

/// Soft assignment of `x` to each component.
pub fn posterior<T: Scalar>(x: &[T], model: &GmmModel<T>) -> Result<Vec<T>> {
    let mut logp = model.weighted_log_densities(x)?;
    let lse = log_sum_exp(&logp);
    for v in logp.iter_mut() {
        *v = (*v - lse).exp();
    }
    Ok(logp)
}

/// Mean per-descriptor log-likelihood of an M×D descriptor matrix.
pub fn log_likelihood<T: Scalar>(descriptors: &Tensor<T>, model: &GmmModel<T>) -> Result<T> {
    let (m, d) = descriptors.dims2()?;
    if m == 0 {
        return Err(Error::Empty("descriptor set"));
    }
    if d != model.d {
        return Err(shape_err(format!("descriptors have {d} dims, model {}", model.d)));
    }
    let mut total = T::zero();
    for x in descriptors.rows() {
        total += log_sum_exp(&model.weighted_log_densities(x)?);
    }
    Ok(total / T::from_usize_lossy(m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement falls below this.
    pub tol: f64,
    /// Absolute lower bound on every per-dimension variance.
    pub variance_floor: f64,
    /// Lower bound relative to the global per-dimension data variance.
    pub relative_variance_floor: f64,
    /// At most this many descriptors (sampled without replacement) enter EM.
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 100,
            tol: 1e-6,
            variance_floor: 1e-4,
            relative_variance_floor: 1e-4,
            sample_count: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit<T> {
    pub model: GmmModel<T>,
    /// Mean log-likelihood of the initial model followed by one entry per M-step.
    pub log_likelihoods: Vec<T>,
    pub converged: bool,
}

/// Fits a `k`-component mixture with EM.
///
/// Means start from k-means++ seeds, sigmas from the global per-dimension
/// spread, weights uniform. Variances are clamped to
/// `max(variance_floor, relative_variance_floor * global variance)`, which
/// is the constrained maximizer of the M-step and keeps EM monotone.
pub fn fit_em<T: Scalar>(descriptors: &Tensor<T>, k: usize, cfg: &EmConfig) -> Result<EmFit<T>> {
    let (m_all, d) = descriptors.dims2()?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    if m_all < k {
        return Err(Error::InvalidArgument(format!(
            "need at least K={k} descriptors, got {m_all}"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("descriptor dimension is zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let data: Vec<&[T]> = if m_all > cfg.sample_count.max(k) {
        let mut picked = index::sample(&mut rng, m_all, cfg.sample_count.max(k)).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| descriptors.row(i)).collect()
    } else {
        descriptors.rows().collect()
    };
    let m = data.len();
    let m_t = T::from_usize_lossy(m);

    let mut global_mean = vec![T::zero(); d];
    for x in &data {
        for (g, &v) in global_mean.iter_mut().zip(x.iter()) {
            *g += v;
        }
    }
    global_mean.iter_mut().for_each(|g| *g /= m_t);
    let mut global_var = vec![T::zero(); d];
    for x in &data {
        for ((g, &v), &mu) in global_var.iter_mut().zip(x.iter()).zip(&global_mean) {
            *g += (v - mu) * (v - mu);
        }
    }
    global_var.iter_mut().for_each(|g| *g /= m_t);
    let floor: Vec<T> = global_var
        .iter()
        .map(|&v| T::lit(cfg.variance_floor).max(T::lit(cfg.relative_variance_floor) * v))
        .collect();

    let mut weights = vec![T::one() / T::from_usize_lossy(k); k];
    let mut means = kmeans_pp_seeds(&data, k, &mut rng);
    let mut sigmas: Vec<T> = (0..k)
        .flat_map(|_| global_var.iter().zip(&floor).map(|(&v, &f)| v.max(f).sqrt()))
        .collect();

    let mut resp = vec![T::zero(); m * k];
    let mut log_likelihoods = Vec::new();
    let mut converged = false;
    let min_weight = T::lit(1e-10);

    for iter in 0..=cfg.max_iters {
        // E-step
        let model = GmmModel {
            k,
            d,
            weights: weights.clone(),
            means: means.clone(),
            sigmas: sigmas.clone(),
        };
        let mut total = T::zero();
        for (j, x) in data.iter().enumerate() {
            let row = &mut resp[j * k..(j + 1) * k];
            let logp = model.weighted_log_densities(x)?;
            let lse = log_sum_exp(&logp);
            for (r, &lp) in row.iter_mut().zip(&logp) {
                *r = (lp - lse).exp();
            }
            total += lse;
        }
        let ll = total / m_t;
        if let Some(&prev) = log_likelihoods.last() {
            let prev: T = prev;
            if (ll - prev).abs() <= T::lit(cfg.tol) * prev.abs() {
                converged = true;
            }
        }
        log_likelihoods.push(ll);
        if converged || iter == cfg.max_iters {
            break;
        }

        // M-step
        for c in 0..k {
            let nk: T = (0..m).map(|j| resp[j * k + c]).sum();
            if !(nk > min_weight) {
                // Starved component: keep its shape, shrink its weight.
                weights[c] = min_weight / m_t;
                continue;
            }
            weights[c] = nk / m_t;
            let mu = &mut means[c * d..(c + 1) * d];
            mu.iter_mut().for_each(|v| *v = T::zero());
            for (j, x) in data.iter().enumerate() {
                let r = resp[j * k + c];
                for (a, &v) in mu.iter_mut().zip(x.iter()) {
                    *a += r * v;
                }
            }
            mu.iter_mut().for_each(|v| *v /= nk);
            let mut var = vec![T::zero(); d];
            for (j, x) in data.iter().enumerate() {
                let r = resp[j * k + c];
                for ((a, &v), &u) in var.iter_mut().zip(x.iter()).zip(mu.iter()) {
                    *a += r * (v - u) * (v - u);
                }
            }
            for (dd, v) in var.into_iter().enumerate() {
                sigmas[c * d + dd] = (v / nk).max(floor[dd]).sqrt();
            }
        }
        let wsum: T = weights.iter().copied().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
    }

    let model = GmmModel::new(
        weights,
        Tensor::from_vec(&[k, d], means)?,
        Tensor::from_vec(&[k, d], sigmas)?,
    )?;
    Ok(EmFit {
        model,
        log_likelihoods,
        converged,
    })
}

fn kmeans_pp_seeds<T: Scalar>(data: &[&[T]], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let m = data.len();
    let d = data[0].len();
    let mut centers: Vec<T> = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..m);
    centers.extend_from_slice(data[first]);
    let sq = |a: &[T], b: &[T]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let t = (x - y).as_f64();
                t * t
            })
            .sum()
    };
    let mut dist: Vec<f64> = data.iter().map(|x| sq(x, data[first])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = m - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.gen_range(0..m)
        };
        centers.extend_from_slice(data[pick]);
        for (dv, x) in dist.iter_mut().zip(data) {
            *dv = dv.min(sq(x, data[pick]));
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn model_1d(weights: Vec<f64>, means: Vec<f64>, sigmas: Vec<f64>) -> GmmModel<f64> {
        let k = weights.len();
        GmmModel::new(
            weights,
            Tensor::from_vec(&[k, 1], means).unwrap(),
            Tensor::from_vec(&[k, 1], sigmas).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn log_density_standard_normal() {
        let v = gaussian_log_density(&[0.0f64], &[0.0], &[1.0]).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        let v = gaussian_log_density(&[1.0f64], &[0.0], &[1.0]).unwrap();
        assert!((v - (-1.418_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn log_density_two_dims_matches_direct_formula() {
        // Scalar density of each independent dimension, multiplied, then logged.
        let pdf = |x: f64, m: f64, s: f64| {
            (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
        };
        let expected = (pdf(1.0, 0.0, 1.0) * pdf(2.0, 0.0, 2.0)).ln();
        let v = gaussian_log_density(&[1.0f64, 2.0], &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn log_density_rejects_bad_input() {
        assert!(gaussian_log_density(&[0.0f64, 1.0], &[0.0], &[1.0]).is_err());
        assert!(gaussian_log_density(&[0.0f64], &[0.0], &[0.0]).is_err());
        assert!(gaussian_log_density(&[0.0f64], &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn model_validation() {
        let bad_weights = GmmModel::new(
            vec![0.5f64, 0.6],
            Tensor::zeros(&[2, 1]),
            Tensor::filled(&[2, 1], 1.0),
        );
        assert!(bad_weights.is_err());
        let bad_sigma = GmmModel::new(
            vec![1.0f64],
            Tensor::zeros(&[1, 1]),
            Tensor::zeros(&[1, 1]),
        );
        assert!(bad_sigma.is_err());
    }

    #[test]
    fn posterior_trivial_cases() {
        let m = model_1d(vec![1.0], vec![3.0], vec![2.0]);
        assert_eq!(posterior(&[-100.0], &m).unwrap(), vec![1.0]);
        let m = model_1d(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]);
        let g = posterior(&[0.0], &m).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_far_from_all_components_is_still_normalized() {
        let m = model_1d(vec![0.3, 0.7], vec![-1.0, 1.0], vec![0.01, 0.02]);
        let g = posterior(&[1e3], &m).unwrap();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g[1] > 0.999);
    }

    #[test]
    fn log_likelihood_reduces_to_density() {
        let m = model_1d(vec![1.0], vec![0.0], vec![1.0]);
        let x = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let ll = log_likelihood(&x, &m).unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);
        let empty = Tensor::<f64>::zeros(&[0, 1]);
        assert!(log_likelihood(&empty, &m).is_err());
    }

    #[test]
    fn em_rejects_too_few_descriptors() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(fit_em(&x, 3, &EmConfig::default()).is_err());
    }

    #[test]
    fn em_identical_points_hit_variance_floor() {
        let x = Tensor::from_vec(&[10, 2], [1.5f64, -2.0].repeat(10)).unwrap();
        let fit = fit_em(&x, 1, &EmConfig::default()).unwrap();
        assert_eq!(fit.model.mean(0), &[1.5, -2.0]);
        for &s in fit.model.sigma(0) {
            assert!((s * s - 1e-4).abs() < 1e-16);
        }
        // K > 1 on degenerate data still succeeds.
        let fit = fit_em(&x, 3, &EmConfig::default()).unwrap();
        assert!((fit.model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn em_recovers_two_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rows = Vec::new();
        let n_pos = 300;
        let n_neg = 700;
        for i in 0..(n_pos + n_neg) {
            let c: f64 = if i < n_pos { 10.0 } else { -10.0 };
            rows.push(c + noise.sample(&mut rng));
            rows.push(c + noise.sample(&mut rng));
        }
        let x = Tensor::from_vec(&[n_pos + n_neg, 2], rows).unwrap();
        let fit = fit_em(&x, 2, &EmConfig { seed: 3, ..Default::default() }).unwrap();
        let (pos, neg) = if fit.model.mean(0)[0] > 0.0 { (0, 1) } else { (1, 0) };
        for &v in fit.model.mean(pos) {
            assert!((v - 10.0).abs() < 0.1);
        }
        for &v in fit.model.mean(neg) {
            assert!((v + 10.0).abs() < 0.1);
        }
        assert!((fit.model.weights()[pos] - 0.3).abs() < 0.05);
        assert!((fit.model.weights()[neg] - 0.7).abs() < 0.05);
    }

    #[test]
    fn em_subsamples_deterministically() {
        let x = Tensor::from_vec(&[50, 1], (0..50).map(|i| (i as f64).sin()).collect()).unwrap();
        let cfg = EmConfig { sample_count: 20, seed: 9, ..Default::default() };
        let a = fit_em(&x, 2, &cfg).unwrap();
        let b = fit_em(&x, 2, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log_likelihoods, b.log_likelihoods);
    }
}
