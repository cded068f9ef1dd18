//! Fisher Vector encoding.
//!
//! Two encoders share one output layout, `[G_mu_1 .. G_mu_K, G_sigma_1 .. G_sigma_K]`
//! with `D` values per block:
//!
//! * [`encode_standard_fv`] is the classic fixed encoder driven by a
//!   [`GmmModel`]; it keeps the `1/sqrt(w_k)` weighting and the full
//!   posterior including mixture weights and determinants.
//! * The trainable layer ([`fisher_layer_forward`] / [`fisher_layer_backward`])
//!   reparameterizes each component as a scale `w_k = 1/sigma_k` and a shift
//!   `b_k = -mu_k`, drops mixture weights and determinants, and computes the
//!   posterior as a softmax over `-0.5 * |w_k * (x + b_k)|^2`.
//!
//! For a mixture with uniform weights and equal determinants the two agree up
//! to a global factor of `sqrt(K)`.

use crate::error::{shape_err, Error, Result};
use crate::gmm::{posterior, GmmModel};
use crate::scalar::{softmax_in_place, Scalar};
use crate::tensor::Tensor;

/// Trainable scale and shift of every component, both K×D.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> FisherParams<T> {
    pub fn new(w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let (k, d) = w.dims2()?;
        if b.shape() != w.shape() {
            return Err(shape_err(format!("w {:?} vs b {:?}", w.shape(), b.shape())));
        }
        if k == 0 || d == 0 {
            return Err(Error::InvalidArgument("Fisher layer needs K, D >= 1".into()));
        }
        Ok(FisherParams { w, b })
    }

    pub fn k(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn output_len(&self) -> usize {
        2 * self.k() * self.d()
    }
}

/// `w = 1/sigma`, `b = -mu`, elementwise.
pub fn init_params_from_gmm<T: Scalar>(model: &GmmModel<T>) -> FisherParams<T> {
    let mut w = model.sigmas();
    w.data_mut().iter_mut().for_each(|s| *s = s.recip());
    let mut b = model.means();
    b.data_mut().iter_mut().for_each(|m| *m = -*m);
    FisherParams { w, b }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector<T> {
    k: usize,
    d: usize,
    values: Vec<T>,
}

impl<T: Scalar> FisherVector<T> {
    pub fn from_values(k: usize, d: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != 2 * k * d {
            return Err(shape_err(format!(
                "Fisher vector needs {} values, got {}",
                2 * k * d,
                values.len()
            )));
        }
        Ok(FisherVector { k, d, values })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn mu_block(&self, k: usize) -> &[T] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    pub fn sigma_block(&self, k: usize) -> &[T] {
        let off = (self.k + k) * self.d;
        &self.values[off..off + self.d]
    }
}

fn check_descriptors<T: Scalar>(x: &Tensor<T>, d: usize) -> Result<usize> {
    let (m, dx) = x.dims2()?;
    if m == 0 {
        return Err(Error::Empty("patch descriptors"));
    }
    if dx != d {
        return Err(shape_err(format!("descriptors have {dx} dims, encoder expects {d}")));
    }
    Ok(m)
}

/// Mean-pooled standard Fisher Vector of an m×D descriptor set. No normalization.
pub fn encode_standard_fv<T: Scalar>(
    descriptors: &Tensor<T>,
    model: &GmmModel<T>,
) -> Result<FisherVector<T>> {
    let (k, d) = (model.k(), model.d());
    let m = check_descriptors(descriptors, d)?;
    let inv_sqrt2 = T::FRAC_1_SQRT_2();
    let mut out = vec![T::zero(); 2 * k * d];
    for x in descriptors.rows() {
        let gamma = posterior(x, model)?;
        for c in 0..k {
            let g = gamma[c] / model.weights()[c].sqrt();
            let (mu, sigma) = (model.mean(c), model.sigma(c));
            for dd in 0..d {
                let z = (x[dd] - mu[dd]) / sigma[dd];
                out[c * d + dd] += g * z;
                out[(k + c) * d + dd] += g * inv_sqrt2 * (z * z - T::one());
            }
        }
    }
    let m_t = T::from_usize_lossy(m);
    out.iter_mut().for_each(|v| *v /= m_t);
    FisherVector::from_values(k, d, out)
}

/// Softmax logits `-0.5 * |w_k * (x + b_k)|^2`, one per component.
fn layer_logits<T: Scalar>(x: &[T], params: &FisherParams<T>, y: &mut [T], logits: &mut [T]) {
    let d = params.d();
    let half = T::lit(0.5);
    for (c, logit) in logits.iter_mut().enumerate() {
        let w = &params.w.data()[c * d..(c + 1) * d];
        let b = &params.b.data()[c * d..(c + 1) * d];
        let yk = &mut y[c * d..(c + 1) * d];
        let mut sq = T::zero();
        for dd in 0..d {
            let v = w[dd] * (x[dd] + b[dd]);
            yk[dd] = v;
            sq += v * v;
        }
        *logit = -half * sq;
    }
}

/// Soft assignment of one descriptor under the layer parameters.
pub fn fisher_layer_posterior<T: Scalar>(x: &[T], params: &FisherParams<T>) -> Result<Vec<T>> {
    if x.len() != params.d() {
        return Err(shape_err(format!(
            "descriptor has {} dims, layer expects {}",
            x.len(),
            params.d()
        )));
    }
    let mut y = vec![T::zero(); params.k() * params.d()];
    let mut gamma = vec![T::zero(); params.k()];
    layer_logits(x, params, &mut y, &mut gamma);
    softmax_in_place(&mut gamma);
    Ok(gamma)
}

/// Intermediates kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct FisherCache<T> {
    x: Tensor<T>,
    /// m×K×D values of `w_k * (x_j + b_k)`.
    y: Vec<T>,
    /// m×K posteriors.
    gamma: Vec<T>,
    k: usize,
}

impl<T: Scalar> FisherCache<T> {
    pub fn inputs(&self) -> &Tensor<T> {
        &self.x
    }

    /// Posterior row of patch `j`.
    pub fn posteriors(&self, j: usize) -> &[T] {
        &self.gamma[j * self.k..(j + 1) * self.k]
    }

    pub fn patch_count(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Mean-pooled trainable Fisher encoding of an m×D descriptor set.
pub fn fisher_layer_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &FisherParams<T>,
) -> Result<(FisherVector<T>, FisherCache<T>)> {
    let (k, d) = (params.k(), params.d());
    let m = check_descriptors(x, d)?;
    let inv_sqrt2 = T::FRAC_1_SQRT_2();
    let mut y = vec![T::zero(); m * k * d];
    let mut gamma = vec![T::zero(); m * k];
    let mut out = vec![T::zero(); 2 * k * d];
    for (j, xj) in x.rows().enumerate() {
        let yj = &mut y[j * k * d..(j + 1) * k * d];
        let gj = &mut gamma[j * k..(j + 1) * k];
        layer_logits(xj, params, yj, gj);
        softmax_in_place(gj);
        for c in 0..k {
            let g = gj[c];
            for dd in 0..d {
                let v = yj[c * d + dd];
                out[c * d + dd] += g * v;
                out[(k + c) * d + dd] += g * inv_sqrt2 * (v * v - T::one());
            }
        }
    }
    let m_t = T::from_usize_lossy(m);
    out.iter_mut().for_each(|v| *v /= m_t);
    Ok((
        FisherVector::from_values(k, d, out)?,
        FisherCache {
            x: x.clone(),
            y,
            gamma,
            k,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherGrads<T> {
    /// m×D
    pub dx: Tensor<T>,
    /// K×D
    pub dw: Tensor<T>,
    /// K×D
    pub db: Tensor<T>,
}

/// Gradients of the mean-pooled layer output with respect to inputs and
/// parameters, given the upstream gradient `d_out` (length 2KD).
///
/// The posterior is differentiated through: every `gamma_j(k)` depends on all
/// `w_n, b_n` via the softmax.
pub fn fisher_layer_backward<T: Scalar>(
    cache: &FisherCache<T>,
    params: &FisherParams<T>,
    d_out: &[T],
) -> Result<FisherGrads<T>> {
    let (k, d) = (params.k(), params.d());
    let (m, dx_dim) = cache.x.dims2()?;
    if cache.k != k || dx_dim != d || cache.y.len() != m * k * d {
        return Err(shape_err("cache does not match layer parameters"));
    }
    if d_out.len() != 2 * k * d {
        return Err(shape_err(format!(
            "upstream gradient has {} values, expected {}",
            d_out.len(),
            2 * k * d
        )));
    }
    let inv_m = T::one() / T::from_usize_lossy(m);
    let inv_sqrt2 = T::FRAC_1_SQRT_2();
    let sqrt2 = T::SQRT_2();
    let (g_mu, g_sigma) = d_out.split_at(k * d);

    let mut dx = Tensor::zeros(&[m, d]);
    let mut dw = Tensor::zeros(&[k, d]);
    let mut db = Tensor::zeros(&[k, d]);
    let mut d_gamma = vec![T::zero(); k];
    let mut dy = vec![T::zero(); k * d];

    for j in 0..m {
        let xj = cache.x.row(j);
        let yj = &cache.y[j * k * d..(j + 1) * k * d];
        let gj = &cache.gamma[j * k..(j + 1) * k];

        for c in 0..k {
            let mut acc = T::zero();
            for dd in 0..d {
                let v = yj[c * d + dd];
                acc += g_mu[c * d + dd] * v + g_sigma[c * d + dd] * inv_sqrt2 * (v * v - T::one());
            }
            d_gamma[c] = acc * inv_m;
        }
        // softmax: dL/dlogit_c = gamma_c * (dgamma_c - sum_n gamma_n dgamma_n)
        let mean_dg: T = gj.iter().zip(&d_gamma).map(|(&g, &dg)| g * dg).sum();

        for c in 0..k {
            let d_logit = gj[c] * (d_gamma[c] - mean_dg);
            let g = gj[c] * inv_m;
            for dd in 0..d {
                let v = yj[c * d + dd];
                // direct path through the mu/sigma blocks plus the logit -0.5*|y|^2
                dy[c * d + dd] =
                    g * (g_mu[c * d + dd] + g_sigma[c * d + dd] * sqrt2 * v) - d_logit * v;
            }
        }

        let dxj = dx.row_mut(j);
        for c in 0..k {
            let w = &params.w.data()[c * d..(c + 1) * d];
            let b = &params.b.data()[c * d..(c + 1) * d];
            let dwk = &mut dw.data_mut()[c * d..(c + 1) * d];
            for dd in 0..d {
                dwk[dd] += dy[c * d + dd] * (xj[dd] + b[dd]);
            }
            let dbk = &mut db.data_mut()[c * d..(c + 1) * d];
            for dd in 0..d {
                let t = dy[c * d + dd] * w[dd];
                dbk[dd] += t;
                dxj[dd] += t;
            }
        }
    }
    Ok(FisherGrads { dx, dw, db })
}

/// Elementwise `sign(v) * sqrt(|v|)`.
pub fn power_normalize<T: Scalar>(v: &[T]) -> Vec<T> {
    v.iter()
        .map(|&x| {
            let r = x.abs().sqrt();
            if x < T::zero() {
                -r
            } else {
                r
            }
        })
        .collect()
}

/// `v / |v|_2`, or `v` unchanged when its norm is below 1e-12.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Vec<T> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm < T::lit(1e-12) {
        return v.to_vec();
    }
    v.iter().map(|&x| x / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k: usize, d: usize, w: f64, b: f64) -> FisherParams<f64> {
        FisherParams::new(Tensor::filled(&[k, d], w), Tensor::filled(&[k, d], b)).unwrap()
    }

    #[test]
    fn init_from_gmm_inverts_sigma_and_negates_mean() {
        let model = GmmModel::new(
            vec![0.5, 0.5],
            Tensor::from_vec(&[2, 2], vec![0.0, 1.0, -2.0, 3.0]).unwrap(),
            Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 4.0, 0.5]).unwrap(),
        )
        .unwrap();
        let p = init_params_from_gmm(&model);
        assert_eq!(p.w.data(), &[1.0, 0.5, 0.25, 2.0]);
        assert_eq!(p.b.data(), &[-0.0, -1.0, 2.0, -3.0]);
    }

    #[test]
    fn posterior_degenerate_cases() {
        let p = params(1, 3, 2.0, 1.0);
        assert_eq!(fisher_layer_posterior(&[5.0, -1.0, 0.3], &p).unwrap(), vec![1.0]);
        let p = params(2, 3, 2.0, 1.0);
        assert_eq!(fisher_layer_posterior(&[5.0, -1.0, 0.3], &p).unwrap(), vec![0.5, 0.5]);
        assert!(fisher_layer_posterior(&[5.0, -1.0], &p).is_err());
    }

    #[test]
    fn forward_at_component_centers() {
        // x + b = 0 for every component: mu blocks vanish, sigma blocks are -gamma/sqrt(2).
        let p = params(2, 3, 1.7, -0.4);
        let x = Tensor::filled(&[4, 3], 0.4);
        let (fv, _) = fisher_layer_forward(&x, &p).unwrap();
        for c in 0..2 {
            assert!(fv.mu_block(c).iter().all(|&v| v == 0.0));
            for &v in fv.sigma_block(c) {
                assert!((v + 0.5 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_single_component_is_plain_mean() {
        let p = FisherParams::new(
            Tensor::from_vec(&[1, 2], vec![2.0, 0.5]).unwrap(),
            Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 3.0]).unwrap();
        let (fv, _) = fisher_layer_forward(&x, &p).unwrap();
        // y rows: (2, 0) and (4, 1)
        let s2 = std::f64::consts::SQRT_2;
        let expected = [3.0, 0.5, ((4.0 - 1.0) / s2 + (16.0 - 1.0) / s2) / 2.0, (-1.0 / s2 + 0.0) / 2.0];
        for (a, b) in fv.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_rejects_empty_input() {
        let p = params(2, 3, 1.0, 0.0);
        assert!(fisher_layer_forward(&Tensor::zeros(&[0, 3]), &p).is_err());
        let model = GmmModel::new(vec![1.0], Tensor::zeros(&[1, 3]), Tensor::filled(&[1, 3], 1.0)).unwrap();
        assert!(encode_standard_fv(&Tensor::zeros(&[0, 3]), &model).is_err());
    }

    #[test]
    fn standard_fv_single_component_at_mean() {
        let model = GmmModel::new(
            vec![1.0],
            Tensor::from_vec(&[1, 2], vec![0.3, -0.2]).unwrap(),
            Tensor::from_vec(&[1, 2], vec![1.5, 0.7]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![0.3, -0.2]).unwrap();
        let fv = encode_standard_fv(&x, &model).unwrap();
        assert_eq!(fv.mu_block(0), &[0.0, 0.0]);
        for &v in fv.sigma_block(0) {
            assert!((v + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        }
        let x3 = Tensor::from_vec(&[3, 2], [0.3, -0.2].repeat(3)).unwrap();
        assert_eq!(encode_standard_fv(&x3, &model).unwrap(), fv);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradients() {
        let p = FisherParams::new(
            Tensor::from_vec(&[2, 2], vec![1.0, 0.5, 2.0, 1.5]).unwrap(),
            Tensor::from_vec(&[2, 2], vec![0.1, -0.3, 0.7, 0.0]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_vec(&[3, 2], vec![0.2, 0.4, -1.0, 0.9, 0.0, 0.0]).unwrap();
        let (_, cache) = fisher_layer_forward(&x, &p).unwrap();
        let g = fisher_layer_backward(&cache, &p, &[0.0; 8]).unwrap();
        assert!(g.dx.data().iter().chain(g.dw.data()).chain(g.db.data()).all(|&v| v == 0.0));
        assert!(fisher_layer_backward(&cache, &p, &[0.0; 7]).is_err());
    }

    #[test]
    fn backward_single_component_closed_form() {
        // K = 1: out_mu = mean_j w(x_j+b), out_sigma = mean_j ((w(x_j+b))^2 - 1)/sqrt2.
        // d/dw = mean_j [g_mu (x+b) + g_sigma sqrt2 w (x+b)^2]
        // d/db = mean_j [g_mu w + g_sigma sqrt2 w^2 (x+b)]
        let (w, b) = (1.3, -0.4);
        let xs = [0.5, -0.8, 1.1];
        let p = FisherParams::new(Tensor::filled(&[1, 1], w), Tensor::filled(&[1, 1], b)).unwrap();
        let x = Tensor::from_vec(&[3, 1], xs.to_vec()).unwrap();
        let (_, cache) = fisher_layer_forward(&x, &p).unwrap();
        let (gm, gs) = (0.7, -1.9);
        let g = fisher_layer_backward(&cache, &p, &[gm, gs]).unwrap();
        let s2 = std::f64::consts::SQRT_2;
        let dw: f64 = xs.iter().map(|&x| gm * (x + b) + gs * s2 * w * (x + b).powi(2)).sum::<f64>() / 3.0;
        let db: f64 = xs.iter().map(|&x| gm * w + gs * s2 * w * w * (x + b)).sum::<f64>() / 3.0;
        assert!((g.dw.data()[0] - dw).abs() < 1e-14);
        assert!((g.db.data()[0] - db).abs() < 1e-14);
        for (j, &xv) in xs.iter().enumerate() {
            let dxj = (gm * w + gs * s2 * w * w * (xv + b)) / 3.0;
            assert!((g.dx.data()[j] - dxj).abs() < 1e-14);
        }
    }

    #[test]
    fn normalizations() {
        assert_eq!(power_normalize(&[4.0f64, -9.0]), vec![2.0, -3.0]);
        assert_eq!(power_normalize(&[0.0f64, 0.0]), vec![0.0, 0.0]);
        assert_eq!(power_normalize(&[1.0f64, -1.0]), vec![1.0, -1.0]);
        let v = l2_normalize(&[3.0f64, 4.0]);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[0.0f64, 1.0]), vec![0.0, 1.0]);
        assert_eq!(l2_normalize(&[0.0f64, 0.0]), vec![0.0, 0.0]);
    }
}
