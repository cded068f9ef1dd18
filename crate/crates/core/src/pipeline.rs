//! The training stages end to end: fine-tuning, codebook fitting and the
//! comparison of fixed, Fisher-only and fully trained encoders.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{evaluate, extract_features, mean_ap, train_svm_ova, Encoder, SvmConfig};
use crate::data::{gen_dataset, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gmm::{fit_em, EmConfig, EmFit};
use crate::net::{FisherNet, NetConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{train, OptimizerState, Regime, TrainConfig};

/// Descriptors of every dense patch of every image, stacked (M×D).
pub fn collect_descriptors<T: Scalar>(net: &FisherNet<T>, data: &Dataset<T>) -> Result<Tensor<T>> {
    let d = net.config.descriptor_dim;
    let mut rows = Vec::new();
    for img in data.images() {
        match net.descriptors(img, None) {
            Ok(x) => rows.extend_from_slice(x.data()),
            Err(Error::NoPatches) => continue,
            Err(e) => return Err(e),
        }
    }
    let m = rows.len() / d;
    Tensor::from_vec(&[m, d], rows)
}

/// Fits the codebook on training descriptors and attaches it to `net`.
pub fn fit_codebook<T: Scalar>(net: &mut FisherNet<T>, data: &Dataset<T>, em: &EmConfig) -> Result<EmFit<T>> {
    let x = collect_descriptors(net, data)?;
    info!("fitting {} components on {} descriptors", net.config.components, x.shape()[0]);
    let fit = fit_em(&x, net.config.components, em)?;
    let sig = fit.model.sigmas();
    let mean_sigma = sig.data().iter().map(|v| v.as_f64()).sum::<f64>() / sig.len() as f64;
    info!("codebook mean sigma {mean_sigma:.3e}");
    net.attach_gmm(fit.model.clone())?;
    Ok(fit)
}

/// mAP of the whole-image classifier scores.
pub fn finetune_map<T: Scalar>(net: &FisherNet<T>, test: &Dataset<T>) -> Result<f64> {
    let c = net.config.classes;
    let mut scores = Vec::with_capacity(test.len() * c);
    for img in test.images() {
        scores.extend(net.forward_whole(img)?.scores);
    }
    let scores = Tensor::from_vec(&[test.len(), c], scores)?;
    mean_ap(&evaluate(&scores, test.labels(), &vec![true; c])?)
}

/// Extracts features with `encoder`, trains one-vs-all SVMs on `train` and
/// returns per-class AP on `test`.
pub fn svm_eval<T: Scalar>(
    net: &FisherNet<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    scales: &[usize],
    encoder: Encoder,
    svm: &SvmConfig,
) -> Result<Vec<Option<f64>>> {
    let xtr = extract_features(net, train, scales, encoder)?;
    let xte = extract_features(net, test, scales, encoder)?;
    let model = train_svm_ova(&xtr, train.labels(), svm)?;
    evaluate(&model.decision(&xte)?, test.labels(), &model.trained)
}

/// Settings of one regime comparison run.
#[derive(Debug, Clone)]
pub struct ComparisonPlan {
    pub data: SyntheticSpec,
    pub net: NetConfig,
    pub finetune: TrainConfig,
    pub fisher_only: TrainConfig,
    pub full: TrainConfig,
    pub em: EmConfig,
    pub svm: SvmConfig,
    pub eval_scales: Vec<usize>,
    pub seed: u64,
}

impl ComparisonPlan {
    /// The same plan with every seed replaced by `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.seed = seed;
        p.data.seed = seed;
        p.finetune.seed = seed;
        p.fisher_only.seed = seed;
        p.full.seed = seed;
        p.em.seed = seed;
        p
    }
}

/// Test-set mAP of every regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonReport {
    pub finetune: f64,
    pub fv_fixed: f64,
    pub fisher_only: f64,
    pub full: f64,
}

/// Fine-tunes a fresh network on whole images, fits the codebook on its
/// descriptors, then evaluates the fixed standard FV and trains the
/// Fisher-only and full regimes from that common starting point.
pub fn compare_regimes<T: Scalar>(plan: &ComparisonPlan) -> Result<ComparisonReport> {
    let (train_set, test_set) = gen_dataset::<T>(&plan.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut net = FisherNet::<T>::new(plan.net.clone(), &mut rng)?;

    let ft = TrainConfig { regime: Regime::Finetune, ..plan.finetune.clone() };
    let mut opt = OptimizerState::new(&net);
    train(&mut net, &mut opt, &train_set, &ft, |_, _, _| Ok(()))?;
    let finetune = finetune_map(&net, &test_set)?;
    info!("finetune mAP {finetune:.4}");

    fit_codebook(&mut net, &train_set, &plan.em)?;
    let fv_fixed = mean_ap(&svm_eval(&net, &train_set, &test_set, &plan.eval_scales, Encoder::StandardFv, &plan.svm)?)?;
    info!("fixed FV mAP {fv_fixed:.4}");

    let mut run = |cfg: &TrainConfig, regime: Regime| -> Result<f64> {
        let mut n = net.clone();
        n.reset_score(&mut rng)?;
        let cfg = TrainConfig { regime, ..cfg.clone() };
        let mut opt = OptimizerState::new(&n);
        train(&mut n, &mut opt, &train_set, &cfg, |_, _, _| Ok(()))?;
        mean_ap(&svm_eval(&n, &train_set, &test_set, &plan.eval_scales, Encoder::FisherLayer, &plan.svm)?)
    };
    let fisher_only = run(&plan.fisher_only, Regime::FisherOnly)?;
    info!("fisher-only mAP {fisher_only:.4}");
    let full = if plan.full.iterations == 0 { f64::NAN } else { run(&plan.full, Regime::Full)? };
    info!("full mAP {full:.4}");
    Ok(ComparisonReport { finetune, fv_fixed, fisher_only, full })
}
