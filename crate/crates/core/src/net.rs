//! The full network: shared trunk, per-patch pooling and head, Fisher layer
//! and score head, plus the whole-image classifier used for the initial
//! fine-tuning stage.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{Init, LayerSpec, Stack, StackCache};
use crate::data::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::fisher::{
    encode_standard_fv, fisher_layer_backward, fisher_layer_forward, FisherCache, FisherParams,
    FisherVector,
};
use crate::gmm::GmmModel;
use crate::patches::{dense_patches, project_rect, spp_backward_into, spp_forward, Rect, SppCache};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::ScoreHead;

/// Architecture and encoding hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Nominal input side, only used to validate the trunk at construction.
    pub image_size: usize,
    pub trunk: Vec<LayerSpec>,
    /// Hidden fc widths of the head; a ReLU follows each.
    pub head_hidden: Vec<usize>,
    /// Descriptor dimension D.
    pub descriptor_dim: usize,
    /// Mixture components K.
    pub components: usize,
    pub grid: (usize, usize),
    pub patch_scales: Vec<usize>,
    pub patch_step: usize,
    pub classes: usize,
    /// Trunk and head weights.
    pub backbone_init: Init,
    /// Std of the Gaussian score and classifier weights.
    pub init_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            image_size: 64,
            trunk: vec![
                LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv { out_channels: 32, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
            ],
            head_hidden: vec![128],
            descriptor_dim: 64,
            components: 32,
            grid: (3, 3),
            patch_scales: vec![16, 24, 32, 48],
            patch_step: 8,
            classes: 4,
            backbone_init: Init::Gaussian(0.01),
            init_std: 0.01,
        }
    }
}

impl NetConfig {
    pub fn head_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for &h in &self.head_hidden {
            specs.push(LayerSpec::Fc { out_dim: h });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Fc { out_dim: self.descriptor_dim });
        specs
    }

    pub fn fv_len(&self) -> usize {
        2 * self.components * self.descriptor_dim
    }
}

/// Trainable parameter groups; each has its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Trunk,
    Head,
    Fisher,
    Score,
    /// Whole-image classifier of the fine-tuning stage.
    Classifier,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Trunk, Group::Head, Group::Fisher, Group::Score, Group::Classifier];
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherNet<T> {
    pub config: NetConfig,
    pub trunk: Stack<T>,
    pub head: Stack<T>,
    pub fisher: FisherParams<T>,
    pub score: ScoreHead<T>,
    pub classifier: ScoreHead<T>,
    pub gmm: Option<GmmModel<T>>,
}

/// Everything the backward pass of one image needs.
#[derive(Debug, Clone)]
pub struct ImageForward<T> {
    trunk_cache: StackCache<T>,
    featmap_shape: Vec<usize>,
    patches: Vec<(SppCache, StackCache<T>)>,
    fisher_cache: FisherCache<T>,
    pub fv: FisherVector<T>,
    pub scores: Vec<T>,
}

/// Whole-image (fine-tuning) forward state.
#[derive(Debug, Clone)]
pub struct WholeImageForward<T> {
    trunk_cache: StackCache<T>,
    featmap_shape: Vec<usize>,
    spp: SppCache,
    head_cache: StackCache<T>,
    descriptor: Tensor<T>,
    pub scores: Vec<T>,
}

impl<T: Scalar> ImageForward<T> {
    /// Pooling argmaxes and ReLU patterns of the whole forward pass.
    pub fn routing_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        self.trunk_cache.routing_signature(&mut sig);
        for (spp, head) in &self.patches {
            sig.extend(spp.argmax().iter().map(|&i| i as u64));
            head.routing_signature(&mut sig);
        }
        sig
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }
}

impl<T: Scalar> WholeImageForward<T> {
    pub fn routing_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        self.trunk_cache.routing_signature(&mut sig);
        sig.extend(self.spp.argmax().iter().map(|&i| i as u64));
        self.head_cache.routing_signature(&mut sig);
        sig
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LiveGroups {
    pub trunk: bool,
    pub head: bool,
    pub fisher: bool,
    pub score: bool,
    pub classifier: bool,
}

impl LiveGroups {
    pub fn all() -> Self {
        LiveGroups { trunk: true, head: true, fisher: true, score: true, classifier: true }
    }

    pub fn contains(&self, g: Group) -> bool {
        match g {
            Group::Trunk => self.trunk,
            Group::Head => self.head,
            Group::Fisher => self.fisher,
            Group::Score => self.score,
            Group::Classifier => self.classifier,
        }
    }
}

fn gaussian<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor<T>> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("init std: {e}")))?;
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(normal.sample(rng))).collect())
}

impl<T: Scalar> FisherNet<T> {
    /// Fresh network: Gaussian weights, zero biases, and a placeholder Fisher
    /// layer (`w = 1`, `b = 0`) until a codebook is attached.
    pub fn new<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        if config.classes == 0 || config.components == 0 || config.descriptor_dim == 0 {
            return Err(Error::InvalidArgument("classes, K and D must be positive".into()));
        }
        let trunk = Stack::new(
            &[config.in_channels, config.image_size, config.image_size],
            &config.trunk,
            config.backbone_init,
            rng,
        )?;
        let fm = trunk.output_shape(&[config.in_channels, config.image_size, config.image_size])?;
        let (gh, gw) = config.grid;
        let head = Stack::new(&[fm[0], gh, gw], &config.head_specs(), config.backbone_init, rng)?;
        let (k, d) = (config.components, config.descriptor_dim);
        let fisher = FisherParams::new(Tensor::filled(&[k, d], T::one()), Tensor::zeros(&[k, d]))?;
        let score = ScoreHead::new(
            gaussian(&[config.classes, 2 * k * d], config.init_std, rng)?,
            Tensor::zeros(&[config.classes]),
        )?;
        let classifier = ScoreHead::new(
            gaussian(&[config.classes, d], config.init_std, rng)?,
            Tensor::zeros(&[config.classes]),
        )?;
        Ok(FisherNet { config, trunk, head, fisher, score, classifier, gmm: None })
    }

    /// Stores the codebook and initializes the Fisher layer from it.
    pub fn attach_gmm(&mut self, gmm: GmmModel<T>) -> Result<()> {
        if gmm.k() != self.config.components || gmm.d() != self.config.descriptor_dim {
            return Err(shape_err(format!(
                "codebook is {}×{}, network expects {}×{}",
                gmm.k(),
                gmm.d(),
                self.config.components,
                self.config.descriptor_dim
            )));
        }
        self.fisher = crate::fisher::init_params_from_gmm(&gmm);
        self.gmm = Some(gmm);
        Ok(())
    }

    /// Re-draws the score head from `N(0, init_std^2)`.
    pub fn reset_score<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let (c, f) = (self.config.classes, self.config.fv_len());
        self.score = ScoreHead::new(gaussian(&[c, f], self.config.init_std, rng)?, Tensor::zeros(&[c]))?;
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.trunk.total_stride()
    }

    pub fn patch_rects(&self, img_h: usize, img_w: usize) -> Result<Vec<Rect>> {
        dense_patches(img_w, img_h, &self.config.patch_scales, self.config.patch_step)
    }

    fn feature_rects(&self, rects: &[Rect], fm_shape: &[usize]) -> Vec<Rect> {
        let stride = self.total_stride();
        rects
            .iter()
            .map(|&r| project_rect(r, stride, fm_shape[2], fm_shape[1]))
            .collect()
    }

    /// Per-patch descriptors (m×D) of one image. The trunk runs once.
    pub fn descriptors(&self, image: &Tensor<T>, rects: Option<&[Rect]>) -> Result<Tensor<T>> {
        let (_, h, w) = image.dims3()?;
        let (featmap, _) = self.trunk.forward(image)?;
        let owned;
        let rects = match rects {
            Some(r) => r,
            None => {
                owned = self.patch_rects(h, w)?;
                &owned
            }
        };
        self.pooled_descriptors(&featmap, &self.feature_rects(rects, featmap.shape()))
    }

    fn pooled_descriptors(&self, featmap: &Tensor<T>, frects: &[Rect]) -> Result<Tensor<T>> {
        let d = self.config.descriptor_dim;
        let mut out = Vec::with_capacity(frects.len() * d);
        for &r in frects {
            let (pooled, _) = spp_forward(featmap, r, self.config.grid)?;
            let (desc, _) = self.head.forward(&pooled)?;
            out.extend_from_slice(desc.data());
        }
        Tensor::from_vec(&[frects.len(), d], out)
    }

    /// Descriptors computed by cropping every patch and running the trunk on
    /// each crop separately. Same head, no shared computation.
    pub fn descriptors_per_patch(&self, image: &Tensor<T>, rects: &[Rect]) -> Result<Tensor<T>> {
        let (c, h, w) = image.dims3()?;
        let d = self.config.descriptor_dim;
        let mut out = Vec::with_capacity(rects.len() * d);
        for r in rects {
            if !r.fits_in(w, h) {
                return Err(shape_err(format!("patch {r:?} outside the image")));
            }
            let mut crop = Vec::with_capacity(c * r.w * r.h);
            for ch in 0..c {
                for y in r.y0..r.y0 + r.h {
                    let row = ch * h * w + y * w;
                    crop.extend_from_slice(&image.data()[row + r.x0..row + r.x0 + r.w]);
                }
            }
            let crop = Tensor::from_vec(&[c, r.h, r.w], crop)?;
            let (fm, _) = self.trunk.forward(&crop)?;
            let full = Rect::new(0, 0, fm.shape()[2], fm.shape()[1]);
            let (pooled, _) = spp_forward(&fm, full, self.config.grid)?;
            let (desc, _) = self.head.forward(&pooled)?;
            out.extend_from_slice(desc.data());
        }
        Tensor::from_vec(&[rects.len(), d], out)
    }

    /// Un-normalized trainable Fisher encoding of an image.
    pub fn encode_layer(&self, image: &Tensor<T>) -> Result<FisherVector<T>> {
        let x = self.descriptors(image, None)?;
        Ok(fisher_layer_forward(&x, &self.fisher)?.0)
    }

    /// Un-normalized standard Fisher Vector under the attached codebook.
    pub fn encode_standard(&self, image: &Tensor<T>) -> Result<FisherVector<T>> {
        let gmm = self
            .gmm
            .as_ref()
            .ok_or_else(|| Error::MissingTensor("gmm.weights".into()))?;
        encode_standard_fv(&self.descriptors(image, None)?, gmm)
    }

    /// Full forward pass of one image. `rects` overrides the dense patch grid.
    pub fn forward(&self, image: &Tensor<T>, rects: Option<&[Rect]>) -> Result<ImageForward<T>> {
        let (_, h, w) = image.dims3()?;
        let (featmap, trunk_cache) = self.trunk.forward(image)?;
        let owned;
        let rects = match rects {
            Some(r) => r,
            None => {
                owned = self.patch_rects(h, w)?;
                &owned
            }
        };
        if rects.is_empty() {
            return Err(Error::NoPatches);
        }
        let frects = self.feature_rects(rects, featmap.shape());
        let d = self.config.descriptor_dim;
        let mut x = Vec::with_capacity(frects.len() * d);
        let mut patches = Vec::with_capacity(frects.len());
        for &r in &frects {
            let (pooled, spp) = spp_forward(&featmap, r, self.config.grid)?;
            let (desc, head_cache) = self.head.forward(&pooled)?;
            x.extend_from_slice(desc.data());
            patches.push((spp, head_cache));
        }
        let x = Tensor::from_vec(&[frects.len(), d], x)?;
        let (fv, fisher_cache) = fisher_layer_forward(&x, &self.fisher)?;
        let scores = self.score.forward(fv.values())?;
        Ok(ImageForward {
            trunk_cache,
            featmap_shape: featmap.shape().to_vec(),
            patches,
            fisher_cache,
            fv,
            scores,
        })
    }

    /// Backward pass of [`FisherNet::forward`], adding into `grads`
    /// (ordered as [`FisherNet::param_names`]). Frozen groups are skipped,
    /// including everything below the lowest live group.
    pub fn backward(
        &self,
        fwd: &ImageForward<T>,
        d_scores: &[T],
        grads: &mut [Tensor<T>],
        live: LiveGroups,
    ) -> Result<()> {
        let layout = self.layout();
        if grads.len() != layout.total {
            return Err(shape_err("gradient buffers do not match the network"));
        }
        let d_fv = {
            let (gw, gb) = grads[layout.score..layout.score + 2].split_at_mut(1);
            self.score
                .backward(fwd.fv.values(), d_scores, &mut gw[0], &mut gb[0], live.score)?
        };
        if !(live.fisher || live.head || live.trunk) {
            return Ok(());
        }
        let fg = fisher_layer_backward(&fwd.fisher_cache, &self.fisher, &d_fv)?;
        if live.fisher {
            grads[layout.fisher].axpy(T::one(), &fg.dw)?;
            grads[layout.fisher + 1].axpy(T::one(), &fg.db)?;
        }
        if !(live.head || live.trunk) {
            return Ok(());
        }
        let mut d_featmap = if live.trunk { Some(Tensor::zeros(&fwd.featmap_shape)) } else { None };
        let mut scratch = if live.head { None } else { Some(self.head.zero_grads()) };
        let d = self.config.descriptor_dim;
        for (j, (spp, head_cache)) in fwd.patches.iter().enumerate() {
            let d_desc = Tensor::from_vec(&[d], fg.dx.row(j).to_vec())?;
            let head_grads = match scratch.as_mut() {
                Some(s) => &mut s[..],
                None => &mut grads[layout.head..layout.fisher],
            };
            let d_pooled = self.head.backward(head_cache, &d_desc, head_grads, live.trunk)?;
            if let (Some(dp), Some(dfm)) = (d_pooled, d_featmap.as_mut()) {
                spp_backward_into(spp, &dp, dfm)?;
            }
        }
        if let Some(dfm) = d_featmap {
            self.trunk
                .backward(&fwd.trunk_cache, &dfm, &mut grads[..layout.head], false)?;
        }
        Ok(())
    }

    /// Whole-image forward through trunk, full-map pooling, head and classifier.
    pub fn forward_whole(&self, image: &Tensor<T>) -> Result<WholeImageForward<T>> {
        let (featmap, trunk_cache) = self.trunk.forward(image)?;
        let full = Rect::new(0, 0, featmap.shape()[2], featmap.shape()[1]);
        let (pooled, spp) = spp_forward(&featmap, full, self.config.grid)?;
        let (descriptor, head_cache) = self.head.forward(&pooled)?;
        let scores = self.classifier.forward(descriptor.data())?;
        Ok(WholeImageForward {
            trunk_cache,
            featmap_shape: featmap.shape().to_vec(),
            spp,
            head_cache,
            descriptor,
            scores,
        })
    }

    pub fn backward_whole(
        &self,
        fwd: &WholeImageForward<T>,
        d_scores: &[T],
        grads: &mut [Tensor<T>],
        live: LiveGroups,
    ) -> Result<()> {
        let layout = self.layout();
        let d_desc = {
            let (gw, gb) = grads[layout.classifier..layout.classifier + 2].split_at_mut(1);
            self.classifier
                .backward(fwd.descriptor.data(), d_scores, &mut gw[0], &mut gb[0], live.classifier)?
        };
        if !(live.head || live.trunk) {
            return Ok(());
        }
        let d_desc = Tensor::from_vec(fwd.descriptor.shape(), d_desc)?;
        let mut scratch;
        let head_grads = if live.head {
            &mut grads[layout.head..layout.fisher]
        } else {
            scratch = self.head.zero_grads();
            &mut scratch[..]
        };
        let d_pooled = self.head.backward(&fwd.head_cache, &d_desc, head_grads, live.trunk)?;
        if let Some(dp) = d_pooled {
            let mut dfm = Tensor::zeros(&fwd.featmap_shape);
            spp_backward_into(&fwd.spp, &dp, &mut dfm)?;
            self.trunk
                .backward(&fwd.trunk_cache, &dfm, &mut grads[..layout.head], false)?;
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        let nt = self.trunk.params().len();
        let nh = self.head.params().len();
        ParamLayout {
            head: nt,
            fisher: nt + nh,
            score: nt + nh + 2,
            classifier: nt + nh + 4,
            total: nt + nh + 6,
        }
    }

    /// Checkpoint names of all trainable tensors, in gradient-buffer order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.trunk.param_names("trunk");
        names.extend(self.head.param_names("head"));
        names.extend(
            ["fisher.w", "fisher.b", "score.weight", "score.bias", "cls.weight", "cls.bias"]
                .map(String::from),
        );
        names
    }

    pub fn param_groups(&self) -> Vec<Group> {
        let l = self.layout();
        (0..l.total)
            .map(|i| {
                if i < l.head {
                    Group::Trunk
                } else if i < l.fisher {
                    Group::Head
                } else if i < l.score {
                    Group::Fisher
                } else if i < l.classifier {
                    Group::Score
                } else {
                    Group::Classifier
                }
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.trunk.params();
        p.extend(self.head.params());
        p.extend([
            &self.fisher.w,
            &self.fisher.b,
            &self.score.weight,
            &self.score.bias,
            &self.classifier.weight,
            &self.classifier.bias,
        ]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.trunk.params_mut();
        p.extend(self.head.params_mut());
        p.extend([
            &mut self.fisher.w,
            &mut self.fisher.b,
            &mut self.score.weight,
            &mut self.score.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]);
        p
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params().into_iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    /// All parameters (plus the codebook when present) as a checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.param_names().iter().zip(self.params()) {
            ck.insert(name, t);
        }
        if let Some(g) = &self.gmm {
            save_gmm(g, &mut ck);
        }
        ck
    }

    /// Loads every parameter present in `ck`, checking shapes. Trunk and
    /// head tensors are required; the rest keep their current values when
    /// absent.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let names = self.param_names();
        let groups = self.param_groups();
        for ((name, group), p) in names.iter().zip(groups).zip(self.params_mut()) {
            match ck.get_dyn(name) {
                Some(t) => {
                    if t.shape() != p.shape() {
                        return Err(shape_err(format!(
                            "checkpoint tensor `{name}` is {:?}, network expects {:?}",
                            t.shape(),
                            p.shape()
                        )));
                    }
                    *p = t.to_typed();
                }
                None if matches!(group, Group::Trunk | Group::Head) => {
                    return Err(Error::MissingTensor(name.clone()));
                }
                None => {}
            }
        }
        if ck.contains("gmm.weights") {
            let g = load_gmm(ck)?;
            if g.k() != self.config.components || g.d() != self.config.descriptor_dim {
                return Err(shape_err("checkpoint codebook does not match K or D"));
            }
            self.gmm = Some(g);
        }
        Ok(())
    }
}

/// Offsets of each group in the flat gradient-buffer list.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    pub head: usize,
    pub fisher: usize,
    pub score: usize,
    pub classifier: usize,
    pub total: usize,
}

pub fn save_gmm<T: Scalar>(g: &GmmModel<T>, ck: &mut Checkpoint) {
    ck.insert("gmm.weights", &Tensor::from_vec(&[g.k()], g.weights().to_vec()).expect("k"));
    ck.insert("gmm.means", &g.means());
    ck.insert("gmm.sigmas", &g.sigmas());
}

pub fn load_gmm<T: Scalar>(ck: &Checkpoint) -> Result<GmmModel<T>> {
    let w: Tensor<T> = ck.get("gmm.weights")?;
    GmmModel::new(w.into_data(), ck.get("gmm.means")?, ck.get("gmm.sigmas")?)
}
