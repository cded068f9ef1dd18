//! Flat `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{Init, LayerSpec};
use crate::classifier::SvmConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::gmm::EmConfig;
use crate::net::NetConfig;
use crate::scalar::DType;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: DType,
    pub data: SyntheticSpec,
    /// Channel widths of the trunk; each stage is conv3x3-relu-maxpool2.
    pub conv_channels: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub components: usize,
    pub descriptor_dim: usize,
    pub grid: (usize, usize),
    pub patch_scales: Vec<usize>,
    pub patch_step: usize,
    /// `he`, or `gaussian` with `init_std`.
    pub backbone_init: Init,
    pub init_std: f64,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub gmm: EmConfig,
    pub svm_c: f64,
    pub eval_scales: Vec<usize>,
    pub bench_image_size: usize,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        RunConfig {
            seed: 0,
            dtype: DType::F64,
            data: SyntheticSpec::default(),
            conv_channels: vec![16, 32],
            head_hidden: net.head_hidden,
            components: net.components,
            descriptor_dim: net.descriptor_dim,
            grid: net.grid,
            patch_scales: net.patch_scales,
            patch_step: net.patch_step,
            backbone_init: net.backbone_init,
            init_std: net.init_std,
            train: TrainConfig::default(),
            checkpoint_every: 0,
            gmm: EmConfig::default(),
            svm_c: 1.0,
            eval_scales: Vec::new(),
            bench_image_size: 128,
            bench_repeats: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{v}` for `{key}`"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    /// Starts from the defaults and applies each `key = value` line. Blank
    /// lines and `#` comments are ignored; unknown keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::Config(format!("dtype must be f32 or f64, got `{v}`"))),
                }
            }
            "image_size" => d.image_size = parse(key, v)?,
            "channels" => d.channels = parse(key, v)?,
            "classes" => d.classes = parse(key, v)?,
            "objects_min" => d.objects_min = parse(key, v)?,
            "objects_max" => d.objects_max = parse(key, v)?,
            "object_size_min" => d.object_size_min = parse(key, v)?,
            "object_size_max" => d.object_size_max = parse(key, v)?,
            "noise" => d.noise = parse(key, v)?,
            "intensity_min" => d.intensity_min = parse(key, v)?,
            "intensity_max" => d.intensity_max = parse(key, v)?,
            "train_count" => d.train_count = parse(key, v)?,
            "test_count" => d.test_count = parse(key, v)?,
            "conv_channels" => self.conv_channels = parse_list(key, v)?,
            "head_hidden" => self.head_hidden = parse_list(key, v)?,
            "components" => self.components = parse(key, v)?,
            "descriptor_dim" => self.descriptor_dim = parse(key, v)?,
            "grid" => {
                let (a, b) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("grid must look like 3x3, got `{v}`")))?;
                self.grid = (parse(key, a.trim())?, parse(key, b.trim())?);
            }
            "patch_scales" => self.patch_scales = parse_list(key, v)?,
            "patch_step" => self.patch_step = parse(key, v)?,
            "init_std" => {
                self.init_std = parse(key, v)?;
                if let Init::Gaussian(_) = self.backbone_init {
                    self.backbone_init = Init::Gaussian(self.init_std);
                }
            }
            "backbone_init" => {
                self.backbone_init = match v {
                    "he" => Init::He,
                    "gaussian" => Init::Gaussian(self.init_std),
                    _ => return Err(Error::Config(format!("backbone_init must be he or gaussian, got `{v}`"))),
                }
            }
            "iterations" => t.iterations = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr_trunk" => t.lr_trunk = parse(key, v)?,
            "lr_head" => t.lr_head = parse(key, v)?,
            "lr_fisher" => t.lr_fisher = parse(key, v)?,
            "lr_score" => t.lr_score = parse(key, v)?,
            "lr_classifier" => t.lr_classifier = parse(key, v)?,
            "lr_step" => t.lr_step = parse(key, v)?,
            "lr_factor" => t.lr_factor = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "train_scales" => t.scales = parse_list(key, v)?,
            "flip" => t.flip = parse_bool(key, v)?,
            "regime" => t.regime = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "gmm_max_iters" => self.gmm.max_iters = parse(key, v)?,
            "gmm_tol" => self.gmm.tol = parse(key, v)?,
            "gmm_sample_count" => self.gmm.sample_count = parse(key, v)?,
            "svm_c" => self.svm_c = parse(key, v)?,
            "eval_scales" => self.eval_scales = parse_list(key, v)?,
            "bench_image_size" => self.bench_image_size = parse(key, v)?,
            "bench_repeats" => self.bench_repeats = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be a non-empty list of positive widths");
        }
        if self.components == 0 || self.descriptor_dim == 0 {
            return bad("components and descriptor_dim must be positive");
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return bad("grid cells must be positive");
        }
        if self.patch_scales.is_empty() || self.patch_step == 0 {
            return bad("patch_scales must be non-empty and patch_step positive");
        }
        if !(self.svm_c > 0.0) {
            return bad("svm_c must be positive");
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec { seed: self.seed, ..self.data.clone() }
    }

    pub fn net_config(&self) -> NetConfig {
        let mut trunk = Vec::new();
        for &c in &self.conv_channels {
            trunk.push(LayerSpec::Conv { out_channels: c, kernel: 3, stride: 1, padding: 1 });
            trunk.push(LayerSpec::Relu);
            trunk.push(LayerSpec::MaxPool { size: 2 });
        }
        NetConfig {
            in_channels: self.data.channels,
            image_size: self.data.image_size,
            trunk,
            head_hidden: self.head_hidden.clone(),
            descriptor_dim: self.descriptor_dim,
            components: self.components,
            grid: self.grid,
            patch_scales: self.patch_scales.clone(),
            patch_step: self.patch_step,
            classes: self.data.classes,
            backbone_init: self.backbone_init,
            init_std: self.init_std,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig { seed: self.seed, ..self.gmm.clone() }
    }

    pub fn svm_config(&self) -> SvmConfig {
        SvmConfig { c: self.svm_c, ..SvmConfig::default() }
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("dtype", match self.dtype {
            DType::F32 => "f32".into(),
            DType::F64 => "f64".into(),
        });
        for (k, v) in d.to_pairs() {
            if k != "seed" {
                put(k, v);
            }
        }
        put("conv_channels", join(&self.conv_channels));
        put("head_hidden", join(&self.head_hidden));
        put("components", self.components.to_string());
        put("descriptor_dim", self.descriptor_dim.to_string());
        put("grid", format!("{}x{}", self.grid.0, self.grid.1));
        put("patch_scales", join(&self.patch_scales));
        put("patch_step", self.patch_step.to_string());
        put("init_std", self.init_std.to_string());
        put("backbone_init", match self.backbone_init {
            Init::He => "he".into(),
            Init::Gaussian(_) => "gaussian".into(),
        });
        put("iterations", t.iterations.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr_trunk", t.lr_trunk.to_string());
        put("lr_head", t.lr_head.to_string());
        put("lr_fisher", t.lr_fisher.to_string());
        put("lr_score", t.lr_score.to_string());
        put("lr_classifier", t.lr_classifier.to_string());
        put("lr_step", t.lr_step.to_string());
        put("lr_factor", t.lr_factor.to_string());
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("train_scales", join(&t.scales));
        put("flip", t.flip.to_string());
        put("regime", t.regime.name().into());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("gmm_max_iters", self.gmm.max_iters.to_string());
        put("gmm_tol", self.gmm.tol.to_string());
        put("gmm_sample_count", self.gmm.sample_count.to_string());
        put("svm_c", self.svm_c.to_string());
        put("eval_scales", join(&self.eval_scales));
        put("bench_image_size", self.bench_image_size.to_string());
        put("bench_repeats", self.bench_repeats.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Regime;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse_str(
            "# toy\ncomponents = 8\ngrid = 2x3\npatch_scales = 16, 32\nregime = fisher-only # trailing\n\ntrain_scales =\n",
        )
        .unwrap();
        assert_eq!(cfg.components, 8);
        assert_eq!(cfg.grid, (2, 3));
        assert_eq!(cfg.patch_scales, vec![16, 32]);
        assert_eq!(cfg.train.regime, Regime::FisherOnly);
        assert!(cfg.train.scales.is_empty());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::parse_str("colour = red"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("components"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("components = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("momentum = 1.5"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_str("grid = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn net_config_matches_default_architecture() {
        assert_eq!(RunConfig::default().net_config(), NetConfig::default());
    }
}
