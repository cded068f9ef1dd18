//! Trains the fine-tuned, fixed-FV, Fisher-only and full regimes on one
//! synthetic dataset and prints their test mAP.
//!
//! cargo run --release --example compare_regimes -- [seed] [key=value ...]
//!
//! Keys: ft_iters, ft_lr, fl_iters, fl_lr_fisher, fl_lr_score, full_iters,
//! full_lr_trunk, full_lr_fisher, full_lr_score.

use std::collections::HashMap;
use std::time::Instant;

use fishernet::backbone::Init;
use fishernet::classifier::SvmConfig;
use fishernet::data::SyntheticSpec;
use fishernet::gmm::EmConfig;
use fishernet::net::NetConfig;
use fishernet::pipeline::{compare_regimes, ComparisonPlan};
use fishernet::training::TrainConfig;

fn main() -> fishernet::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let kv: HashMap<String, f64> = args
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.parse().expect("number"))))
        .collect();
    let get = |k: &str, d: f64| kv.get(k).copied().unwrap_or(d);
    let ft_iters = get("ft_iters", 1000.0) as usize;
    let ft_lr = get("ft_lr", 0.003);
    let fl_iters = get("fl_iters", 1500.0) as usize;
    let full_iters = get("full_iters", 1500.0) as usize;
    let base = TrainConfig { lr_step: usize::MAX, ..TrainConfig::default() };
    let plan = ComparisonPlan {
        data: SyntheticSpec::default(),
        net: NetConfig { components: 8, descriptor_dim: 32, backbone_init: Init::He, ..NetConfig::default() },
        finetune: TrainConfig {
            iterations: ft_iters,
            lr_trunk: ft_lr,
            lr_head: ft_lr,
            lr_classifier: ft_lr,
            ..base.clone()
        },
        fisher_only: TrainConfig {
            iterations: fl_iters,
            lr_fisher: get("fl_lr_fisher", 0.003),
            lr_score: get("fl_lr_score", 0.01),
            ..base.clone()
        },
        full: TrainConfig {
            iterations: full_iters,
            lr_trunk: get("full_lr_trunk", 0.001),
            lr_head: get("full_lr_trunk", 0.001),
            lr_fisher: get("full_lr_fisher", 0.003),
            lr_score: get("full_lr_score", 0.01),
            ..base
        },
        em: EmConfig::default(),
        svm: SvmConfig::default(),
        eval_scales: Vec::new(),
        seed,
    }
    .reseeded(seed);
    let t = Instant::now();
    let r = compare_regimes::<f32>(&plan)?;
    println!("{r:?} in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
