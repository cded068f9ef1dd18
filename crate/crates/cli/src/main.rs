use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fishernet::bench::bench_encoding;
use fishernet::classifier::{ap_csv, evaluate, extract_features, train_svm_ova, Encoder};
use fishernet::data::{gen_dataset, read_tensor, write_tensor};
use fishernet::gradcheck::{report, run_suite};
use fishernet::pipeline::fit_codebook;
use fishernet::training::{log_csv, train, OptimizerState};
use fishernet::{Checkpoint, Dataset, DType, FisherNet, Regime, RunConfig, Scalar, Tensor};

#[derive(Parser)]
#[command(name = "fishernet", version, about = "Trainable Fisher Vector networks on synthetic multi-label data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file; every key has a default
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Network checkpoint to start from
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Training regime: finetune, fv-fixed, fisher-only or full
    #[arg(long, global = true)]
    regime: Option<String>,
    /// Dataset root holding train/ and test/ (defaults to <out>/data)
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test datasets
    GenData,
    /// Fit the GMM codebook on patch descriptors and initialize the Fisher layer
    FitGmm,
    /// Encode both splits as standard Fisher Vectors
    Encode,
    /// Train the network under a regime
    Train {
        /// Restore optimizer momentum from the checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// Train one-vs-all SVMs and report per-class AP and mAP
    Eval {
        /// Use feature matrices written by `encode` from this directory
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite
    Gradcheck,
    /// Time shared-trunk encoding against per-patch recomputation
    Bench,
}

struct Ctx {
    cfg: RunConfig,
    common: Common,
}

impl Ctx {
    fn data_root(&self) -> PathBuf {
        self.common.data.clone().unwrap_or_else(|| self.common.out.join("data"))
    }

    fn load_split<T: Scalar>(&self, split: &str) -> Result<Dataset<T>> {
        let dir = self.data_root().join(split);
        Dataset::read_dir(&dir).with_context(|| format!("reading dataset {}", dir.display()))
    }

    fn load_net<T: Scalar>(&self, required: bool) -> Result<FisherNet<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut net = FisherNet::new(self.cfg.net_config(), &mut rng)?;
        match &self.common.checkpoint {
            Some(p) => {
                let ck = Checkpoint::read(p).with_context(|| format!("reading checkpoint {}", p.display()))?;
                net.load_checkpoint(&ck)
                    .with_context(|| format!("loading checkpoint {}", p.display()))?;
                info!("loaded {}", p.display());
            }
            None if required => bail!("this command needs --checkpoint"),
            None => info!("starting from a freshly initialized network"),
        }
        Ok(net)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(r) = &cli.common.regime {
        cfg.train.regime = r.parse()?;
    }
    info!("configuration:\n{}", cfg.to_text().trim_end());
    fs::create_dir_all(&cli.common.out)
        .with_context(|| format!("creating {}", cli.common.out.display()))?;
    let ctx = Ctx { cfg, common: cli.common };
    match ctx.cfg.dtype {
        DType::F32 => dispatch::<f32>(&ctx, &cli.command),
        DType::F64 => dispatch::<f64>(&ctx, &cli.command),
    }
}

fn dispatch<T: Scalar>(ctx: &Ctx, cmd: &Command) -> Result<ExitCode> {
    let out = &ctx.common.out;
    match cmd {
        Command::GenData => gen_data::<T>(ctx)?,
        Command::FitGmm => {
            let mut net = ctx.load_net::<T>(false)?;
            let train_set = ctx.load_split::<T>("train")?;
            let fit = fit_codebook(&mut net, &train_set, &ctx.cfg.em_config())?;
            let mut csv = String::from("iter,log_likelihood\n");
            for (i, ll) in fit.log_likelihoods.iter().enumerate() {
                csv.push_str(&format!("{i},{ll}\n"));
            }
            fs::write(out.join("gmm_log.csv"), csv)?;
            write_checkpoint(&net.to_checkpoint(), &out.join("codebook.fnc"))?;
            info!("EM converged: {}", fit.converged);
        }
        Command::Encode => {
            let net = ctx.load_net::<T>(true)?;
            for split in ["train", "test"] {
                let ds = ctx.load_split::<T>(split)?;
                let x = extract_features(&net, &ds, &ctx.cfg.eval_scales, Encoder::StandardFv)?;
                let path = out.join(format!("features_{split}.fnt"));
                write_tensor(&path, &x)?;
                info!("wrote {} ({}×{})", path.display(), x.shape()[0], x.shape()[1]);
            }
        }
        Command::Train { resume } => train_cmd::<T>(ctx, *resume)?,
        Command::Eval { features } => eval_cmd::<T>(ctx, features.as_deref())?,
        Command::Gradcheck => {
            let results = run_suite(ctx.cfg.seed)?;
            let rep = report(&results);
            fs::write(out.join("gradcheck.csv"), &rep)?;
            print!("{rep}");
            if results.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bench => {
            let net = ctx.load_net::<T>(false)?;
            let s = ctx.cfg.bench_image_size;
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
            use rand::Rng;
            let image = Tensor::from_vec(
                &[ctx.cfg.data.channels, s, s],
                (0..ctx.cfg.data.channels * s * s).map(|_| T::lit(rng.gen::<f64>())).collect(),
            )?;
            let r = bench_encoding(&net, &image, None, ctx.cfg.bench_repeats)?;
            fs::write(out.join("bench.csv"), r.csv())?;
            println!(
                "{} patches: shared {:.4}s, per-patch {:.4}s, speedup {:.1}x",
                r.patches,
                r.shared_secs,
                r.per_patch_secs,
                r.speedup()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.write(path).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn gen_data<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let spec = ctx.cfg.synthetic_spec();
    let (train_set, test_set) = gen_dataset::<T>(&spec)?;
    let root = ctx.data_root();
    train_set.write_dir(&root.join("train"), Some(&spec))?;
    test_set.write_dir(&root.join("test"), Some(&spec))?;
    info!("wrote {} train and {} test images under {}", train_set.len(), test_set.len(), root.display());
    Ok(())
}

fn train_cmd<T: Scalar>(ctx: &Ctx, resume: bool) -> Result<()> {
    let tc = ctx.cfg.train_config();
    if tc.regime == Regime::FvFixed {
        bail!("the fv-fixed regime has nothing to train; use `encode` and `eval --features`");
    }
    let needs_codebook = matches!(tc.regime, Regime::FisherOnly | Regime::Full);
    let mut net = ctx.load_net::<T>(needs_codebook)?;
    if needs_codebook && net.gmm.is_none() {
        bail!("regime {} needs a checkpoint with a fitted codebook (run fit-gmm)", tc.regime.name());
    }
    let train_set = ctx.load_split::<T>("train")?;
    let mut opt = match (&ctx.common.checkpoint, resume) {
        (Some(p), true) => OptimizerState::load(&net, &Checkpoint::read(p)?)?,
        _ => OptimizerState::new(&net),
    };
    let out = ctx.common.out.clone();
    let every = ctx.cfg.checkpoint_every;
    let log = train(&mut net, &mut opt, &train_set, &tc, |row, n, o| {
        if every > 0 && (row.iter + 1) % every == 0 && row.iter + 1 < tc.iterations {
            let mut ck = n.to_checkpoint();
            o.save(n, &mut ck);
            ck.write(&out.join(format!("checkpoint_{:06}.fnc", row.iter + 1)))?;
        }
        Ok(())
    })?;
    fs::write(out.join("train_log.csv"), log_csv(&log))?;
    let mut ck = net.to_checkpoint();
    opt.save(&net, &mut ck);
    write_checkpoint(&ck, &out.join("checkpoint.fnc"))?;
    if let Some(last) = log.last() {
        info!("final loss {:.6}", last.loss);
    }
    Ok(())
}

fn eval_cmd<T: Scalar>(ctx: &Ctx, features: Option<&Path>) -> Result<()> {
    let train_set = ctx.load_split::<T>("train")?;
    let test_set = ctx.load_split::<T>("test")?;
    let (xtr, xte): (Tensor<T>, Tensor<T>) = match features {
        Some(dir) => (
            read_tensor(&dir.join("features_train.fnt")).context("reading train features")?,
            read_tensor(&dir.join("features_test.fnt")).context("reading test features")?,
        ),
        None => {
            let net = ctx.load_net::<T>(true)?;
            let enc = if ctx.cfg.train.regime == Regime::FvFixed { Encoder::StandardFv } else { Encoder::FisherLayer };
            (
                extract_features(&net, &train_set, &ctx.cfg.eval_scales, enc)?,
                extract_features(&net, &test_set, &ctx.cfg.eval_scales, enc)?,
            )
        }
    };
    if xtr.shape()[0] != train_set.len() || xte.shape()[0] != test_set.len() {
        bail!("feature rows do not match the dataset sizes");
    }
    let svm = train_svm_ova(&xtr, train_set.labels(), &ctx.cfg.svm_config())?;
    let per_class = evaluate(&svm.decision(&xte)?, test_set.labels(), &svm.trained)?;
    let csv = ap_csv(&per_class)?;
    fs::write(ctx.common.out.join("ap.csv"), &csv)?;
    write_checkpoint(&svm.to_checkpoint(), &ctx.common.out.join("svm.fnc"))?;
    print!("{csv}");
    Ok(())
}
