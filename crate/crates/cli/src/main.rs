//! Experiment runner binding the dlvm library: data generation and
//! ingestion, training, blow-up traces, mixture bounds, imputation chains,
//! and sampler evaluation.
//!
//! Every subcommand writes its artifacts under an output directory (flag
//! `--out`, falling back to `$DLVM_OUT_DIR/<command>` and then
//! `runs/<command>`), together with a `config.json` holding the effective
//! configuration, its SHA-256 digest, the seed, and the artifact version.
//! Re-running with `--config <dir>/config.json` reproduces the run.

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use dlvm::data::{self, DataKind, Dataset, GroundTruth};
use dlvm::imputation::{self, MaskScenario, SamplerKind};
use dlvm::mixture;
use dlvm::model::{sha256_hex, Checkpoint, ModelDims, OutputKind};
use dlvm::rng::RngStream;
use dlvm::stats;
use dlvm::training::{self, TrainConfig};
use dlvm::{blowup, Error};

const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "dlvm",
    version,
    about = "Deep latent variable models: exact-likelihood experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with persisted ground truth.
    SynthData(SynthArgs),
    /// Convert IDX (MNIST-format) images into a dataset file.
    ImportIdx(ImportIdxArgs),
    /// Train a VAE with the path-derivative gradient and Adam.
    Train(TrainArgs),
    /// Run the likelihood blow-up trace over an alpha grid.
    Blowup(BlowupArgs),
    /// Fit the nonparametric mixture bound by multi-restart EM.
    MixtureBound(MixtureArgs),
    /// Impute missing data with a pseudo-Gibbs or Metropolis-within-Gibbs chain.
    Impute(ImputeArgs),
    /// Wilcoxon comparison table from per-item imputation results.
    Eval(EvalArgs),
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct SynthArgs {
    /// Load every option from a previously written config.json instead.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,

    /// ppca | gauss-mixture | bernoulli-bars | bernoulli-mixture
    #[arg(long, default_value = "ppca")]
    kind: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Latent dimension (ppca) or component count (mixtures).
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Noise variance (ppca) or per-coordinate variance (gauss-mixture).
    #[arg(long, default_value_t = 0.5)]
    sigma2: f64,
    /// Column scale of the random orthogonal loading (ppca).
    #[arg(long, default_value_t = 2.0)]
    loading_scale: f64,
    /// Mean separation along coordinate axes (gauss-mixture).
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    /// Image rows (bernoulli-bars).
    #[arg(long, default_value_t = 8)]
    rows: usize,
    /// Image cols (bernoulli-bars).
    #[arg(long, default_value_t = 8)]
    cols: usize,
    /// Bit-flip noise of the binary prototypes.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Mixture weights as comma-separated values (uniform when omitted).
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct ImportIdxArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,

    /// IDX image file (magic 0x00000803).
    #[arg(long)]
    images: PathBuf,
    /// Optional IDX label file (magic 0x00000801); labels are validated and
    /// stored alongside the dataset.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Static binarisation threshold on [0, 1] pixel values; values at or
    /// above the threshold map to 1.
    #[arg(long)]
    binarize: Option<f64>,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,

    /// Dataset JSON produced by synth-data (or converted from IDX).
    #[arg(long)]
    data: PathBuf,
    /// gaussian | bernoulli (defaults to the dataset kind)
    #[arg(long)]
    output_kind: Option<String>,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    /// Covariance floor; 0 disables the constraint (Gaussian only).
    #[arg(long, default_value_t = 0.0)]
    xi: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 5000)]
    steps: u64,
    #[arg(long, default_value_t = 1)]
    mc_samples: usize,
    #[arg(long, default_value_t = 16)]
    heldout_mc_samples: usize,
    #[arg(long, default_value_t = 64)]
    heldout_iw_samples: usize,
    /// Keep optimising through runaway losses (blow-up witnessing).
    #[arg(long, default_value_t = false)]
    allow_divergence: bool,
    /// Use the plain reparameterised gradient instead of the path derivative.
    #[arg(long, default_value_t = false)]
    plain_gradient: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct BlowupArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,

    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    target_index: usize,
    /// Latent direction w as comma-separated values; random unit vector of
    /// dimension `--d` when omitted.
    #[arg(long)]
    direction: Option<String>,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 20.0)]
    alpha_max: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha_step: f64,
    #[arg(long, default_value_t = 100_000)]
    mc_samples: usize,
    #[arg(long, default_value_t = blowup::DEFAULT_GAIN_THRESHOLD_NATS)]
    gain_threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct MixtureArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,

    #[arg(long)]
    data: PathBuf,
    /// Variance floor for Gaussian mixtures.
    #[arg(long, default_value_t = 0.0625)]
    xi: f64,
    /// Comma-separated component schedule; geometric {1,2,4,...,n} when
    /// omitted.
    #[arg(long)]
    k_schedule: Option<String>,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    /// Checkpoint for the ELBO / importance-weighted side of the sandwich.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Importance samples per datum for the sandwich.
    #[arg(long, default_value_t = 256)]
    iw_samples: usize,
    /// ELBO samples per datum for the sandwich.
    #[arg(long, default_value_t = 64)]
    elbo_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct ImputeArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,

    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// mar:<fraction> | top-half | bottom-half
    #[arg(long, default_value = "mar:0.5")]
    scenario: String,
    /// pg | mwg
    #[arg(long, default_value = "mwg")]
    sampler: String,
    #[arg(long, default_value_t = 2000)]
    t: u64,
    /// Pseudo-Gibbs warm-up sweeps before Metropolis moves.
    #[arg(long, default_value_t = 20)]
    warmup: u64,
    /// Cap on the number of test items (test split, or every row).
    #[arg(long)]
    max_items: Option<usize>,
    /// Dump full missing-coordinate traces as binary f64 arrays.
    #[arg(long, default_value_t = false)]
    dump_traces: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,

    /// Per-item result CSVs from `impute` (any number; rows are grouped by
    /// sampler and paired by item and scenario).
    #[arg(long, required = true)]
    results: Vec<PathBuf>,
    /// Dataset label for the table.
    #[arg(long, default_value = "dataset")]
    label: String,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::SynthData(args) => run_synth(args),
        Command::ImportIdx(args) => run_import_idx(args),
        Command::Train(args) => run_train(args),
        Command::Blowup(args) => run_blowup(args),
        Command::MixtureBound(args) => run_mixture(args),
        Command::Impute(args) => run_impute(args),
        Command::Eval(args) => run_eval(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Contract(_) | Error::Shape(_) => 2,
                Error::Io(_) => 3,
                Error::Format(_) | Error::DigestMismatch { .. } | Error::Csv(_) => 4,
                Error::Diverged { .. } => 5,
            };
            ExitCode::from(code)
        }
    }
}

/// Resolves the output directory: flag, then `$DLVM_OUT_DIR/<command>`, then
/// `runs/<command>`.
fn resolve_out(flag: &Option<PathBuf>, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    match std::env::var_os("DLVM_OUT_DIR") {
        Some(root) => PathBuf::from(root).join(command),
        None => PathBuf::from("runs").join(command),
    }
}

/// Loads `--config` if given, otherwise uses the flag values. Writes the
/// effective config with digest and version into the run directory and
/// returns `(config, digest)`.
fn effective_config<T: Serialize + DeserializeOwned + Clone>(
    args: &T,
    config_path: &Option<PathBuf>,
    out: &Path,
    command: &str,
) -> Result<(T, String), Error> {
    #[derive(Serialize, Deserialize)]
    struct Wrapper<C> {
        artifact_version: String,
        command: String,
        config_digest: String,
        config: C,
    }

    let config: T = match config_path {
        Some(path) => {
            let raw = std::fs::read_to_string(path)?;
            let w: Wrapper<T> = serde_json::from_str(&raw)
                .map_err(|e| Error::Format(format!("bad config {}: {e}", path.display())))?;
            w.config
        }
        None => args.clone(),
    };
    let digest = sha256_hex(
        serde_json::to_string(&config)
            .map_err(|e| Error::Format(e.to_string()))?
            .as_bytes(),
    );
    std::fs::create_dir_all(out)?;
    let wrapper = Wrapper {
        artifact_version: ARTIFACT_VERSION.to_string(),
        command: command.to_string(),
        config_digest: digest.clone(),
        config: config.clone(),
    };
    let json = serde_json::to_string_pretty(&wrapper).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out.join("config.json"), json)?;
    println!("[{command}] effective config (digest {digest}):");
    println!(
        "{}",
        serde_json::to_string_pretty(&config).map_err(|e| Error::Format(e.to_string()))?
    );
    Ok((config, digest))
}

fn run_synth(args: SynthArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "synth-data");
    let (cfg, _) = effective_config(&args, &args.config, &out, "synth-data")?;

    let mut rng = RngStream::seed(cfg.seed);
    let (mut dataset, truth) = match cfg.kind.as_str() {
        "ppca" => {
            let params = data::PpcaParams {
                lambda: data::random_orthogonal_loading(cfg.p, cfg.d, cfg.loading_scale, &mut rng),
                mu0: vec![0.0; cfg.p],
                sigma2: cfg.sigma2,
            };
            let ds = data::synth_ppca(&params, cfg.n, cfg.seed)?;
            (ds, GroundTruth::Ppca(params))
        }
        "gauss-mixture" => {
            let k = cfg.d.max(1);
            let means: Vec<Vec<f64>> = (0..k)
                .map(|c| {
                    (0..cfg.p)
                        .map(|j| if j % k == c { cfg.separation } else { -cfg.separation })
                        .collect()
                })
                .collect();
            let params = data::GaussMixParams {
                weights: vec![1.0 / k as f64; k],
                means,
                vars: vec![vec![cfg.sigma2; cfg.p]; k],
            };
            let ds = data::synth_gauss_mixture(&params, cfg.n, cfg.seed)?;
            (ds, GroundTruth::GaussMixture(params))
        }
        "bernoulli-bars" => {
            let protos = data::bars_prototypes(cfg.rows, cfg.cols, cfg.noise);
            let weights = match &cfg.weights {
                Some(s) => s
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Contract(format!("bad weight '{v}': {e}")))
                    })
                    .collect::<Result<Vec<f64>, _>>()?,
                None => vec![1.0 / protos.len() as f64; protos.len()],
            };
            let params = data::BernMixParams {
                weights,
                prototypes: protos,
            };
            let ds = data::synth_bernoulli_mixture(&params, cfg.n, cfg.seed)?
                .with_image_shape(cfg.rows, cfg.cols)?;
            (ds, GroundTruth::BernoulliMixture(params))
        }
        "bernoulli-mixture" => {
            let k = cfg.d.max(1);
            let prototypes: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    (0..cfg.p)
                        .map(|_| if rng.uniform() < 0.5 { cfg.noise } else { 1.0 - cfg.noise })
                        .collect()
                })
                .collect();
            let params = data::BernMixParams {
                weights: vec![1.0 / k as f64; k],
                prototypes,
            };
            let ds = data::synth_bernoulli_mixture(&params, cfg.n, cfg.seed)?;
            (ds, GroundTruth::BernoulliMixture(params))
        }
        other => {
            return Err(Error::Contract(format!(
                "unknown synthetic kind '{other}' (ppca | gauss-mixture | bernoulli-bars | bernoulli-mixture)"
            )))
        }
    };

    if cfg.train_frac > 0.0 && dataset.n() > 0 {
        let splits = data::make_splits(dataset.n(), cfg.train_frac, cfg.val_frac, &mut rng.fork(0x5B));
        dataset = dataset.with_splits(splits)?;
    }
    dataset.save(out.join("dataset.json"))?;
    truth.save(out.join("ground_truth.json"))?;
    println!(
        "[synth-data] wrote {} rows x {} features to {}",
        dataset.n(),
        dataset.p(),
        out.display()
    );
    Ok(())
}

fn run_import_idx(args: ImportIdxArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "import-idx");
    let (cfg, _) = effective_config(&args, &args.config, &out, "import-idx")?;

    let (mut dataset, labels) = data::load_idx(&cfg.images, cfg.labels.as_deref(), cfg.binarize)?;
    if cfg.train_frac > 0.0 && dataset.n() > 0 {
        let splits = data::make_splits(
            dataset.n(),
            cfg.train_frac,
            cfg.val_frac,
            &mut RngStream::seed(cfg.seed).fork(0x5B),
        );
        dataset = dataset.with_splits(splits)?;
    }
    dataset.save(out.join("dataset.json"))?;
    if let Some(labels) = labels {
        let json = serde_json::to_string(&labels).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(out.join("labels.json"), json)?;
    }
    println!(
        "[import-idx] wrote {} rows x {} features ({:?}) to {}",
        dataset.n(),
        dataset.p(),
        dataset.kind,
        out.display()
    );
    Ok(())
}

fn parse_output_kind(s: &str) -> Result<OutputKind, Error> {
    match s {
        "gaussian" => Ok(OutputKind::Gaussian),
        "bernoulli" => Ok(OutputKind::Bernoulli),
        other => Err(Error::Contract(format!(
            "unknown output kind '{other}' (gaussian | bernoulli)"
        ))),
    }
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "train");
    let (cfg, _) = effective_config(&args, &args.config, &out, "train")?;

    let dataset = Dataset::load(&cfg.data)?;
    let output_kind = match &cfg.output_kind {
        Some(s) => parse_output_kind(s)?,
        None => match dataset.kind {
            DataKind::Binary => OutputKind::Bernoulli,
            DataKind::Real => OutputKind::Gaussian,
        },
    };
    let config = TrainConfig {
        dims: ModelDims {
            latent: cfg.d,
            hidden: cfg.hidden,
            data: dataset.p(),
        },
        output_kind,
        xi: cfg.xi,
        learning_rate: cfg.lr,
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        seed: cfg.seed,
        mc_samples: cfg.mc_samples,
        heldout_mc_samples: cfg.heldout_mc_samples,
        heldout_iw_samples: cfg.heldout_iw_samples,
        allow_divergence: cfg.allow_divergence,
        path_derivative: !cfg.plain_gradient,
    };
    let (ckpt, trace) = training::train(&config, &dataset)?;
    ckpt.save(out.join("checkpoint.json"))?;
    trace.write_csv(out.join("metrics.csv"))?;
    let last = trace.records.last();
    println!(
        "[train] {} steps, final minibatch ELBO {:?}, wrote {}",
        config.steps,
        last.map(|r| r.train_elbo),
        out.display()
    );
    Ok(())
}

fn run_blowup(args: BlowupArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "blowup");
    let (cfg, _) = effective_config(&args, &args.config, &out, "blowup")?;

    let dataset = Dataset::load(&cfg.data)?;
    let direction: Vec<f64> = match &cfg.direction {
        Some(s) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Contract(format!("bad direction entry '{v}': {e}")))
            })
            .collect::<Result<_, _>>()?,
        None => {
            let mut rng = RngStream::seed(cfg.seed).fork(0xD1);
            let v = rng.standard_normal_vec(cfg.d);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        }
    };
    if cfg.alpha_step <= 0.0 || cfg.alpha_max < 0.0 {
        return Err(Error::Contract("need alpha_step > 0 and alpha_max >= 0".into()));
    }
    let mut grid = Vec::new();
    let mut alpha = 0.0;
    while alpha <= cfg.alpha_max + 1e-12 {
        grid.push(alpha);
        alpha += cfg.alpha_step;
    }

    let mut spec = blowup::BlowupSpec::new(cfg.target_index, direction, grid, cfg.seed);
    spec.mc_samples = cfg.mc_samples;
    spec.gain_threshold_nats = cfg.gain_threshold;
    let trace = blowup::blowup_trace(&dataset, &spec)?;
    trace.write_csv(out.join("blowup.csv"))?;
    let summary = serde_json::json!({
        "gain_nats": trace.gain_nats(),
        "gain_threshold_nats": trace.gain_threshold_nats,
        "other_contribution_floor": trace.other_floor(),
        "passes_threshold": trace.passes_threshold(),
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    println!(
        "[blowup] target contribution grew {:.2} nats over the grid (threshold {:.1}); min other contribution {:.2}; wrote {}",
        trace.gain_nats(),
        trace.gain_threshold_nats,
        trace.other_floor(),
        out.display()
    );
    Ok(())
}

fn run_mixture(args: MixtureArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "mixture-bound");
    let (cfg, _) = effective_config(&args, &args.config, &out, "mixture-bound")?;

    let dataset = Dataset::load(&cfg.data)?;
    let kind = match dataset.kind {
        DataKind::Binary => OutputKind::Bernoulli,
        DataKind::Real => OutputKind::Gaussian,
    };
    let xi = match kind {
        OutputKind::Gaussian => cfg.xi,
        OutputKind::Bernoulli => 0.0,
    };
    let schedule: Vec<usize> = match &cfg.k_schedule {
        Some(s) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Contract(format!("bad schedule entry '{v}': {e}")))
            })
            .collect::<Result<_, _>>()?,
        None => mixture::default_k_schedule(dataset.n()),
    };

    let rng = RngStream::seed(cfg.seed);
    let mut base = mixture::EmConfig::new(1, kind, xi);
    base.restarts = cfg.restarts;
    base.max_iters = cfg.max_iters;
    base.tol = cfg.tol;
    let bound = mixture::nonparametric_bound(&dataset, &base, &schedule, &rng)?;
    bound.mixture.save(out.join("mixture.json"))?;

    let full_report = mixture::EmReport {
        trace: bound.reports.iter().flat_map(|r| r.trace.clone()).collect(),
        final_loglik: bound.best_loglik,
        effective_components: bound.mixture.effective_components(),
        best_restart: 0,
    };
    full_report.write_csv(out.join("em_trace.csv"))?;

    let mut bound_json = serde_json::json!({
        "best_loglik": bound.best_loglik,
        "best_components": bound.best_components,
        "per_k": bound.per_k,
        "note": "multi-restart EM only certifies a local optimum; this is a lower estimate of the nonparametric bound",
    });

    if let Some(ckpt_path) = &cfg.checkpoint {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let rows = dataset.rows(&dataset.train_indices());
        let elbo = training::dataset_elbo_total(
            &ckpt.decoder,
            &ckpt.encoder,
            &rows,
            cfg.elbo_samples,
            &rng.fork(0xE1),
        )?;
        let iw = training::dataset_iw_total(
            &ckpt.decoder,
            &ckpt.encoder,
            &rows,
            cfg.iw_samples,
            &rng.fork(0xE2),
        )?;
        // the bound must cover the same rows
        let train_ds = subset_dataset(&dataset, &dataset.train_indices())?;
        let train_bound = mixture::nonparametric_bound(
            &train_ds,
            &base,
            &schedule_for(&schedule, train_ds.n()),
            &rng.fork(0xE3),
        )?;
        let sandwich = mixture::sandwich_report(elbo, iw, train_bound.best_loglik);
        std::fs::write(
            out.join("sandwich.json"),
            serde_json::to_string_pretty(&sandwich).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        bound_json["sandwich"] = serde_json::to_value(&sandwich).map_err(|e| Error::Format(e.to_string()))?;
        println!(
            "[mixture-bound] sandwich: ELBO {:.3} <= IW {:.3} <= bound {:.3} (ordering ok: {})",
            sandwich.elbo.value, sandwich.iw_loglik.value, sandwich.mixture_bound, sandwich.ordering_ok
        );
    }

    std::fs::write(
        out.join("bound.json"),
        serde_json::to_string_pretty(&bound_json).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    println!(
        "[mixture-bound] best l(G) = {:.4} at K = {} ({} effective components); wrote {}",
        bound.best_loglik,
        bound.best_components,
        bound.mixture.effective_components(),
        out.display()
    );
    Ok(())
}

fn schedule_for(schedule: &[usize], n: usize) -> Vec<usize> {
    let mut s: Vec<usize> = schedule.iter().map(|&k| k.min(n)).collect();
    s.sort_unstable();
    s.dedup();
    s
}

fn subset_dataset(data: &Dataset, idx: &[usize]) -> Result<Dataset, Error> {
    let mut values = Vec::with_capacity(idx.len() * data.p());
    for &i in idx {
        values.extend_from_slice(data.row(i));
    }
    Dataset::new(data.kind, idx.len(), data.p(), values)
}

fn parse_scenario(s: &str) -> Result<MaskScenario, Error> {
    match s {
        "top-half" => Ok(MaskScenario::TopHalf),
        "bottom-half" => Ok(MaskScenario::BottomHalf),
        other => {
            let frac = other
                .strip_prefix("mar:")
                .or_else(|| other.strip_prefix("mar-"))
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "unknown scenario '{other}' (mar:<fraction> | top-half | bottom-half)"
                    ))
                })?;
            let fraction: f64 = frac
                .parse()
                .map_err(|e| Error::Contract(format!("bad MAR fraction '{frac}': {e}")))?;
            Ok(MaskScenario::Mar { fraction })
        }
    }
}

fn parse_sampler(s: &str) -> Result<SamplerKind, Error> {
    match s {
        "pg" | "pseudo-gibbs" => Ok(SamplerKind::PseudoGibbs),
        "mwg" | "metropolis-within-gibbs" => Ok(SamplerKind::MetropolisWithinGibbs),
        other => Err(Error::Contract(format!("unknown sampler '{other}' (pg | mwg)"))),
    }
}

fn run_impute(args: ImputeArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "impute");
    let (cfg, _) = effective_config(&args, &args.config, &out, "impute")?;

    let dataset = Dataset::load(&cfg.data)?;
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    let scenario = parse_scenario(&cfg.scenario)?;
    let sampler = parse_sampler(&cfg.sampler)?;

    let mut items = dataset.test_indices();
    if items.is_empty() {
        items = (0..dataset.n()).collect();
    }
    if let Some(cap) = cfg.max_items {
        items.truncate(cap);
    }

    let rng = RngStream::seed(cfg.seed);
    let results = imputation::impute_dataset(
        &ckpt.decoder,
        &ckpt.encoder,
        &dataset,
        &items,
        scenario,
        sampler,
        cfg.t,
        cfg.warmup,
        &rng,
    )?;
    let csv_path = out.join(format!("results_{}.csv", sampler));
    imputation::write_impute_csv(&results, &csv_path)?;

    if cfg.dump_traces {
        let trace_dir = out.join("traces");
        std::fs::create_dir_all(&trace_dir)?;
        let mask_rng = rng.fork(0x3A);
        let chain_salt = match sampler {
            SamplerKind::PseudoGibbs => 0x70,
            SamplerKind::MetropolisWithinGibbs => 0x77,
        };
        let chain_rng = rng.fork(chain_salt);
        for &item in &items {
            let mask = imputation::make_mask(dataset.p(), scenario, &mut mask_rng.fork(item as u64))?;
            let run = imputation::run_chain(
                &ckpt.decoder,
                &ckpt.encoder,
                dataset.row(item),
                &mask,
                sampler,
                cfg.t,
                cfg.warmup,
                &mut chain_rng.fork(item as u64),
                true,
            )?;
            let trace = run.trace.expect("trace recording requested");
            let mut bytes = Vec::with_capacity(trace.len() * mask.missing().len() * 8);
            for state in &trace {
                for v in state {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            std::fs::write(trace_dir.join(format!("item_{item}.f64le.bin")), bytes)?;
            let meta = serde_json::json!({
                "item_id": item,
                "steps": trace.len(),
                "missing_indices": mask.missing(),
                "layout": "row-major f64 little-endian, one row per step",
                "sampler": sampler.to_string(),
                "scenario": scenario.to_string(),
            });
            std::fs::write(
                trace_dir.join(format!("item_{item}.meta.json")),
                serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?,
            )?;
        }
    }

    let mean_f1 = results.iter().map(|r| r.f1).sum::<f64>() / results.len().max(1) as f64;
    let mean_acc = results.iter().map(|r| r.acceptance_rate).sum::<f64>() / results.len().max(1) as f64;
    println!(
        "[impute] {} items, sampler {}, scenario {}: mean F1 {:.4}, mean acceptance {:.3}; wrote {}",
        results.len(),
        sampler,
        scenario,
        mean_f1,
        mean_acc,
        csv_path.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    let out = resolve_out(&args.out, "eval");
    let (cfg, _) = effective_config(&args, &args.config, &out, "eval")?;

    let mut pg = Vec::new();
    let mut mwg = Vec::new();
    for path in &cfg.results {
        for row in imputation::read_impute_csv(path)? {
            match row.sampler.as_str() {
                "pg" => pg.push(row),
                "mwg" => mwg.push(row),
                other => {
                    return Err(Error::Format(format!(
                        "unknown sampler tag '{other}' in {}",
                        path.display()
                    )))
                }
            }
        }
    }
    let scores = stats::paired_scores(&cfg.label, &pg, &mwg)?;
    let table = stats::results_table(&scores)?;
    stats::write_table_csv(&table, out.join("table.csv"))?;
    println!("dataset,scenario,n_items,mean_f1_pg,mean_f1_mwg,f1_diff,w,p");
    for row in &table {
        println!(
            "{},{},{},{:.4},{:.4},{:+.4},{},{}",
            row.dataset,
            row.scenario,
            row.n_items,
            row.mean_f1_pg,
            row.mean_f1_mwg,
            row.f1_diff,
            row.w_statistic.map_or("-".into(), |w| format!("{w}")),
            row.p_display
        );
    }
    println!("[eval] wrote {}", out.join("table.csv").display());
    Ok(())
}
