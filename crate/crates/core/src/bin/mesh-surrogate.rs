//! Command-line front end: make-data, train, eval, predict, gradcheck.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mesh_surrogate::dataset::{make_dataset, Dataset, SplitName, SyntheticConfig, MANIFEST_FILE};
use mesh_surrogate::geometry::{Domain, HierarchyConfig};
use mesh_surrogate::io::write_fields;
use mesh_surrogate::model::{InferenceNorm, Model, ModelConfig, ModelInput};
use mesh_surrogate::nn::{GradCheckOptions, Mode};
use mesh_surrogate::splineconv::SplineConfig;
use mesh_surrogate::trainer::{
    error_accumulation_stat, evaluate, fit_scaling, history_csv, load_model, metrics_csv, samples, save_model,
    write_text, TrainConfig, Trainer,
};
use mesh_surrogate::verify::GradCheckCase;

const RESOLVED_CONFIG: &str = "run_config.json";
const RESUME_DIR: &str = "resume";

/// A problem with the command line or its inputs; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataSection {
    dir: Option<PathBuf>,
    trajectories: usize,
    steps: usize,
    nodes: usize,
    lambda_min: f64,
    lambda_max: f64,
    domain_min: Vec<f64>,
    domain_max: Vec<f64>,
    /// Trajectory counts for train, val and test.
    split: [usize; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            trajectories: 11,
            steps: 100,
            nodes: 300,
            lambda_min: 2.0,
            lambda_max: 2.2,
            domain_min: vec![0.0, 0.0],
            domain_max: vec![2.0, 1.0],
            split: [9, 1, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    widths: Vec<usize>,
    embed_hidden: usize,
    f0_dim: usize,
    spline: SplineConfig,
    /// Lattice spacings of the intermediate meshes; halving from the domain length if absent.
    spacings: Option<Vec<f64>>,
    inference_norm: InferenceNorm,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            widths: vec![64, 32, 16, 3],
            embed_hidden: 128,
            f0_dim: 64,
            spline: SplineConfig::default(),
            spacings: None,
            inference_norm: InferenceNorm::default(),
        }
    }
}

/// Seeds derived from the run seed, recorded for reproducibility.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct SubSeeds {
    data: u64,
    init: u64,
    shuffle: u64,
}

impl SubSeeds {
    fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            data: seed,
            init: rng.next_u64(),
            shuffle: rng.next_u64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    seeds: SubSeeds,
    data: DataSection,
    model: ModelSection,
    train: TrainConfig,
    /// Fraction of each trajectory's leading steps used for training.
    train_horizon: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: SubSeeds::derive(0),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig {
                epochs: 300,
                initial_lr: 1e-2,
                ..TrainConfig::default()
            },
            train_horizon: 1.0,
        }
    }
}

impl RunConfig {
    fn domain(&self) -> Result<Domain> {
        Domain::new(self.data.domain_min.clone(), self.data.domain_max.clone()).map_err(|e| usage(e.to_string()))
    }

    fn model_config(&self, domain: Domain) -> Result<ModelConfig> {
        let m = &self.model;
        let mut config = ModelConfig::desk(domain, m.widths.clone()).map_err(|e| usage(e.to_string()))?;
        config.embed_hidden = m.embed_hidden;
        config.f0_dim = m.f0_dim;
        config.spline = SplineConfig {
            dim: config.domain.dim(),
            ..m.spline
        };
        config.inference_norm = m.inference_norm;
        if let Some(spacings) = &m.spacings {
            config.hierarchy = HierarchyConfig::with_default_radii(spacings.clone());
        }
        config.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(
    name = "mesh-surrogate",
    version,
    about = "Direct-time spline-convolution surrogate for mesh fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectories: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        lambda_min: Option<f64>,
        #[arg(long)]
        lambda_max: Option<f64>,
        /// Train,val,test trajectory counts, e.g. 9,1,1
        #[arg(long, value_delimiter = ',', num_args = 3)]
        split: Option<Vec<usize>>,
    },
    /// Train a model on a dataset directory
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Convolution widths, e.g. 64,32,16,3
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        /// Train only on this leading fraction of each trajectory
        #[arg(long)]
        horizon: Option<f64>,
        /// Continue from the last periodic checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a model on a dataset split and write metrics.csv
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict the fields for one (t, lambda) and write them as FLD1
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
    },
    /// Check model gradients against central finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        nodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "16,8,3")]
        widths: Vec<usize>,
        /// Check a seeded subset of this many coordinates
        #[arg(long)]
        max_coords: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.seeds = SubSeeds::derive(config.seed);
    config.train.seed = config.seeds.shuffle;
    Ok(config)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| usage("--out is required"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_resolved<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(&dir.join(RESOLVED_CONFIG), &(text + "\n"))?;
    Ok(())
}

fn require_dataset(dir: &Path) -> Result<()> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        bail!(usage(format!("dataset manifest not found: {}", manifest.display())));
    }
    Ok(())
}

fn require_model(dir: &Path) -> Result<()> {
    let config = dir.join(mesh_surrogate::trainer::CONFIG_FILE);
    if !config.is_file() {
        bail!(usage(format!("model config not found: {}", config.display())));
    }
    Ok(())
}

fn cmd_make_data(common: &Common, overrides: MakeDataFlags) -> Result<()> {
    let mut config = load_config(common)?;
    let d = &mut config.data;
    d.trajectories = overrides.trajectories.unwrap_or(d.trajectories);
    d.steps = overrides.steps.unwrap_or(d.steps);
    d.nodes = overrides.nodes.unwrap_or(d.nodes);
    d.lambda_min = overrides.lambda_min.unwrap_or(d.lambda_min);
    d.lambda_max = overrides.lambda_max.unwrap_or(d.lambda_max);
    if let Some(s) = overrides.split {
        d.split = [s[0], s[1], s[2]];
    } else if overrides.trajectories.is_some() && d.split.iter().sum::<usize>() != d.trajectories {
        // keep one validation and one test trajectory when only the count changes
        let held = d.trajectories.min(3) / 2;
        d.split = [d.trajectories - 2 * held, held, held];
    }
    let dir = out_dir(common)?;
    config.data.dir = Some(dir.clone());
    let synthetic = SyntheticConfig {
        domain: config.domain()?,
        num_nodes: config.data.nodes,
        num_trajectories: config.data.trajectories,
        steps: config.data.steps,
        lambda_range: (config.data.lambda_min, config.data.lambda_max),
        seed: config.seeds.data,
    };
    let [tr, va, te] = config.data.split;
    let manifest = make_dataset(&synthetic, (tr, va, te), &dir)?;
    write_resolved(&dir, &config)?;
    eprintln!(
        "wrote {} trajectories of {} steps to {}",
        manifest.trajectories.len(),
        config.data.steps,
        dir.display()
    );
    Ok(())
}

struct MakeDataFlags {
    trajectories: Option<usize>,
    steps: Option<usize>,
    nodes: Option<usize>,
    lambda_min: Option<f64>,
    lambda_max: Option<f64>,
    split: Option<Vec<usize>>,
}

struct TrainFlags {
    data: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    widths: Option<Vec<usize>>,
    horizon: Option<f64>,
    resume: bool,
}

fn cmd_train(common: &Common, flags: TrainFlags) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(dir) = flags.data {
        config.data.dir = Some(dir);
    }
    config.train.epochs = flags.epochs.unwrap_or(config.train.epochs);
    config.train.initial_lr = flags.lr.unwrap_or(config.train.initial_lr);
    config.train.batch_size = flags.batch_size.unwrap_or(config.train.batch_size);
    if let Some(w) = flags.widths {
        config.model.widths = w;
    }
    config.train_horizon = flags.horizon.unwrap_or(config.train_horizon);
    if !(config.train_horizon > 0.0 && config.train_horizon <= 1.0) {
        bail!(usage(format!(
            "horizon must be in (0, 1], got {}",
            config.train_horizon
        )));
    }
    config.train.validate().map_err(|e| usage(e.to_string()))?;
    let data_dir = config.data.dir.clone().ok_or_else(|| usage("--data is required"))?;
    require_dataset(&data_dir)?;
    let out = out_dir(common)?;

    let dataset = Dataset::load(&data_dir)?;
    let stats = dataset.norm_stats()?;
    let model_config = config.model_config(dataset.domain().clone())?;
    let steps = dataset.trajectories.iter().map(|t| t.steps()).max().unwrap_or(0);
    let horizon = ((steps as f64 * config.train_horizon).round() as usize).max(1);
    let train = samples(dataset.split(SplitName::Train), &stats, Some(0..horizon))?;
    let val = samples(dataset.split(SplitName::Val), &stats, Some(0..horizon))?;
    write_resolved(&out, &config)?;

    let resume_dir = out.join(RESUME_DIR);
    let (mut model, mut trainer) = if flags.resume && resume_dir.join(mesh_surrogate::trainer::CONFIG_FILE).is_file() {
        let saved = load_model(&resume_dir)?;
        let mut trainer = saved.trainer.context("resume checkpoint has no optimizer state")?;
        trainer.config = config.train.clone();
        eprintln!("resuming after epoch {}", trainer.epochs_done());
        (saved.model, trainer)
    } else {
        let model = Model::init(model_config, &dataset.mesh, fit_scaling(&dataset)?, config.seeds.init)?;
        let trainer = Trainer::new(&model, config.train.clone())?;
        (model, trainer)
    };
    eprintln!(
        "model: {} parameters, nodes per level {:?}; {} training snapshots",
        model.parameter_count(),
        model.hierarchy.node_counts(),
        train.len()
    );
    let start = Instant::now();
    let every = config.train.checkpoint_every;
    trainer.run(&mut model, &train, &val, |tr, m, r| {
        eprintln!(
            "epoch {} train_loss={:.6e} val_loss={:.6e} lr={:.1e} elapsed={:.1}s",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            start.elapsed().as_secs_f64()
        );
        if every > 0 && r.epoch % every == 0 {
            save_model(&resume_dir, m, &stats, Some(tr))?;
        }
        Ok(())
    })?;
    write_text(&out.join("history.csv"), &history_csv(&trainer.history))?;
    trainer.restore_best(&mut model)?;
    save_model(&out, &model, &stats, None)?;
    eprintln!(
        "best validation epoch {:?}; model written to {}",
        trainer.best_epoch(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, model_dir: &Path, data_dir: &Path, split: &str) -> Result<()> {
    let config = load_config(common)?;
    let split: SplitName = split.parse().map_err(|e: mesh_surrogate::Error| usage(e.to_string()))?;
    require_model(model_dir)?;
    require_dataset(data_dir)?;
    let out = out_dir(common)?;
    let saved = load_model(model_dir)?;
    let dataset = Dataset::load(data_dir)?;
    if dataset.mesh != *saved.model.hierarchy.output_mesh() {
        bail!("dataset mesh differs from the model mesh");
    }
    let metrics = evaluate(&saved.model, &dataset, &saved.stats, split)?;
    let acc = error_accumulation_stat(&metrics.rmse);
    write_text(&out.join("metrics.csv"), &metrics_csv(&metrics))?;
    let summary = serde_json::json!({
        "split": format!("{split:?}").to_lowercase(),
        "rmse_mean": metrics.rmse_mean,
        "rmse_std": metrics.rmse_std,
        "accumulation": acc,
    });
    write_text(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    write_resolved(
        &out,
        &serde_json::json!({ "run": config, "model": model_dir, "data": data_dir, "split": summary["split"] }),
    )?;
    println!(
        "RMSE mean={:.6e} std={:.6e} accum_ratio={:.4} correlation={:.4}",
        metrics.rmse_mean, metrics.rmse_std, acc.ratio, acc.correlation
    );
    Ok(())
}

fn cmd_predict(common: &Common, model_dir: &Path, t: f64, lambda: Vec<f64>) -> Result<()> {
    let config = load_config(common)?;
    require_model(model_dir)?;
    let out = out_dir(common)?;
    let saved = load_model(model_dir)?;
    let input = ModelInput::new(t, lambda);
    let (pred, _) = saved.model.forward_cached(&input, Mode::Eval).map_err(|e| match e {
        mesh_surrogate::Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    let fields = saved.stats.denormalize(&pred.fields)?;
    let path = out.join("prediction.fld1");
    write_fields(&path, &[fields])?;
    write_resolved(
        &out,
        &serde_json::json!({ "run": config, "model": model_dir, "input": input }),
    )?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(
    common: &Common,
    tol: f64,
    nodes: usize,
    widths: Vec<usize>,
    max_coords: Option<usize>,
) -> Result<bool> {
    let config = load_config(common)?;
    if nodes < 2 {
        bail!(usage("--nodes must be at least 2"));
    }
    let case = GradCheckCase::seeded(
        config.seed,
        nodes,
        widths.clone(),
        (config.model.embed_hidden, config.model.f0_dim),
    )
    .map_err(|e| usage(e.to_string()))?;
    let options = GradCheckOptions {
        max_coords,
        seed: config.seed,
        ..GradCheckOptions::default()
    };
    let start = Instant::now();
    let report = case.run(&options)?;
    let passed = report.max_rel_error <= tol;
    println!(
        "max relative error {:.3e} over {} coordinates (worst {:?}) in {:.1}s: {}",
        report.max_rel_error,
        report.checked,
        report.worst,
        start.elapsed().as_secs_f64(),
        if passed { "ok" } else { "FAILED" }
    );
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        let value =
            serde_json::json!({ "run": config, "tol": tol, "nodes": nodes, "widths": widths, "report": report });
        write_resolved(out, &value)?;
    }
    Ok(passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::MakeData {
            common,
            trajectories,
            steps,
            nodes,
            lambda_min,
            lambda_max,
            split,
        } => cmd_make_data(
            &common,
            MakeDataFlags {
                trajectories,
                steps,
                nodes,
                lambda_min,
                lambda_max,
                split,
            },
        )
        .map(|_| true),
        Command::Train {
            common,
            data,
            epochs,
            lr,
            batch_size,
            widths,
            horizon,
            resume,
        } => cmd_train(
            &common,
            TrainFlags {
                data,
                epochs,
                lr,
                batch_size,
                widths,
                horizon,
                resume,
            },
        )
        .map(|_| true),
        Command::Eval {
            common,
            model,
            data,
            split,
        } => cmd_eval(&common, &model, &data, &split).map(|_| true),
        Command::Predict {
            common,
            model,
            t,
            lambda,
        } => cmd_predict(&common, &model, t, lambda).map(|_| true),
        Command::Gradcheck {
            common,
            tol,
            nodes,
            widths,
            max_coords,
        } => cmd_gradcheck(&common, tol, nodes, widths, max_coords),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let is_usage = err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some()
            || matches!(
                e.downcast_ref::<mesh_surrogate::Error>(),
                Some(mesh_surrogate::Error::InvalidArgument(_))
            )
    });
    if is_usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
