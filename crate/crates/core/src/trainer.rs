//! Training loop, evaluation metrics and the on-disk model directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NormStats, SplitName, Trajectory};
use crate::error::{invalid, io_err, json_err, Error, Result};
use crate::geometry::Mesh;
use crate::io::{read_mesh, write_mesh};
use crate::model::{InputScaling, Model, ModelConfig, ModelInput};
use crate::nn::{
    adam_step, mse_loss, AdamState, BatchNormState, Buffer, Checkpoint, Mode, ParamStore, PlateauScheduler, Tensor2D,
};

pub const CONFIG_FILE: &str = "config.json";
pub const MESH_FILE: &str = "mesh.msh1";
pub const METRICS_HEADER: &str = "t,rmse,pred_mean_vnorm,target_mean_vnorm";
pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,lr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Snapshots per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs between resumable checkpoints when training through the CLI; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            initial_lr: 5e-2,
            factor: 0.1,
            patience: 10,
            min_lr: 1e-6,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !positive(self.initial_lr) || !positive(self.min_lr) || !(positive(self.factor) && self.factor < 1.0) {
            return Err(invalid(
                "learning rates must be positive and the decay factor in (0, 1)",
            ));
        }
        Ok(())
    }

    pub fn scheduler(&self) -> PlateauScheduler {
        PlateauScheduler {
            patience: self.patience,
            factor: self.factor,
            min_lr: self.min_lr,
            ..PlateauScheduler::new(self.initial_lr)
        }
    }
}

/// A training pair in normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: ModelInput,
    pub target: Tensor2D,
}

/// Normalized samples for every time step of the given trajectories.
pub fn samples<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    stats: &NormStats,
    steps: Option<std::ops::Range<usize>>,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for traj in trajectories {
        let range = steps.clone().unwrap_or(0..traj.steps());
        for t in range.filter(|&t| t < traj.steps()) {
            out.push(Sample {
                input: ModelInput::new(t as f64, traj.lambda.clone()),
                target: stats.normalize(&traj.frames[t])?,
            });
        }
    }
    Ok(out)
}

/// Time range and parameter range of the train split.
pub fn fit_scaling(dataset: &Dataset) -> Result<InputScaling> {
    let train: Vec<&Trajectory> = dataset.split(SplitName::Train).collect();
    let last = train
        .iter()
        .map(|t| t.steps())
        .max()
        .ok_or_else(|| invalid("train split is empty"))?;
    Ok(InputScaling::fit(
        (0.0, last.saturating_sub(1) as f64),
        train.iter().map(|t| t.lambda.as_slice()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Best {
    val_loss: f64,
    epoch: usize,
    params: ParamStore,
    bn: Vec<BatchNormState>,
}

/// Optimizer, scheduler and bookkeeping that survive across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    pub scheduler: PlateauScheduler,
    pub history: Vec<EpochRecord>,
    best: Option<Best>,
}

fn mean_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|s| {
            let (pred, _) = model.forward_cached(&s.input, Mode::Eval)?;
            Ok(mse_loss(&pred.fields, &s.target)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: AdamState::new(&model.params, config.initial_lr),
            scheduler: config.scheduler(),
            history: Vec::new(),
            best: None,
            config,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.epoch)
    }

    /// One pass over `train`; validation on `val` (or `train` if `val` is empty).
    pub fn run_epoch(&mut self, model: &mut Model, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(invalid("no training samples"));
        }
        let epoch = self.history.len() + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let lr = self.adam.lr;
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let shared: &Model = model;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let (pred, cache) = shared.forward_cached(&s.input, Mode::Train)?;
                    let (loss, grad) = mse_loss(&pred.fields, &s.target)?;
                    let grads = shared.backward(&cache, &grad)?;
                    Ok((loss, grads, cache))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            model.params.zero_grad();
            for (loss, grads, cache) in &results {
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("training loss at epoch {epoch}, batch {b}"),
                    });
                }
                loss_sum += loss;
                model.params.accumulate(grads, scale)?;
                model.absorb_batch_stats(cache);
            }
            adam_step(&mut model.params, &mut self.adam).map_err(|e| match e {
                Error::NonFinite { what } => Error::NonFinite {
                    what: format!("{what} at epoch {epoch}, batch {b}"),
                },
                other => other,
            })?;
            model.params.zero_grad();
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = mean_loss(model, if val.is_empty() { train } else { val })?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("validation loss at epoch {epoch}"),
            });
        }
        if self.best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
            self.best = Some(Best {
                val_loss,
                epoch,
                params: model.params.clone(),
                bn: model.bn.clone(),
            });
        }
        self.adam.lr = self.scheduler.step(val_loss);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Runs until `config.epochs` epochs are done, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        model: &mut Model,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&Self, &Model, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while self.history.len() < self.config.epochs {
            let record = self.run_epoch(model, train, val)?;
            on_epoch(self, model, &record)?;
        }
        Ok(())
    }

    /// Loads the best-validation weights into `model`.
    pub fn restore_best(&self, model: &mut Model) -> Result<()> {
        if let Some(best) = &self.best {
            model.params.copy_values_from(&best.params)?;
            model.bn = best.bn.clone();
        }
        Ok(())
    }
}

/// Trains for `config.epochs` epochs and leaves the best-validation weights in `model`.
pub fn train(model: &mut Model, train: &[Sample], val: &[Sample], config: TrainConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(model, train, val, |_, _, _| Ok(()))?;
    trainer.restore_best(model)?;
    Ok(trainer)
}

/// Per-time-step errors pooled over the trajectories of one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub rmse: Vec<f64>,
    pub pred_mean_vnorm: Vec<f64>,
    pub target_mean_vnorm: Vec<f64>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

fn mean_vnorm(fields: &Tensor2D) -> f64 {
    let n = fields.rows().max(1) as f64;
    (0..fields.rows())
        .map(|i| fields.row(i)[1..].iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metrics from normalized predictions and targets, indexed `[trajectory][t]`.
pub fn metrics_from_predictions(
    predictions: &[Vec<Tensor2D>],
    targets: &[Vec<Tensor2D>],
    stats: &NormStats,
) -> Result<Metrics> {
    let steps = targets.first().map_or(0, Vec::len);
    if targets.is_empty() || predictions.len() != targets.len() {
        return Err(invalid("need matching, non-empty prediction and target sets"));
    }
    if targets.iter().chain(predictions).any(|t| t.len() != steps) {
        return Err(invalid("trajectories in a split must have the same number of steps"));
    }
    let per_t = (0..steps)
        .into_par_iter()
        .map(|t| {
            let (mut sq, mut count, mut pv, mut tv) = (0.0, 0usize, 0.0, 0.0);
            for (pred, target) in predictions.iter().zip(targets) {
                let (p, y) = (&pred[t], &target[t]);
                p.ensure_shape(y.rows(), y.cols(), "prediction")?;
                for (a, b) in p.as_slice().iter().zip(y.as_slice()) {
                    sq += (a - b) * (a - b);
                }
                count += y.as_slice().len();
                pv += mean_vnorm(&stats.denormalize(p)?);
                tv += mean_vnorm(&stats.denormalize(y)?);
            }
            let k = targets.len() as f64;
            Ok(((sq / count.max(1) as f64).sqrt(), pv / k, tv / k))
        })
        .collect::<Result<Vec<_>>>()?;
    let rmse: Vec<f64> = per_t.iter().map(|r| r.0).collect();
    let (rmse_mean, rmse_std) = mean_std(&rmse);
    Ok(Metrics {
        pred_mean_vnorm: per_t.iter().map(|r| r.1).collect(),
        target_mean_vnorm: per_t.iter().map(|r| r.2).collect(),
        rmse,
        rmse_mean,
        rmse_std,
    })
}

/// Normalized eval-mode predictions for every step of `traj`.
pub fn predict_trajectory(model: &Model, traj: &Trajectory) -> Result<Vec<Tensor2D>> {
    (0..traj.steps())
        .into_par_iter()
        .map(|t| {
            let (pred, _) = model.forward_cached(&ModelInput::new(t as f64, traj.lambda.clone()), Mode::Eval)?;
            Ok(pred.fields)
        })
        .collect()
}

/// Evaluates `model` in eval mode on the trajectories of `split`.
pub fn evaluate(model: &Model, dataset: &Dataset, stats: &NormStats, split: SplitName) -> Result<Metrics> {
    let trajs: Vec<&Trajectory> = dataset.split(split).collect();
    if trajs.is_empty() {
        return Err(invalid(format!("split {split:?} is empty")));
    }
    evaluate_trajectories(model, &trajs, stats)
}

pub fn evaluate_trajectories(model: &Model, trajs: &[&Trajectory], stats: &NormStats) -> Result<Metrics> {
    let predictions = trajs
        .iter()
        .map(|t| predict_trajectory(model, t))
        .collect::<Result<Vec<_>>>()?;
    let targets = trajs
        .iter()
        .map(|t| t.frames.iter().map(|f| stats.normalize(f)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    metrics_from_predictions(&predictions, &targets, stats)
}

/// Trend of the error along a trajectory, ignoring the first and last 5% of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccumulationReport {
    /// Pearson correlation of `(t, rmse_t)`.
    pub correlation: f64,
    /// Mean of the last tenth over the median, both within the interior.
    pub ratio: f64,
    pub interior: (usize, usize),
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, sx) = mean_std(x);
    let (my, sy) = mean_std(y);
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    cov / (sx * sy)
}

pub fn error_accumulation_stat(rmse: &[f64]) -> AccumulationReport {
    let n = rmse.len();
    let cut = n / 20;
    let (lo, hi) = if n - 2 * cut >= 2 { (cut, n - cut) } else { (0, n) };
    let interior = &rmse[lo..hi];
    let tail = &interior[interior.len() - (interior.len() / 10).max(1)..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let med = median(interior);
    let ratio = if med > 0.0 {
        tail_mean / med
    } else if tail_mean == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    let ts: Vec<f64> = (lo..hi).map(|t| t as f64).collect();
    AccumulationReport {
        correlation: pearson(&ts, interior),
        ratio,
        interior: (lo, hi),
    }
}

/// Error past the training time horizon relative to the interior median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizonReport {
    pub trained_steps: usize,
    pub interior_median: f64,
    pub extrapolated_mean: f64,
}

impl HorizonReport {
    pub fn degraded(&self) -> bool {
        self.extrapolated_mean > self.interior_median
    }
}

pub fn horizon_report(rmse: &[f64], trained_steps: usize) -> Result<HorizonReport> {
    if trained_steps == 0 || trained_steps >= rmse.len() {
        return Err(invalid(format!(
            "horizon {trained_steps} must fall inside {} steps",
            rmse.len()
        )));
    }
    let extra = &rmse[trained_steps..];
    Ok(HorizonReport {
        trained_steps,
        interior_median: median(&rmse[..trained_steps]),
        extrapolated_mean: extra.iter().sum::<f64>() / extra.len() as f64,
    })
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn metrics_csv(metrics: &Metrics) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (t, rmse) in metrics.rmse.iter().enumerate() {
        let _ = writeln!(
            out,
            "{t},{},{},{}",
            fmt17(*rmse),
            fmt17(metrics.pred_mean_vnorm[t]),
            fmt17(metrics.target_mean_vnorm[t])
        );
    }
    out
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            fmt17(r.train_loss),
            fmt17(r.val_loss),
            fmt17(r.lr)
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Contents of `config.json` in a model directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDirConfig {
    pub model: ModelConfig,
    pub scaling: InputScaling,
    /// Where the normalization statistics live.
    pub norm_stats: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerExtra {
    config: TrainConfig,
    scheduler: PlateauScheduler,
    history: Vec<EpochRecord>,
    best: Option<(usize, f64)>,
}

/// A model directory read back from disk.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: Model,
    pub stats: NormStats,
    pub trainer: Option<Trainer>,
}

fn tensor_buffer(t: &Tensor2D) -> Buffer {
    Buffer {
        shape: vec![t.rows(), t.cols()],
        value: t.as_slice().to_vec(),
    }
}

fn bn_buffers(buffers: &mut BTreeMap<String, Buffer>, prefix: &str, bn: &[BatchNormState]) {
    for (k, state) in bn.iter().enumerate() {
        for (name, v) in [
            ("running_mean", &state.running_mean),
            ("running_var", &state.running_var),
        ] {
            buffers.insert(
                format!("{prefix}bn{}.{name}", k + 1),
                Buffer {
                    shape: vec![v.len()],
                    value: v.clone(),
                },
            );
        }
    }
}

fn take_buffer(buffers: &BTreeMap<String, Buffer>, path: &str, len: usize) -> Result<Vec<f64>> {
    let b = buffers
        .get(path)
        .ok_or_else(|| Error::Incompatible(format!("missing buffer {path}")))?;
    if b.value.len() != len {
        return Err(Error::Incompatible(format!(
            "buffer {path} has {} values, expected {len}",
            b.value.len()
        )));
    }
    Ok(b.value.clone())
}

fn restore_bn(buffers: &BTreeMap<String, Buffer>, prefix: &str, bn: &mut [BatchNormState]) -> Result<()> {
    for (k, state) in bn.iter_mut().enumerate() {
        let c = state.channels();
        state.running_mean = take_buffer(buffers, &format!("{prefix}bn{}.running_mean", k + 1), c)?;
        state.running_var = take_buffer(buffers, &format!("{prefix}bn{}.running_var", k + 1), c)?;
    }
    Ok(())
}

/// Writes `config.json`, `params.json`/`params.bin` and `mesh.msh1` under `dir`.
/// With a trainer, optimizer and scheduler state are included so training can resume.
pub fn save_model(dir: &Path, model: &Model, stats: &NormStats, trainer: Option<&Trainer>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let hash = model.config.hash();
    let dir_config = ModelDirConfig {
        model: model.config.clone(),
        scaling: model.scaling.clone(),
        norm_stats: format!("{} buffers norm.mean, norm.std", crate::nn::checkpoint::BLOB_FILE),
        config_hash: hash.clone(),
    };
    let path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&dir_config).map_err(json_err(&path))?;
    write_text(&path, &(text + "\n"))?;

    let mut buffers = BTreeMap::new();
    bn_buffers(&mut buffers, "", &model.bn);
    buffers.insert("norm.mean".to_owned(), tensor_buffer(&stats.mean));
    buffers.insert("norm.std".to_owned(), tensor_buffer(&stats.std));
    let mut extra = serde_json::Value::Null;
    if let Some(tr) = trainer {
        if let Some(best) = &tr.best {
            bn_buffers(&mut buffers, "best.", &best.bn);
            for (p, param) in best.params.iter() {
                buffers.insert(
                    format!("best.{p}"),
                    Buffer {
                        shape: param.shape.clone(),
                        value: param.value.clone(),
                    },
                );
            }
        }
        extra = serde_json::to_value(TrainerExtra {
            config: tr.config.clone(),
            scheduler: tr.scheduler.clone(),
            history: tr.history.clone(),
            best: tr.best.as_ref().map(|b| (b.epoch, b.val_loss)),
        })
        .map_err(json_err(dir))?;
    }
    Checkpoint {
        params: model.params.clone(),
        buffers,
        adam: trainer.map(|t| t.adam.clone()),
        config_hash: hash,
        extra,
    }
    .write(dir)?;
    write_mesh(&dir.join(MESH_FILE), model.hierarchy.output_mesh())
}

pub fn read_dir_config(dir: &Path) -> Result<ModelDirConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(json_err(&path))
}

/// Reads a model directory; fails with `Incompatible` if the stored
/// configuration no longer matches the parameter checkpoint.
pub fn load_model(dir: &Path) -> Result<SavedModel> {
    let cfg = read_dir_config(dir)?;
    let hash = cfg.model.hash();
    let ckpt = Checkpoint::read(dir)?;
    if ckpt.config_hash != hash {
        return Err(Error::Incompatible(format!(
            "config hash {hash} does not match checkpoint hash {}",
            ckpt.config_hash
        )));
    }
    let mesh: Mesh = read_mesh(&dir.join(MESH_FILE))?;
    let mut model = Model::init(cfg.model, &mesh, cfg.scaling, 0)?;
    model.params.copy_values_from(&ckpt.params)?;
    restore_bn(&ckpt.buffers, "", &mut model.bn)?;
    let (n, c) = (mesh.node_count(), model.config.output_channels());
    let stats = NormStats {
        mean: Tensor2D::new(n, c, take_buffer(&ckpt.buffers, "norm.mean", n * c)?)?,
        std: Tensor2D::new(n, c, take_buffer(&ckpt.buffers, "norm.std", n * c)?)?,
        eps: crate::dataset::NORM_EPS,
    };
    let trainer = match (&ckpt.adam, ckpt.extra.is_null()) {
        (Some(adam), false) => {
            let extra: TrainerExtra = serde_json::from_value(ckpt.extra.clone()).map_err(json_err(dir))?;
            let best = match extra.best {
                Some((epoch, val_loss)) => {
                    let mut params = model.params.clone();
                    let mut best_values = ParamStore::new();
                    for (p, param) in model.params.iter() {
                        let v = take_buffer(&ckpt.buffers, &format!("best.{p}"), param.value.len())?;
                        best_values.insert(p.clone(), param.shape.clone(), v)?;
                    }
                    params.copy_values_from(&best_values)?;
                    let mut bn = model.bn.clone();
                    restore_bn(&ckpt.buffers, "best.", &mut bn)?;
                    Some(Best {
                        val_loss,
                        epoch,
                        params,
                        bn,
                    })
                }
                None => None,
            };
            Some(Trainer {
                config: extra.config,
                adam: adam.clone(),
                scheduler: extra.scheduler,
                history: extra.history,
                best,
            })
        }
        _ => None,
    };
    Ok(SavedModel { model, stats, trainer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Domain, Level};

    fn toy() -> (Model, NormStats, Vec<Sample>) {
        let domain = Domain::unit(2).unwrap();
        let coords: Vec<f64> = (0..6)
            .flat_map(|i| (0..6).flat_map(move |j| [0.1 + 0.16 * i as f64, 0.1 + 0.16 * j as f64]))
            .collect();
        let mesh = Mesh::new(2, coords, Level::Output).unwrap();
        let frames = (0..2)
            .map(|t| {
                let data = mesh
                    .nodes()
                    .flat_map(|x| [x[0] * (t + 1) as f64, x[1], (x[0] - t as f64).sin()])
                    .collect();
                Tensor2D::new(mesh.node_count(), 3, data).unwrap()
            })
            .collect();
        let traj = Trajectory {
            lambda: vec![2.0],
            frames,
        };
        let stats = crate::dataset::compute_norm_stats([&traj]).unwrap();
        let s = samples([&traj], &stats, None).unwrap();
        let config = ModelConfig {
            embed_hidden: 16,
            f0_dim: 8,
            ..ModelConfig::desk(domain, vec![8, 3]).unwrap()
        };
        let scaling = InputScaling::fit((0.0, 1.0), [traj.lambda.as_slice()]);
        (Model::init(config, &mesh, scaling, 5).unwrap(), stats, s)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            initial_lr: 1e-2,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn toy_training_reduces_loss() {
        let (mut model, _, s) = toy();
        let before = mean_loss(&model, &s).unwrap();
        let tr = train(&mut model, &s, &[], cfg(50)).unwrap();
        assert_eq!(tr.history.len(), 50);
        assert!(tr.history.last().unwrap().train_loss < tr.history[0].train_loss);
        assert!(mean_loss(&model, &s).unwrap() < before);
        assert!(tr.history.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn same_seed_same_curve() {
        let (mut a, _, s) = toy();
        let (mut b, _, _) = toy();
        let ha = train(&mut a, &s, &[], cfg(5)).unwrap().history;
        let hb = train(&mut b, &s, &[], cfg(5)).unwrap().history;
        assert_eq!(ha, hb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (mut full, stats, s) = toy();
        let mut tr = Trainer::new(&full, cfg(4)).unwrap();
        tr.run(&mut full, &s, &[], |_, _, _| Ok(())).unwrap();

        let (mut part, _, _) = toy();
        let mut tr2 = Trainer::new(&part, cfg(2)).unwrap();
        tr2.run(&mut part, &s, &[], |_, _, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &part, &stats, Some(&tr2)).unwrap();
        let SavedModel { mut model, trainer, .. } = load_model(dir.path()).unwrap();
        let mut trainer = trainer.unwrap();
        assert_eq!(trainer, tr2);
        trainer.config.epochs = 4;
        trainer.run(&mut model, &s, &[], |_, _, _| Ok(())).unwrap();
        assert_eq!(trainer.history, tr.history);
        assert_eq!(model.params, full.params);
    }

    #[test]
    fn save_load_forward_is_bitwise() {
        let (mut model, stats, s) = toy();
        train(&mut model, &s, &[], cfg(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model, &stats, None).unwrap();
        let loaded = load_model(dir.path()).unwrap();
        assert_eq!(loaded.stats, stats);
        assert!(loaded.trainer.is_none());
        let input = ModelInput::new(0.5, vec![2.0]);
        let a = model.forward_cached(&input, Mode::Eval).unwrap().0;
        let b = loaded.model.forward_cached(&input, Mode::Eval).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn altered_config_is_rejected() {
        let (model, stats, _) = toy();
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model, &stats, None).unwrap();
        let mut cfg = read_dir_config(dir.path()).unwrap();
        cfg.model.embed_hidden = 17;
        write_text(&dir.path().join(CONFIG_FILE), &serde_json::to_string(&cfg).unwrap()).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Incompatible(_))));
    }

    #[test]
    fn metric_examples() {
        let stats = NormStats {
            mean: Tensor2D::zeros(2, 3),
            std: Tensor2D::new(2, 3, vec![1.0; 6]).unwrap(),
            eps: 0.0,
        };
        let targets = vec![vec![
            Tensor2D::new(2, 3, vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
            4
        ]];
        let perfect = metrics_from_predictions(&targets, &targets, &stats).unwrap();
        assert!(perfect.rmse.iter().all(|r| *r == 0.0));
        assert_eq!(perfect.rmse.len(), 4);
        let zero = vec![vec![Tensor2D::zeros(2, 3); 4]];
        let m = metrics_from_predictions(&zero, &targets, &stats).unwrap();
        assert!(m.rmse.iter().all(|r| (r - 1.0).abs() < 1e-15));
        assert_eq!((m.rmse_mean, m.rmse_std), (1.0, 0.0));
        assert!((m.target_mean_vnorm[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.pred_mean_vnorm[0], 0.0);
        let csv = metrics_csv(&m);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with(METRICS_HEADER));
    }

    #[test]
    fn accumulation_examples() {
        let flat = error_accumulation_stat(&[0.02; 100]);
        assert_eq!((flat.correlation, flat.ratio), (0.0, 1.0));
        assert_eq!(flat.interior, (5, 95));
        let linear: Vec<f64> = (0..100).map(|t| 0.01 + 0.001 * t as f64).collect();
        let r = error_accumulation_stat(&linear);
        assert!((r.correlation - 1.0).abs() < 1e-12);
        assert!(r.ratio > 1.0);
    }

    #[test]
    fn horizon_examples() {
        let mut rmse = vec![0.01; 100];
        rmse[50..].iter_mut().for_each(|v| *v = 0.1);
        let h = horizon_report(&rmse, 50).unwrap();
        assert!(h.degraded());
        assert!(horizon_report(&rmse, 100).is_err());
    }

    #[test]
    fn history_format() {
        let h = [EpochRecord {
            epoch: 1,
            train_loss: 0.1,
            val_loss: 0.2,
            lr: 5e-2,
        }];
        assert_eq!(
            history_csv(&h),
            "epoch,train_loss,val_loss,lr\n1,1.0000000000000001e-1,2.0000000000000001e-1,5.0000000000000003e-2\n"
        );
    }
}
