//! Field snapshots on the simulation mesh, pointwise normalization and a
//! synthetic analytic-flow generator.
//!
//! A dataset directory holds `manifest.json`, the output mesh (`mesh.msh1`)
//! and one FLD1 file per trajectory. Fields are stored in physical units with
//! channels `(p, vx, vy)`; training works on pointwise-normalized values.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, json_err, Result};
use crate::geometry::{Domain, Level, Mesh};
use crate::io::{read_fields, read_mesh, write_fields, write_mesh};
use crate::model::CHANNELS;
use crate::nn::Tensor2D;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MESH_FILE: &str = "mesh.msh1";
pub const NORM_EPS: f64 = 1e-8;

/// Fields of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<'a> {
    pub t: usize,
    pub lambda: &'a [f64],
    pub fields: &'a Tensor2D,
}

/// One simulation: a parameter vector and uniformly indexed frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub lambda: Vec<f64>,
    pub frames: Vec<Tensor2D>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    pub fn snapshot(&self, t: usize) -> Snapshot<'_> {
        Snapshot {
            t,
            lambda: &self.lambda,
            fields: &self.frames[t],
        }
    }
}

/// Per-node, per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Tensor2D,
    pub std: Tensor2D,
    pub eps: f64,
}

pub fn compute_norm_stats<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Result<NormStats> {
    let mut sum: Option<Tensor2D> = None;
    let mut count = 0usize;
    let trajectories: Vec<&Trajectory> = trajectories.into_iter().collect();
    for frame in trajectories.iter().flat_map(|t| &t.frames) {
        let acc = sum.get_or_insert_with(|| Tensor2D::zeros(frame.rows(), frame.cols()));
        frame.ensure_shape(acc.rows(), acc.cols(), "snapshot")?;
        for (a, v) in acc.as_mut_slice().iter_mut().zip(frame.as_slice()) {
            *a += v;
        }
        count += 1;
    }
    if count < 2 {
        return Err(invalid(format!(
            "normalization needs at least 2 snapshots, got {count}"
        )));
    }
    let mut mean = sum.expect("at least one frame");
    mean.as_mut_slice().iter_mut().for_each(|v| *v /= count as f64);
    let mut var = Tensor2D::zeros(mean.rows(), mean.cols());
    for frame in trajectories.iter().flat_map(|t| &t.frames) {
        for ((a, v), m) in var.as_mut_slice().iter_mut().zip(frame.as_slice()).zip(mean.as_slice()) {
            *a += (v - m) * (v - m);
        }
    }
    var.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = (*v / count as f64).sqrt());
    Ok(NormStats {
        mean,
        std: var,
        eps: NORM_EPS,
    })
}

impl NormStats {
    /// `(x - mean) / (std + eps)`.
    pub fn normalize(&self, fields: &Tensor2D) -> Result<Tensor2D> {
        fields.ensure_shape(self.mean.rows(), self.mean.cols(), "normalize")?;
        let data = fields
            .as_slice()
            .iter()
            .zip(self.mean.as_slice().iter().zip(self.std.as_slice()))
            .map(|(x, (m, s))| (x - m) / (s + self.eps))
            .collect();
        Tensor2D::new(fields.rows(), fields.cols(), data)
    }

    pub fn denormalize(&self, fields: &Tensor2D) -> Result<Tensor2D> {
        fields.ensure_shape(self.mean.rows(), self.mean.cols(), "denormalize")?;
        let data = fields
            .as_slice()
            .iter()
            .zip(self.mean.as_slice().iter().zip(self.std.as_slice()))
            .map(|(x, (m, s))| x * (s + self.eps) + m)
            .collect();
        Tensor2D::new(fields.rows(), fields.cols(), data)
    }
}

/// Trajectory indices of each split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    fn validate(&self, total: usize) -> Result<()> {
        let mut seen = vec![false; total];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= total || std::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("split entry {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid("split does not cover every trajectory"));
        }
        Ok(())
    }
}

/// Seeded assignment of `total` trajectories into `(train, val, test)` counts.
pub fn split_dataset(total: usize, counts: (usize, usize, usize), seed: u64) -> Result<Split> {
    let (train, val, test) = counts;
    if train + val + test != total {
        return Err(invalid(format!(
            "split counts {train}+{val}+{test} do not sum to {total} trajectories"
        )));
    }
    if train == 0 {
        return Err(invalid("the train split must not be empty"));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |n: usize, from: usize| {
        let mut v = order[from..from + n].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: take(train, 0),
        val: take(val, train),
        test: take(test, train + val),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub lambda: Vec<f64>,
    pub file: String,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: Domain,
    pub mesh: String,
    pub channels: Vec<String>,
    pub trajectories: Vec<TrajectoryEntry>,
    pub split: Split,
    pub generator: serde_json::Value,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(json_err(&path))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(json_err(&path))?;
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub mesh: Mesh,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        manifest.split.validate(manifest.trajectories.len())?;
        let mesh = read_mesh(&dir.join(&manifest.mesh))?;
        mesh.check_inside(&manifest.domain)?;
        let trajectories = manifest
            .trajectories
            .iter()
            .map(|entry| {
                let path = dir.join(&entry.file);
                let frames = read_fields(&path)?;
                if frames.len() != entry.steps {
                    return Err(invalid(format!(
                        "{} holds {} steps, manifest says {}",
                        path.display(),
                        frames.len(),
                        entry.steps
                    )));
                }
                if let Some(f) = frames.first() {
                    f.ensure_shape(mesh.node_count(), CHANNELS.len(), "trajectory frame")?;
                }
                Ok(Trajectory {
                    lambda: entry.lambda.clone(),
                    frames,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            mesh,
            trajectories,
        })
    }

    pub fn split(&self, name: SplitName) -> impl Iterator<Item = &Trajectory> {
        self.manifest.split.get(name).iter().map(|&i| &self.trajectories[i])
    }

    /// Statistics over the train split only.
    pub fn norm_stats(&self) -> Result<NormStats> {
        compute_norm_stats(self.split(SplitName::Train))
    }

    pub fn domain(&self) -> &Domain {
        &self.manifest.domain
    }
}

/// Parameters of the traveling-pulse generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub domain: Domain,
    pub num_nodes: usize,
    pub num_trajectories: usize,
    pub steps: usize,
    pub lambda_range: (f64, f64),
    pub seed: u64,
}

pub const SIGMA_FRACTION: f64 = 0.1;
pub const JITTER_FRACTION: f64 = 0.3;

/// Analytic fields `(p, vx, vy)` at `x` for time `t` of a `steps`-long run.
///
/// A Gaussian pulse of width `sigma = 0.1 L_x` centred at
/// `c(t) = (x_min + frac(lambda t / steps) L_x, y_mid)` travels along x; the
/// x-distance is taken periodically so the pulse re-enters smoothly.
pub fn analytic_fields(domain: &Domain, x: &[f64], t: f64, steps: usize, lambda: f64) -> [f64; 3] {
    let lx = domain.side(0);
    let sigma = SIGMA_FRACTION * lx;
    let phase = (lambda * t / steps as f64).rem_euclid(1.0);
    let cx = domain.min[0] + phase * lx;
    let cy = 0.5 * (domain.min[1] + domain.max[1]);
    let mut dx = x[0] - cx;
    dx -= lx * (dx / lx).round();
    let dy = x[1] - cy;
    let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    [g, lambda * g, lambda * g * dy / sigma]
}

/// Jittered lattice with roughly `num_nodes` nodes, strictly inside the domain.
pub fn jittered_lattice(domain: &Domain, num_nodes: usize, seed: u64) -> Result<Mesh> {
    if domain.dim() != 2 {
        return Err(invalid("the synthetic generator is two-dimensional"));
    }
    let (lx, ly) = (domain.side(0), domain.side(1));
    let pitch = (lx * ly / num_nodes as f64).sqrt();
    let nx = ((lx / pitch).round() as usize).max(1);
    let ny = ((ly / pitch).round() as usize).max(1);
    let (px, py) = (lx / nx as f64, ly / ny as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut coords = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let jx = rng.gen_range(-JITTER_FRACTION..=JITTER_FRACTION) * px;
            let jy = rng.gen_range(-JITTER_FRACTION..=JITTER_FRACTION) * py;
            coords.push(domain.min[0] + (i as f64 + 0.5) * px + jx);
            coords.push(domain.min[1] + (j as f64 + 0.5) * py + jy);
        }
    }
    Mesh::new(2, coords, Level::Output)
}

/// Builds the mesh and trajectories in memory; the manifest split is empty.
pub fn synthesize(config: &SyntheticConfig) -> Result<(Mesh, Vec<Trajectory>)> {
    config.domain.validate()?;
    if config.num_nodes < 10 {
        return Err(invalid(format!("need at least 10 nodes, got {}", config.num_nodes)));
    }
    if config.steps < 2 {
        return Err(invalid(format!("need at least 2 steps, got {}", config.steps)));
    }
    if config.num_trajectories < 1 {
        return Err(invalid("need at least one trajectory"));
    }
    let (lo, hi) = config.lambda_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(invalid(format!("invalid lambda range [{lo}, {hi}]")));
    }
    let mesh = jittered_lattice(&config.domain, config.num_nodes, config.seed)?;
    let trajectories = (0..config.num_trajectories)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(k as u64));
            let lambda = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let frames = (0..config.steps)
                .map(|t| {
                    let data = mesh
                        .nodes()
                        .flat_map(|x| analytic_fields(&config.domain, x, t as f64, config.steps, lambda))
                        .collect();
                    Tensor2D::new(mesh.node_count(), CHANNELS.len(), data)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Trajectory {
                lambda: vec![lambda],
                frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mesh, trajectories))
}

pub fn trajectory_file(k: usize) -> String {
    format!("traj_{k:03}.fld1")
}

/// Writes the mesh and trajectory files under `dir` and returns the
/// manifest (with every trajectory in the train split; not yet written).
pub fn generate_synthetic(config: &SyntheticConfig, dir: &Path) -> Result<DatasetManifest> {
    let (mesh, trajectories) = synthesize(config)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_mesh(&dir.join(MESH_FILE), &mesh)?;
    let mut entries = Vec::with_capacity(trajectories.len());
    for (k, traj) in trajectories.iter().enumerate() {
        let file = trajectory_file(k);
        write_fields(&dir.join(&file), &traj.frames)?;
        entries.push(TrajectoryEntry {
            lambda: traj.lambda.clone(),
            file,
            steps: traj.steps(),
        });
    }
    Ok(DatasetManifest {
        domain: config.domain.clone(),
        mesh: MESH_FILE.to_owned(),
        channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
        split: Split {
            train: (0..entries.len()).collect(),
            ..Split::default()
        },
        trajectories: entries,
        generator: serde_json::json!({
            "kind": "traveling-gaussian",
            "seed": config.seed,
            "num_nodes": config.num_nodes,
            "steps": config.steps,
            "lambda_range": [config.lambda_range.0, config.lambda_range.1],
            "sigma_fraction": SIGMA_FRACTION,
            "jitter_fraction": JITTER_FRACTION,
        }),
    })
}

/// Generates, splits and writes a complete dataset directory.
pub fn make_dataset(config: &SyntheticConfig, counts: (usize, usize, usize), dir: &Path) -> Result<DatasetManifest> {
    let mut manifest = generate_synthetic(config, dir)?;
    manifest.split = split_dataset(config.num_trajectories, counts, config.seed)?;
    manifest.write(dir)?;
    Ok(manifest)
}
