//! Seeded end-to-end gradient check of the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{Domain, Level, Mesh};
use crate::model::{InputScaling, Model, ModelConfig, ModelInput};
use crate::nn::{finite_diff_check, mse_loss, GradCheckOptions, GradCheckReport, Mode, Tensor2D};

/// A small model on a random point cloud with a random regression target.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub model: Model,
    pub input: ModelInput,
    pub target: Tensor2D,
    pub mode: Mode,
}

/// `n` distinct uniform points in the unit square.
pub fn random_mesh(n: usize, seed: u64) -> Result<Mesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    Mesh::new(2, coords, Level::Output)
}

impl GradCheckCase {
    /// Unit-square model with the given convolution widths, `nodes` output
    /// nodes and embedding widths `embed`; batch norm in train mode.
    pub fn seeded(seed: u64, nodes: usize, widths: Vec<usize>, embed: (usize, usize)) -> Result<Self> {
        let domain = Domain::unit(2)?;
        let config = ModelConfig {
            embed_hidden: embed.0,
            f0_dim: embed.1,
            ..ModelConfig::desk(domain, widths)?
        };
        let mesh = random_mesh(nodes, seed)?;
        let scaling = InputScaling::fit((0.0, 99.0), [&[2.0][..], &[2.2][..]]);
        let model = Model::init(config, &mesh, scaling, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let input = ModelInput::new(rng.gen_range(0.0..99.0), vec![rng.gen_range(2.0..2.2)]);
        let target = Tensor2D::new(
            nodes,
            model.config.output_channels(),
            (0..nodes * model.config.output_channels())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;
        Ok(Self {
            model,
            input,
            target,
            mode: Mode::Train,
        })
    }

    pub fn loss(&self, model: &Model) -> Result<f64> {
        let (pred, _) = model.forward_cached(&self.input, self.mode)?;
        Ok(mse_loss(&pred.fields, &self.target)?.0)
    }

    /// Backward-pass gradients against central differences of the MSE loss.
    pub fn run(&self, options: &GradCheckOptions) -> Result<GradCheckReport> {
        let (pred, cache) = self.model.forward_cached(&self.input, self.mode)?;
        let (_, grad) = mse_loss(&pred.fields, &self.target)?;
        let grads = self.model.backward(&cache, &grad)?;
        let mut probe = self.model.clone();
        let mut params = self.model.params.clone();
        let mut failure = None;
        let report = finite_diff_check(
            &mut params,
            &grads,
            |p| {
                let loss = probe.params.copy_values_from(p).and_then(|_| self.loss(&probe));
                loss.unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            options,
        );
        match failure {
            Some(e) => Err(e),
            None => Ok(report),
        }
    }
}
