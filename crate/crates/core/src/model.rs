//! The direct-time decoder: `(t, lambda)` -> embedding at the singleton ->
//! spline convolutions through the mesh pyramid -> fields on the output mesh.
//!
//! Layer stack for `L` convolutions:
//!
//! ```text
//! x = [t, lambda] (min-max scaled)
//! f0 = affine2(relu(affine1(x)))
//! f1 = relu(bn1(conv1(f0)))
//! ...
//! out = conv_L(f_{L-1})
//! ```

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::geometry::{build_hierarchy, Domain, Hierarchy, HierarchyConfig, Mesh};
use crate::nn::{
    affine_backward, affine_forward, batch_norm, batch_norm_backward, relu, relu_backward, BatchNormCache,
    BatchNormState, Grads, Mode, ParamStore, Tensor2D,
};
use crate::splineconv::{
    init_spline_weights, spline_conv_backward, spline_conv_forward, BasisEvaluation, SplineConfig, SplineConvShape,
};

/// Field channel names in output order.
pub const CHANNELS: [&str; 3] = ["p", "vx", "vy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub domain: Domain,
    /// `1 + number of physical parameters`.
    pub input_dim: usize,
    pub embed_hidden: usize,
    pub f0_dim: usize,
    /// Output width of each spline convolution; the last one is the field count.
    pub channel_widths: Vec<usize>,
    pub spline: SplineConfig,
    pub hierarchy: HierarchyConfig,
    #[serde(default)]
    pub inference_norm: InferenceNorm,
}

/// Statistics batch norm uses outside training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceNorm {
    /// Mean and variance over the nodes of the snapshot being predicted,
    /// exactly as in training. Still a pure function of `(t, lambda)`.
    #[default]
    Graph,
    /// Running averages accumulated during training.
    Running,
}

impl ModelConfig {
    /// Scaled-down defaults: halving pyramid with one mesh per convolution.
    pub fn desk(domain: Domain, channel_widths: Vec<usize>) -> Result<Self> {
        let dim = domain.dim();
        let hierarchy = HierarchyConfig::halving(&domain, channel_widths.len() + 1)?;
        Ok(Self {
            input_dim: 2,
            embed_hidden: 128,
            f0_dim: 64,
            channel_widths,
            spline: SplineConfig {
                dim,
                ..SplineConfig::default()
            },
            hierarchy,
            domain,
            inference_norm: InferenceNorm::default(),
        })
    }

    /// Six convolutions of widths 512..3 over seven meshes.
    pub fn full_scale(domain: Domain) -> Result<Self> {
        Ok(Self {
            f0_dim: 512,
            ..Self::desk(domain, vec![512, 256, 128, 64, 32, 3])?
        })
    }

    pub fn output_channels(&self) -> usize {
        self.domain.dim() + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.spline.validate()?;
        self.hierarchy.validate()?;
        if self.spline.dim != self.domain.dim() {
            return Err(invalid("spline dimension differs from domain dimension"));
        }
        if self.input_dim < 1 || self.embed_hidden < 1 || self.f0_dim < 1 {
            return Err(invalid("embedding widths must be positive"));
        }
        if self.channel_widths.len() != self.hierarchy.num_levels - 1 {
            return Err(invalid(format!(
                "{} convolutions need {} meshes, hierarchy has {}",
                self.channel_widths.len(),
                self.channel_widths.len() + 1,
                self.hierarchy.num_levels
            )));
        }
        if self.channel_widths.contains(&0) {
            return Err(invalid("channel widths must be positive"));
        }
        if self.channel_widths.last() != Some(&self.output_channels()) {
            return Err(invalid(format!(
                "last channel width must be {} (pressure + velocity)",
                self.output_channels()
            )));
        }
        Ok(())
    }

    /// Input/output widths of every convolution.
    pub fn conv_shapes(&self) -> Vec<SplineConvShape> {
        let mut f_in = self.f0_dim;
        self.channel_widths
            .iter()
            .map(|&f_out| {
                let s = SplineConvShape {
                    config: self.spline,
                    in_channels: f_in,
                    out_channels: f_out,
                };
                f_in = f_out;
                s
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Closed-form number of trainable scalars implied by `config`.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let h = config.embed_hidden;
    let f0 = config.f0_dim;
    let embed = if h == 0 {
        0
    } else {
        config.input_dim * h + h + h * f0 + f0
    };
    conv_parameter_count(config.spline.kernel_size(), f0, &config.channel_widths) + embed
}

/// Spline convolution weights plus batch-norm affine terms after every
/// convolution but the last.
pub fn conv_parameter_count(kernel_size: usize, f0: usize, widths: &[usize]) -> usize {
    let mut f_in = f0;
    let mut total = 0;
    for (k, &f_out) in widths.iter().enumerate() {
        total += kernel_size * f_in * f_out;
        if k + 1 < widths.len() {
            total += 2 * f_out;
        }
        f_in = f_out;
    }
    total
}

/// Min-max scaling of the raw inputs to `[0, 1]` from training ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub t_min: f64,
    pub t_max: f64,
    pub lambda_min: Vec<f64>,
    pub lambda_max: Vec<f64>,
}

impl InputScaling {
    pub fn identity(lambda_dim: usize) -> Self {
        Self {
            t_min: 0.0,
            t_max: 1.0,
            lambda_min: vec![0.0; lambda_dim],
            lambda_max: vec![1.0; lambda_dim],
        }
    }

    pub fn fit<'a>(t_range: (f64, f64), lambdas: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for l in lambdas {
            if lo.is_empty() {
                lo = l.to_vec();
                hi = l.to_vec();
            }
            for ((a, b), v) in lo.iter_mut().zip(hi.iter_mut()).zip(l) {
                *a = a.min(*v);
                *b = b.max(*v);
            }
        }
        Self {
            t_min: t_range.0,
            t_max: t_range.1,
            lambda_min: lo,
            lambda_max: hi,
        }
    }

    fn scale(v: f64, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn apply(&self, input: &ModelInput) -> Result<Vec<f64>> {
        if input.lambda.len() != self.lambda_min.len() {
            return Err(invalid(format!(
                "expected {} physical parameters, got {}",
                self.lambda_min.len(),
                input.lambda.len()
            )));
        }
        if !input.t.is_finite() || input.lambda.iter().any(|v| !v.is_finite()) {
            return Err(invalid("model input must be finite"));
        }
        let mut x = Vec::with_capacity(1 + input.lambda.len());
        x.push(Self::scale(input.t, self.t_min, self.t_max));
        for ((v, lo), hi) in input.lambda.iter().zip(&self.lambda_min).zip(&self.lambda_max) {
            x.push(Self::scale(*v, *lo, *hi));
        }
        Ok(x)
    }
}

/// Raw time step and physical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub t: f64,
    pub lambda: Vec<f64>,
}

impl ModelInput {
    pub fn new(t: f64, lambda: Vec<f64>) -> Self {
        Self { t, lambda }
    }
}

/// Output-mesh fields in normalized units, channels `(p, vx, vy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fields: Tensor2D,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    embed_input: Tensor2D,
    hidden_pre: Tensor2D,
    hidden: Tensor2D,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Tensor2D,
    bn: Option<(BatchNormCache, Tensor2D)>,
}

impl ForwardCache {
    /// Batch statistics of each batch-norm layer (train mode only).
    pub fn batch_stats(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .filter(|(c, _)| c.mode == Mode::Train)
            .map(|(c, _)| (c.batch_mean.as_slice(), c.batch_var.as_slice()))
    }
}

pub fn conv_path(k: usize) -> String {
    format!("conv{k}.weights")
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub scaling: InputScaling,
    pub hierarchy: Hierarchy,
    bases: Vec<BasisEvaluation>,
    shapes: Vec<SplineConvShape>,
    pub params: ParamStore,
    /// Running statistics, one per convolution except the last.
    pub bn: Vec<BatchNormState>,
}

impl Model {
    /// Builds the hierarchy over `output_mesh` and draws seeded initial weights.
    pub fn init(config: ModelConfig, output_mesh: &Mesh, scaling: InputScaling, seed: u64) -> Result<Self> {
        config.validate()?;
        if scaling.lambda_min.len() + 1 != config.input_dim {
            return Err(invalid(format!(
                "input scaling covers {} inputs, config expects {}",
                scaling.lambda_min.len() + 1,
                config.input_dim
            )));
        }
        let hierarchy = build_hierarchy(&config.domain, output_mesh, &config.hierarchy)?;
        let bases = hierarchy
            .graphs
            .iter()
            .map(|g| BasisEvaluation::for_graph(g, &config.spline))
            .collect::<Result<Vec<_>>>()?;
        let shapes = config.conv_shapes();

        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d, h, f0) = (config.input_dim, config.embed_hidden, config.f0_dim);
        params.insert("embed1.weight", vec![d, h], init_affine(d, h, seeds.next_u64()))?;
        params.insert("embed1.bias", vec![h], vec![0.0; h])?;
        params.insert("embed2.weight", vec![h, f0], init_affine(h, f0, seeds.next_u64()))?;
        params.insert("embed2.bias", vec![f0], vec![0.0; f0])?;
        let mut bn = Vec::new();
        for (k, shape) in shapes.iter().enumerate() {
            let layer = k + 1;
            params.insert(
                conv_path(layer),
                vec![shape.config.kernel_size(), shape.in_channels, shape.out_channels],
                init_spline_weights(shape, seeds.next_u64()),
            )?;
            if layer < shapes.len() {
                let f = shape.out_channels;
                params.insert(format!("bn{layer}.gamma"), vec![f], vec![1.0; f])?;
                params.insert(format!("bn{layer}.beta"), vec![f], vec![0.0; f])?;
                bn.push(BatchNormState::new(f));
            }
        }
        let expected = count_parameters(&config);
        assert_eq!(params.len(), expected, "parameter count disagrees with closed form");

        Ok(Self {
            config,
            scaling,
            hierarchy,
            bases,
            shapes,
            params,
            bn,
        })
    }

    pub fn output_nodes(&self) -> usize {
        self.hierarchy.output_mesh().node_count()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// `f0 = affine2(relu(affine1(x)))` for the scaled input.
    pub fn embed_inputs(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let x = Tensor2D::new(1, self.config.input_dim, self.scaling.apply(input)?)?;
        let (_, _, f0) = self.embed(&x)?;
        Ok(f0.into_vec())
    }

    fn embed(&self, x: &Tensor2D) -> Result<(Tensor2D, Tensor2D, Tensor2D)> {
        let p = &self.params;
        let pre = affine_forward(x, p.get("embed1.weight"), p.get("embed1.bias"))?;
        let hidden = relu(&pre);
        let f0 = affine_forward(&hidden, p.get("embed2.weight"), p.get("embed2.bias"))?;
        Ok((pre, hidden, f0))
    }

    /// Pure forward pass; batch-norm running statistics are not touched.
    pub fn forward_cached(&self, input: &ModelInput, mode: Mode) -> Result<(Prediction, ForwardCache)> {
        let x = Tensor2D::new(1, self.config.input_dim, self.scaling.apply(input)?)?;
        let (hidden_pre, hidden, mut features) = self.embed(&x)?;
        let last = self.shapes.len() - 1;
        let bn_mode = match (mode, self.config.inference_norm) {
            (Mode::Eval, InferenceNorm::Graph) => Mode::Train,
            _ => mode,
        };
        let mut layers = Vec::with_capacity(self.shapes.len());
        for (k, shape) in self.shapes.iter().enumerate() {
            let conv = spline_conv_forward(
                shape,
                self.params.get(&conv_path(k + 1)),
                &self.hierarchy.graphs[k],
                &self.bases[k],
                &features,
            )?;
            let input = std::mem::replace(&mut features, conv);
            let bn = if k < last {
                let (normed, cache) = batch_norm(
                    &features,
                    self.params.get(&format!("bn{}.gamma", k + 1)),
                    self.params.get(&format!("bn{}.beta", k + 1)),
                    &self.bn[k],
                    bn_mode,
                )?;
                features = relu(&normed);
                Some((cache, normed))
            } else {
                None
            };
            layers.push(LayerCache { input, bn });
        }
        Ok((
            Prediction { fields: features },
            ForwardCache {
                embed_input: x,
                hidden_pre,
                hidden,
                layers,
            },
        ))
    }

    /// Forward pass; in train mode the running statistics absorb this sample.
    pub fn forward(&mut self, input: &ModelInput, mode: Mode) -> Result<Prediction> {
        let (pred, cache) = self.forward_cached(input, mode)?;
        if mode == Mode::Train {
            self.absorb_batch_stats(&cache);
        }
        Ok(pred)
    }

    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) {
        for (state, (mean, var)) in self.bn.iter_mut().zip(cache.batch_stats()) {
            state.update(mean, var);
        }
    }

    /// Parameter gradients of a scalar loss given `dL/d(prediction)`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor2D) -> Result<Grads> {
        let mut grads = Grads::new();
        let mut upstream = grad_out.clone();
        for (k, layer) in cache.layers.iter().enumerate().rev() {
            if let Some((bn_cache, normed)) = &layer.bn {
                let d_normed = relu_backward(normed, &upstream)?;
                let gamma = self.params.get(&format!("bn{}.gamma", k + 1));
                let g = batch_norm_backward(bn_cache, gamma, &d_normed)?;
                grads.insert(format!("bn{}.gamma", k + 1), g.gamma);
                grads.insert(format!("bn{}.beta", k + 1), g.beta);
                upstream = g.input;
            }
            let path = conv_path(k + 1);
            let g = spline_conv_backward(
                &self.shapes[k],
                self.params.get(&path),
                &self.hierarchy.graphs[k],
                &self.bases[k],
                &layer.input,
                &upstream,
            )?;
            grads.insert(path, g.weights);
            upstream = g.source;
        }
        let p = &self.params;
        let g2 = affine_backward(&cache.hidden, p.get("embed2.weight"), &upstream)?;
        let d_pre = relu_backward(&cache.hidden_pre, &g2.input)?;
        let g1 = affine_backward(&cache.embed_input, p.get("embed1.weight"), &d_pre)?;
        grads.insert("embed2.weight".into(), g2.weight);
        grads.insert("embed2.bias".into(), g2.bias);
        grads.insert("embed1.weight".into(), g1.weight);
        grads.insert("embed1.bias".into(), g1.bias);
        Ok(grads)
    }
}

/// Uniform on `[-b, b]`, `b = sqrt(6 / (F_in + F_out))`.
fn init_affine(f_in: usize, f_out: usize, seed: u64) -> Vec<f64> {
    let bound = (6.0 / (f_in + f_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..f_in * f_out).map(|_| rng.gen_range(-bound..=bound)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Level, Mesh};
    use crate::nn::{finite_diff_check, mse_loss, GradCheckOptions};

    fn jittered_mesh(domain: &Domain, n: usize, seed: u64) -> Mesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n)
            .flat_map(|_| {
                let x = rng.gen_range(domain.min[0]..domain.max[0]);
                let y = rng.gen_range(domain.min[1]..domain.max[1]);
                [x, y]
            })
            .collect();
        Mesh::new(2, coords, Level::Output).unwrap()
    }

    fn small_model(seed: u64) -> Model {
        let domain = Domain::unit(2).unwrap();
        let mut config = ModelConfig::desk(domain.clone(), vec![6, 4, 3]).unwrap();
        config.embed_hidden = 5;
        config.f0_dim = 4;
        let mesh = jittered_mesh(&domain, 30, 9);
        Model::init(
            config,
            &mesh,
            InputScaling::fit((0.0, 10.0), [&[2.0][..], &[2.2][..]]),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(conv_parameter_count(9, 1, &[1]), 9);
        assert_eq!(conv_parameter_count(9, 4, &[2, 3]), 130);
        let config = ModelConfig::full_scale(Domain::unit(2).unwrap()).unwrap();
        assert_eq!(config.hierarchy.num_levels, 7);
        assert_eq!(config.channel_widths.len(), 6);
        assert_eq!(count_parameters(&config), 3_995_296);
    }

    #[test]
    fn init_is_deterministic() {
        let a = small_model(3);
        let b = small_model(3);
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, small_model(4).params);
        assert_eq!(a.parameter_count(), count_parameters(&a.config));
    }

    #[test]
    fn config_checks() {
        let domain = Domain::unit(2).unwrap();
        let mut c = ModelConfig::desk(domain.clone(), vec![8, 3]).unwrap();
        c.channel_widths = vec![8, 4];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(domain, vec![8, 3]).unwrap();
        c.channel_widths = vec![8, 8, 3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_embed_to_bias() {
        let mut m = small_model(0);
        for path in ["embed1.weight", "embed2.weight"] {
            m.params.param_mut(path).value.iter_mut().for_each(|w| *w = 0.0);
        }
        let bias: Vec<f64> = (0..4).map(|i| i as f64 * 0.5 - 1.0).collect();
        m.params.param_mut("embed2.bias").value.copy_from_slice(&bias);
        let input = ModelInput::new(3.0, vec![2.1]);
        assert_eq!(m.embed_inputs(&input).unwrap(), bias);
        assert_eq!(m.embed_inputs(&input).unwrap(), m.embed_inputs(&input).unwrap());
    }

    #[test]
    fn output_shape_and_eval_purity() {
        let mut m = small_model(1);
        for t in [0.0, 5.0, 10.0] {
            let p = m.forward(&ModelInput::new(t, vec![2.05]), Mode::Train).unwrap();
            assert_eq!(p.fields.shape(), (30, 3));
        }
        let probe = ModelInput::new(7.0, vec![2.1]);
        let first = m.forward(&probe, Mode::Eval).unwrap();
        m.forward(&ModelInput::new(1.0, vec![2.0]), Mode::Eval).unwrap();
        let second = m.forward(&probe, Mode::Eval).unwrap();
        assert_eq!(first, second);
    }

    fn loss_at(model: &Model, input: &ModelInput, target: &Tensor2D, mode: Mode) -> f64 {
        let (pred, _) = model.forward_cached(input, mode).unwrap();
        mse_loss(&pred.fields, target).unwrap().0
    }

    fn fixture() -> (ModelInput, Tensor2D) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let target = Tensor2D::new(30, 3, (0..90).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (ModelInput::new(4.0, vec![2.13]), target)
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let (input, target) = fixture();
        for mode in [Mode::Train, Mode::Eval] {
            let model = small_model(5);
            let (pred, cache) = model.forward_cached(&input, mode).unwrap();
            let (_, grad) = mse_loss(&pred.fields, &target).unwrap();
            let grads = model.backward(&cache, &grad).unwrap();
            let mut probe = model.clone();
            let mut params = model.params.clone();
            let report = finite_diff_check(
                &mut params,
                &grads,
                |p| {
                    probe.params.copy_values_from(p).unwrap();
                    loss_at(&probe, &input, &target, mode)
                },
                &GradCheckOptions::default(),
            );
            assert!(report.max_rel_error <= 1e-4, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn running_statistics_gradient() {
        let mut model = small_model(5);
        model.config.inference_norm = InferenceNorm::Running;
        for t in [1.0, 7.0, 9.0] {
            model.forward(&ModelInput::new(t, vec![2.0]), Mode::Train).unwrap();
        }
        let (input, target) = fixture();
        let (pred, cache) = model.forward_cached(&input, Mode::Eval).unwrap();
        let grads = model
            .backward(&cache, &mse_loss(&pred.fields, &target).unwrap().1)
            .unwrap();
        let mut probe = model.clone();
        let h = 1e-6;
        for (path, p) in model.params.iter() {
            for (i, &value) in p.value.iter().enumerate() {
                let mut at = |v: f64| {
                    probe.params.param_mut(path).value[i] = v;
                    loss_at(&probe, &input, &target, Mode::Eval)
                };
                let numeric = (at(value + h) - at(value - h)) / (2.0 * h);
                at(value);
                let analytic = grads[path][i];
                // some weights get gradients near 1e-8, below what the step resolves
                let ok = crate::nn::gradcheck::relative_error(analytic, numeric) <= 1e-4
                    || (analytic - numeric).abs() <= 1e-9;
                assert!(ok, "{path}[{i}]: {analytic:e} vs {numeric:e}");
            }
        }
    }
}
