//! Continuous B-spline convolution over level-graph edges.
//!
//! For a target node `j` with incoming edges from sources `i`,
//!
//! ```text
//! f_j = 1/|N(j)| * sum_i H(u_ij)^T f_i,    H(u) = sum_p B_p(u) W_p
//! ```
//!
//! where `u_ij` is the edge pseudo-coordinate and `B_p` the tensor-product
//! open-uniform B-spline basis over `m` control points per dimension. The
//! flat control index is `p = sum_d idx_d * m^d` (dimension 0 fastest) and the
//! weight tensor is laid out `K x F_in x F_out` with `K = m^dim`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::LevelGraph;
use crate::nn::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::nn::Tensor2D;

const U_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub degree: usize,
    pub control_points: usize,
    pub dim: usize,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            degree: 1,
            control_points: 3,
            dim: 2,
        }
    }
}

impl SplineConfig {
    pub fn new(degree: usize, control_points: usize, dim: usize) -> Result<Self> {
        let config = Self {
            degree,
            control_points,
            dim,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(invalid("spline degree must be at least 1"));
        }
        if self.control_points < self.degree + 1 {
            return Err(invalid(format!(
                "{} control points cannot carry a degree-{} spline",
                self.control_points, self.degree
            )));
        }
        if !(1..=3).contains(&self.dim) {
            return Err(invalid(format!("spline dimension {} not in 1..=3", self.dim)));
        }
        Ok(())
    }

    /// Number of weight matrices, `m^dim`.
    pub fn kernel_size(&self) -> usize {
        self.control_points.pow(self.dim as u32)
    }

    /// Nonzero basis entries per evaluation, `(degree + 1)^dim`.
    pub fn support(&self) -> usize {
        (self.degree + 1).pow(self.dim as u32)
    }
}

/// One-dimensional basis: index of the first active control point and the
/// `degree + 1` active values.
pub fn basis_1d(u: f64, degree: usize, control_points: usize) -> (usize, Vec<f64>) {
    if degree == 1 {
        let (i, f) = degree_one_cell(u, control_points);
        return (i, vec![1.0 - f, f]);
    }
    cox_de_boor(u, degree, control_points)
}

fn degree_one_cell(u: f64, m: usize) -> (usize, f64) {
    let s = u * (m - 1) as f64;
    let i = (s.floor() as usize).min(m - 2);
    (i, s - i as f64)
}

/// Clamped uniform knot vector: `degree + 1` zeros, uniform interior knots,
/// `degree + 1` ones.
fn clamped_knot(k: usize, degree: usize, m: usize) -> f64 {
    let cells = m - degree;
    if k <= degree {
        0.0
    } else if k >= m {
        1.0
    } else {
        (k - degree) as f64 / cells as f64
    }
}

/// Triangular evaluation of the nonzero basis functions on the knot span of `u`.
fn cox_de_boor(u: f64, degree: usize, m: usize) -> (usize, Vec<f64>) {
    let cells = m - degree;
    let span = degree + ((u * cells as f64).floor() as usize).min(cells - 1);
    let knot = |k: usize| clamped_knot(k, degree, m);
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = u - knot(span + 1 - j);
        right[j] = knot(span + j) - u;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (span - degree, n)
}

/// Tensor-product basis at `u`, as `(control_index, value)` pairs.
///
/// Always returns exactly `(degree + 1)^dim` entries; some may be zero at knots.
pub fn bspline_basis(u: &[f64], config: &SplineConfig) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(config.support());
    basis_into(u, config, &mut out)?;
    Ok(out)
}

fn basis_into(u: &[f64], config: &SplineConfig, out: &mut Vec<(usize, f64)>) -> Result<()> {
    if u.len() != config.dim {
        return Err(invalid(format!(
            "pseudo-coordinate of length {} for dim {}",
            u.len(),
            config.dim
        )));
    }
    let m = config.control_points;
    let per_dim: Vec<(usize, Vec<f64>)> = u
        .iter()
        .map(|&v| {
            if !(-U_TOLERANCE..=1.0 + U_TOLERANCE).contains(&v) {
                return Err(invalid(format!("pseudo-coordinate {v} outside [0, 1]")));
            }
            Ok(basis_1d(v.clamp(0.0, 1.0), config.degree, m))
        })
        .collect::<Result<_>>()?;
    let width = config.degree + 1;
    for flat in 0..config.support() {
        let mut rem = flat;
        let mut index = 0;
        let mut stride = 1;
        let mut value = 1.0;
        for (first, vals) in &per_dim {
            let s = rem % width;
            rem /= width;
            index += (first + s) * stride;
            value *= vals[s];
            stride *= m;
        }
        out.push((index, value));
    }
    Ok(())
}

/// Basis entries of every edge of a graph, `support` entries per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEvaluation {
    pub support: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl BasisEvaluation {
    pub fn for_graph(graph: &LevelGraph, config: &SplineConfig) -> Result<Self> {
        if graph.dim != config.dim {
            return Err(invalid(format!(
                "graph dimension {} differs from spline dimension {}",
                graph.dim, config.dim
            )));
        }
        let mut entries = Vec::with_capacity(graph.edge_count() * config.support());
        for e in 0..graph.edge_count() {
            basis_into(graph.pseudo_coord(e), config, &mut entries)?;
        }
        let (indices, values) = entries.into_iter().unzip();
        Ok(Self {
            support: config.support(),
            indices,
            values,
        })
    }

    pub fn edge(&self, e: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = e * self.support..(e + 1) * self.support;
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    fn used_controls(&self, kernel_size: usize) -> Vec<bool> {
        let mut used = vec![false; kernel_size];
        for &p in &self.indices {
            used[p] = true;
        }
        used
    }
}

/// Shape of one spline convolution; weights are held by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineConvShape {
    pub config: SplineConfig,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl SplineConvShape {
    pub fn weight_len(&self) -> usize {
        self.config.kernel_size() * self.in_channels * self.out_channels
    }

    fn block(&self) -> usize {
        self.in_channels * self.out_channels
    }

    fn check(&self, weights: &[f64], graph: &LevelGraph, basis: &BasisEvaluation, source: &Tensor2D) -> Result<()> {
        if weights.len() != self.weight_len() {
            return Err(invalid(format!(
                "spline weights have {} entries, expected {}",
                weights.len(),
                self.weight_len()
            )));
        }
        source.ensure_shape(graph.source_count, self.in_channels, "spline conv source features")?;
        if basis.indices.len() != graph.edge_count() * basis.support {
            return Err(invalid("basis evaluation does not match graph edges"));
        }
        if let Some(j) = (0..graph.target_count).find(|&j| graph.in_degree(j) == 0) {
            return Err(Error::EmptyNeighborhood {
                level: graph.source_level,
                target: j,
                radius: match graph.radius {
                    crate::geometry::Radius::Finite(r) => r,
                    crate::geometry::Radius::Infinite => f64::INFINITY,
                },
            });
        }
        Ok(())
    }

    /// Per-control-point transformed sources, `K x N_src x F_out`.
    fn transformed_sources(&self, weights: &[f64], source: &Tensor2D, used: &[bool]) -> Vec<f64> {
        let n = source.rows();
        let f_out = self.out_channels;
        let mut y = vec![0.0; self.config.kernel_size() * n * f_out];
        for (p, yp) in y.chunks_exact_mut(n * f_out).enumerate() {
            if used[p] {
                let w = &weights[p * self.block()..(p + 1) * self.block()];
                matmul_acc(source.as_slice(), w, yp, n, self.in_channels, f_out);
            }
        }
        y
    }
}

/// Mean-aggregated spline convolution, no bias.
pub fn spline_conv_forward(
    shape: &SplineConvShape,
    weights: &[f64],
    graph: &LevelGraph,
    basis: &BasisEvaluation,
    source: &Tensor2D,
) -> Result<Tensor2D> {
    shape.check(weights, graph, basis, source)?;
    let n_src = graph.source_count;
    let f_out = shape.out_channels;
    let used = basis.used_controls(shape.config.kernel_size());
    let y = shape.transformed_sources(weights, source, &used);
    let mut out = Tensor2D::zeros(graph.target_count, f_out);
    for j in 0..graph.target_count {
        let row = out.row_mut(j);
        let edges = graph.incoming(j);
        let scale = 1.0 / edges.len() as f64;
        for e in edges {
            let i = graph.edges[e].0;
            for (p, b) in basis.edge(e) {
                let yp = &y[(p * n_src + i) * f_out..(p * n_src + i + 1) * f_out];
                for (o, v) in row.iter_mut().zip(yp) {
                    *o += b * v;
                }
            }
        }
        row.iter_mut().for_each(|o| *o *= scale);
    }
    Ok(out)
}

pub struct SplineConvGrads {
    pub weights: Vec<f64>,
    pub source: Tensor2D,
}

/// Exact reverse pass of [`spline_conv_forward`].
pub fn spline_conv_backward(
    shape: &SplineConvShape,
    weights: &[f64],
    graph: &LevelGraph,
    basis: &BasisEvaluation,
    source: &Tensor2D,
    grad_out: &Tensor2D,
) -> Result<SplineConvGrads> {
    shape.check(weights, graph, basis, source)?;
    grad_out.ensure_shape(graph.target_count, shape.out_channels, "spline conv upstream gradient")?;
    let n_src = graph.source_count;
    let (f_in, f_out) = (shape.in_channels, shape.out_channels);
    let k = shape.config.kernel_size();

    // dY[p][i] = sum over edges (i -> j) of B_p(u_ij) g_j / |N(j)|
    let mut dy = vec![0.0; k * n_src * f_out];
    let mut used = vec![false; k];
    for j in 0..graph.target_count {
        let edges = graph.incoming(j);
        let scale = 1.0 / edges.len() as f64;
        let g = grad_out.row(j);
        for e in edges {
            let i = graph.edges[e].0;
            for (p, b) in basis.edge(e) {
                used[p] = true;
                let c = b * scale;
                let slot = &mut dy[(p * n_src + i) * f_out..(p * n_src + i + 1) * f_out];
                for (d, gv) in slot.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }
        }
    }

    let block = f_in * f_out;
    let mut d_weights = vec![0.0; weights.len()];
    let mut d_source = Tensor2D::zeros(n_src, f_in);
    for p in (0..k).filter(|&p| used[p]) {
        let dyp = &dy[p * n_src * f_out..(p + 1) * n_src * f_out];
        matmul_at_b_acc(
            source.as_slice(),
            dyp,
            &mut d_weights[p * block..(p + 1) * block],
            n_src,
            f_in,
            f_out,
        );
        matmul_a_bt_acc(
            dyp,
            &weights[p * block..(p + 1) * block],
            d_source.as_mut_slice(),
            n_src,
            f_out,
            f_in,
        );
    }
    Ok(SplineConvGrads {
        weights: d_weights,
        source: d_source,
    })
}

/// Half-width of the uniform initializer, `sqrt(6 / (F_in * (degree+1)^d + F_out))`.
pub fn init_bound(config: &SplineConfig, in_channels: usize, out_channels: usize) -> f64 {
    (6.0 / (in_channels * config.support() + out_channels) as f64).sqrt()
}

/// Seeded uniform initialization on `[-b, b]`, see [`init_bound`].
pub fn init_spline_weights(shape: &SplineConvShape, seed: u64) -> Vec<f64> {
    let bound = init_bound(&shape.config, shape.in_channels, shape.out_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shape.weight_len()).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// A spline convolution owning its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineConvLayer {
    pub shape: SplineConvShape,
    pub weights: Vec<f64>,
}

impl SplineConvLayer {
    pub fn new(config: SplineConfig, in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let shape = SplineConvShape {
            config,
            in_channels,
            out_channels,
        };
        Ok(Self {
            weights: init_spline_weights(&shape, seed),
            shape,
        })
    }

    pub fn forward(&self, graph: &LevelGraph, basis: &BasisEvaluation, source: &Tensor2D) -> Result<Tensor2D> {
        spline_conv_forward(&self.shape, &self.weights, graph, basis, source)
    }

    pub fn backward(
        &self,
        graph: &LevelGraph,
        basis: &BasisEvaluation,
        source: &Tensor2D,
        grad_out: &Tensor2D,
    ) -> Result<SplineConvGrads> {
        spline_conv_backward(&self.shape, &self.weights, graph, basis, source, grad_out)
    }
}
