//! Domain, mesh pyramid and inter-level radius neighborhoods.
//!
//! The hierarchy is a list of meshes `M_0 .. M_n`: a singleton at the domain
//! centroid, regular lattices of decreasing pitch, and finally the output
//! (simulation) mesh. Consecutive meshes are joined by a [`LevelGraph`] whose
//! edges connect every target node to all source nodes within the level
//! radius.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance for "inside the bounding box" checks.
pub const BOX_TOLERANCE: f64 = 1e-9;

/// Axis-aligned bounding box of the simulation domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Domain {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        let domain = Self { min, max };
        domain.validate()?;
        Ok(domain)
    }

    /// Unit square/cube of dimension `dim`.
    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(invalid(format!(
                "domain corners have different lengths ({} vs {})",
                self.min.len(),
                self.max.len()
            )));
        }
        if !(1..=3).contains(&self.min.len()) {
            return Err(invalid(format!("domain dimension {} not in 1..=3", self.min.len())));
        }
        for (axis, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                return Err(invalid(format!("degenerate domain along axis {axis}: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn side(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn shortest_side(&self) -> f64 {
        (0..self.dim()).map(|a| self.side(a)).fold(f64::INFINITY, f64::min)
    }

    /// Length of the domain, taken as its longest side.
    pub fn length(&self) -> f64 {
        (0..self.dim()).map(|a| self.side(a)).fold(0.0, f64::max)
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }
}

/// Position of a mesh inside the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Index(usize),
    Output,
}

/// Point cloud of one hierarchy level, node-major coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    coords: Vec<f64>,
    pub level: Level,
}

impl Mesh {
    /// Builds a mesh, rejecting empty, non-finite or duplicated nodes.
    pub fn new(dim: usize, coords: Vec<f64>, level: Level) -> Result<Self> {
        if dim == 0 || coords.is_empty() || !coords.len().is_multiple_of(dim) {
            return Err(invalid(format!(
                "mesh coordinate array of length {} does not hold dim-{dim} nodes",
                coords.len()
            )));
        }
        if let Some(bad) = coords.iter().position(|c| !c.is_finite()) {
            return Err(invalid(format!("non-finite coordinate in node {}", bad / dim)));
        }
        let mesh = Self { dim, coords, level };
        if let Some((a, b)) = mesh.find_duplicate() {
            return Err(invalid(format!("nodes {a} and {b} coincide exactly")));
        }
        Ok(mesh)
    }

    fn find_duplicate(&self) -> Option<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.node_count()).collect();
        let cmp = |a: &usize, b: &usize| {
            self.node(*a)
                .iter()
                .zip(self.node(*b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        };
        order.sort_by(cmp);
        order
            .windows(2)
            .find(|w| self.node(w[0]) == self.node(w[1]))
            .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn with_level(mut self, level: Level) -> Self {
        self.level = level;
        self
    }

    /// Fails if any node lies outside `domain` beyond [`BOX_TOLERANCE`].
    pub fn check_inside(&self, domain: &Domain) -> Result<()> {
        if domain.dim() != self.dim {
            return Err(invalid(format!(
                "mesh dimension {} differs from domain dimension {}",
                self.dim,
                domain.dim()
            )));
        }
        match self.nodes().position(|x| !domain.contains(x, BOX_TOLERANCE)) {
            Some(i) => Err(invalid(format!(
                "node {i} at {:?} lies outside the domain",
                self.node(i)
            ))),
            None => Ok(()),
        }
    }

    /// Smallest pairwise distance between distinct nodes (infinite for a singleton).
    pub fn min_spacing(&self) -> f64 {
        let n = self.node_count();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                best = best.min(euclidean(self.node(i), self.node(j)));
            }
        }
        best
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Neighborhood radius of a level graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Radius {
    Finite(f64),
    Infinite,
}

impl Radius {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Radius::Infinite)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Radius::Finite(r) if !(r.is_finite() && r > 0.0) => {
                Err(invalid(format!("radius must be positive and finite, got {r}")))
            }
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Radius {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Radius::Finite(r) => write!(f, "{r}"),
            Radius::Infinite => write!(f, "inf"),
        }
    }
}

/// Bipartite edges from level `source_level` to level `source_level + 1`.
///
/// Edges are sorted by `(target, source)`; `target_offsets` is the CSR index
/// of the incoming edges of each target node.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGraph {
    pub source_level: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub radius: Radius,
    pub dim: usize,
    /// `(source, target)` pairs.
    pub edges: Vec<(usize, usize)>,
    /// Edge-major pseudo-coordinates in `[0, 1]^dim`.
    pub pseudo_coords: Vec<f64>,
    pub target_offsets: Vec<usize>,
}

impl LevelGraph {
    pub fn target_level(&self) -> usize {
        self.source_level + 1
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn pseudo_coord(&self, e: usize) -> &[f64] {
        &self.pseudo_coords[e * self.dim..(e + 1) * self.dim]
    }

    /// Edge indices pointing into target `j`.
    pub fn incoming(&self, j: usize) -> std::ops::Range<usize> {
        self.target_offsets[j]..self.target_offsets[j + 1]
    }

    pub fn in_degree(&self, j: usize) -> usize {
        self.target_offsets[j + 1] - self.target_offsets[j]
    }
}

/// Maps an edge shift onto the spline domain `[0, 1]^d`.
///
/// For a finite radius, `shift = x_target - x_source` and each component maps
/// as `(shift + r) / (2r)`. For an infinite radius, `shift` is the absolute
/// target position, normalized over the domain box.
pub fn normalize_pseudo_coords(shift: &[f64], radius: Radius, domain: &Domain) -> Result<Vec<f64>> {
    let mut out = vec![0.0; shift.len()];
    normalize_into(shift, radius, domain, &mut out)?;
    Ok(out)
}

fn normalize_into(shift: &[f64], radius: Radius, domain: &Domain, out: &mut [f64]) -> Result<()> {
    if shift.len() != domain.dim() {
        return Err(invalid(format!(
            "shift of length {} for a dim-{} domain",
            shift.len(),
            domain.dim()
        )));
    }
    match radius {
        Radius::Finite(r) => {
            for (axis, (s, u)) in shift.iter().zip(out.iter_mut()).enumerate() {
                if s.abs() > r + BOX_TOLERANCE {
                    return Err(invalid(format!(
                        "shift component {s} on axis {axis} exceeds radius {r}"
                    )));
                }
                *u = ((s + r) / (2.0 * r)).clamp(0.0, 1.0);
            }
        }
        Radius::Infinite => {
            for (axis, (x, u)) in shift.iter().zip(out.iter_mut()).enumerate() {
                *u = ((x - domain.min[axis]) / domain.side(axis)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(())
}

/// Whether targets without any source are an error or left empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    Strict,
    Lenient,
}

/// All `(i, j)` with `||x_i - x_j|| <= radius`, one [`LevelGraph`].
pub fn radius_neighbors(source: &Mesh, target: &Mesh, radius: Radius, domain: &Domain) -> Result<LevelGraph> {
    radius_neighbors_with(source, target, radius, domain, Coverage::Strict)
}

pub fn radius_neighbors_with(
    source: &Mesh,
    target: &Mesh,
    radius: Radius,
    domain: &Domain,
    coverage: Coverage,
) -> Result<LevelGraph> {
    radius.validate()?;
    let dim = domain.dim();
    if source.dim() != dim || target.dim() != dim {
        return Err(invalid(format!(
            "mesh dimensions ({}, {}) differ from domain dimension {dim}",
            source.dim(),
            target.dim()
        )));
    }
    let source_level = match source.level {
        Level::Index(k) => k,
        Level::Output => 0,
    };

    let per_target: Vec<Vec<usize>> = match radius {
        Radius::Infinite => vec![(0..source.node_count()).collect(); target.node_count()],
        Radius::Finite(r) => {
            let grid = CellGrid::new(source, r, &domain.min);
            (0..target.node_count())
                .into_par_iter()
                .map(|j| grid.within(source, target.node(j)))
                .collect()
        }
    };

    let mut edges = Vec::new();
    let mut target_offsets = Vec::with_capacity(target.node_count() + 1);
    target_offsets.push(0);
    for (j, sources) in per_target.iter().enumerate() {
        if sources.is_empty() && coverage == Coverage::Strict {
            return Err(Error::EmptyNeighborhood {
                level: source_level,
                target: j,
                radius: match radius {
                    Radius::Finite(r) => r,
                    Radius::Infinite => f64::INFINITY,
                },
            });
        }
        edges.extend(sources.iter().map(|&i| (i, j)));
        target_offsets.push(edges.len());
    }

    let mut pseudo_coords = vec![0.0; edges.len() * dim];
    let mut shift = vec![0.0; dim];
    for (e, &(i, j)) in edges.iter().enumerate() {
        let xj = target.node(j);
        match radius {
            Radius::Infinite => shift.copy_from_slice(xj),
            Radius::Finite(_) => {
                for ((s, a), b) in shift.iter_mut().zip(xj).zip(source.node(i)) {
                    *s = a - b;
                }
            }
        }
        normalize_into(&shift, radius, domain, &mut pseudo_coords[e * dim..(e + 1) * dim])?;
    }

    Ok(LevelGraph {
        source_level,
        source_count: source.node_count(),
        target_count: target.node_count(),
        radius,
        dim,
        edges,
        pseudo_coords,
        target_offsets,
    })
}

/// Uniform bucket grid with cell size equal to the query radius.
struct CellGrid {
    cell: f64,
    radius: f64,
    origin: Vec<f64>,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl CellGrid {
    fn new(mesh: &Mesh, radius: f64, origin: &[f64]) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut grid = Self {
            cell: radius,
            radius,
            origin: origin.to_vec(),
            buckets: HashMap::new(),
        };
        for (i, x) in mesh.nodes().enumerate() {
            buckets.entry(grid.key(x)).or_default().push(i);
        }
        grid.buckets = buckets;
        grid
    }

    fn key(&self, x: &[f64]) -> [i64; 3] {
        let mut key = [0i64; 3];
        for (axis, v) in x.iter().enumerate() {
            key[axis] = ((v - self.origin[axis]) / self.cell).floor() as i64;
        }
        key
    }

    fn within(&self, mesh: &Mesh, x: &[f64]) -> Vec<usize> {
        let dim = x.len();
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for axis in 0..dim {
            let rel = x[axis] - self.origin[axis];
            // one cell of slack absorbs rounding in the bucket index
            lo[axis] = ((rel - self.radius) / self.cell).floor() as i64 - 1;
            hi[axis] = ((rel + self.radius) / self.cell).floor() as i64 + 1;
        }
        let mut found = Vec::new();
        let mut key = lo;
        loop {
            if let Some(bucket) = self.buckets.get(&key) {
                found.extend(
                    bucket
                        .iter()
                        .copied()
                        .filter(|&i| euclidean(mesh.node(i), x) <= self.radius),
                );
            }
            let mut axis = 0;
            loop {
                if axis == dim {
                    found.sort_unstable();
                    return found;
                }
                if key[axis] < hi[axis] {
                    key[axis] += 1;
                    break;
                }
                key[axis] = lo[axis];
                axis += 1;
            }
        }
    }
}

/// Lattice of pitch `spacing` covering the domain box, boundary faces included.
///
/// Each axis holds `floor(side / spacing) + 1` nodes; the last one is clamped
/// to the max corner. Nodes are ordered with axis 0 fastest.
pub fn build_regular_mesh(domain: &Domain, spacing: f64, level: usize) -> Result<Mesh> {
    domain.validate()?;
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(invalid(format!("spacing must be positive, got {spacing}")));
    }
    if spacing > domain.shortest_side() + BOX_TOLERANCE {
        return Err(invalid(format!(
            "spacing {spacing} exceeds the shortest domain side {}",
            domain.shortest_side()
        )));
    }
    let dim = domain.dim();
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|a| {
            let n = (domain.side(a) / spacing + 1e-9).floor() as usize + 1;
            let mut ticks: Vec<f64> = (0..n).map(|i| domain.min[a] + i as f64 * spacing).collect();
            ticks[n - 1] = domain.max[a];
            ticks
        })
        .collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut coords = Vec::with_capacity(total * dim);
    for flat in 0..total {
        let mut rem = flat;
        for ticks in &axes {
            coords.push(ticks[rem % ticks.len()]);
            rem /= ticks.len();
        }
    }
    Mesh::new(dim, coords, Level::Index(level))
}

/// One node at the domain centroid, level 0.
pub fn build_singleton_mesh(domain: &Domain) -> Mesh {
    Mesh {
        dim: domain.dim(),
        coords: domain.centroid(),
        level: Level::Index(0),
    }
}

/// Layout of the mesh pyramid.
///
/// `num_levels` counts meshes, including the singleton and the output mesh,
/// so there are `num_levels - 1` graphs. `spacings[k - 1]` is the pitch of
/// regular level `k` and `radii[k]` the radius of graph `k -> k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub num_levels: usize,
    pub spacings: Vec<f64>,
    pub radii: Vec<Radius>,
}

impl HierarchyConfig {
    /// Halving pitch `h_k = L / 2^(k+1)` with `r_0 = inf` and `r_k = sqrt(2) h_k`.
    pub fn halving(domain: &Domain, num_levels: usize) -> Result<Self> {
        if num_levels < 2 {
            return Err(invalid(format!("num_levels must be at least 2, got {num_levels}")));
        }
        let length = domain.length();
        let spacings: Vec<f64> = (1..num_levels - 1).map(|k| length / 2f64.powi(k as i32 + 1)).collect();
        Ok(Self::with_default_radii(spacings))
    }

    /// Explicit spacings, radii derived as `r_0 = inf`, `r_k = sqrt(2) h_k`.
    pub fn with_default_radii(spacings: Vec<f64>) -> Self {
        let radii = std::iter::once(Radius::Infinite)
            .chain(spacings.iter().map(|h| Radius::Finite(std::f64::consts::SQRT_2 * h)))
            .collect();
        Self {
            num_levels: spacings.len() + 2,
            spacings,
            radii,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 2 {
            return Err(invalid(format!(
                "num_levels must be at least 2, got {}",
                self.num_levels
            )));
        }
        if self.spacings.len() != self.num_levels - 2 {
            return Err(invalid(format!(
                "{} levels need {} spacings, got {}",
                self.num_levels,
                self.num_levels - 2,
                self.spacings.len()
            )));
        }
        if self.radii.len() != self.num_levels - 1 {
            return Err(invalid(format!(
                "{} levels need {} radii, got {}",
                self.num_levels,
                self.num_levels - 1,
                self.radii.len()
            )));
        }
        if self.spacings.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("spacings must be strictly decreasing"));
        }
        for r in &self.radii {
            r.validate()?;
        }
        Ok(())
    }
}

/// Meshes `M_0 .. M_n` and the graphs between them.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub domain: Domain,
    pub meshes: Vec<Mesh>,
    pub graphs: Vec<LevelGraph>,
}

impl Hierarchy {
    pub fn output_mesh(&self) -> &Mesh {
        self.meshes.last().expect("hierarchy has at least two meshes")
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.meshes.iter().map(Mesh::node_count).collect()
    }
}

pub fn build_hierarchy(domain: &Domain, output_mesh: &Mesh, config: &HierarchyConfig) -> Result<Hierarchy> {
    build_hierarchy_with(domain, output_mesh, config, Coverage::Strict)
}

pub fn build_hierarchy_with(
    domain: &Domain,
    output_mesh: &Mesh,
    config: &HierarchyConfig,
    coverage: Coverage,
) -> Result<Hierarchy> {
    domain.validate()?;
    config.validate()?;
    output_mesh.check_inside(domain)?;

    let mut meshes = Vec::with_capacity(config.num_levels);
    meshes.push(build_singleton_mesh(domain));
    for (k, &h) in config.spacings.iter().enumerate() {
        meshes.push(build_regular_mesh(domain, h, k + 1)?);
    }
    meshes.push(output_mesh.clone().with_level(Level::Output));

    let graphs = meshes
        .windows(2)
        .zip(&config.radii)
        .enumerate()
        .map(|(k, (pair, &radius))| {
            let source = pair[0].clone().with_level(Level::Index(k));
            radius_neighbors_with(&source, &pair[1], radius, domain, coverage)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Hierarchy {
        domain: domain.clone(),
        meshes,
        graphs,
    })
}

/// In-degree summary of one level graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DegreeStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConnectivityReport {
    /// Output-mesh nodes with no path from the singleton.
    pub unreachable: Vec<usize>,
    pub in_degree: Vec<DegreeStats>,
}

impl ConnectivityReport {
    pub fn fully_connected(&self) -> bool {
        self.unreachable.is_empty()
    }
}

/// Forward reachability from `M_0` through every level graph.
pub fn check_connectivity(hierarchy: &Hierarchy) -> ConnectivityReport {
    let mut reached = vec![true; hierarchy.meshes[0].node_count()];
    let mut in_degree = Vec::with_capacity(hierarchy.graphs.len());
    for graph in &hierarchy.graphs {
        let mut next = vec![false; graph.target_count];
        let mut queue: VecDeque<usize> = (0..graph.source_count).filter(|&i| reached[i]).collect();
        let mut outgoing: Vec<Vec<usize>> = vec![Vec::new(); graph.source_count];
        for &(i, j) in &graph.edges {
            outgoing[i].push(j);
        }
        while let Some(i) = queue.pop_front() {
            for &j in &outgoing[i] {
                next[j] = true;
            }
        }
        let degrees: Vec<usize> = (0..graph.target_count).map(|j| graph.in_degree(j)).collect();
        in_degree.push(DegreeStats {
            min: degrees.iter().copied().min().unwrap_or(0),
            mean: degrees.iter().sum::<usize>() as f64 / degrees.len().max(1) as f64,
            max: degrees.iter().copied().max().unwrap_or(0),
        });
        reached = next;
    }
    ConnectivityReport {
        unreachable: reached
            .iter()
            .enumerate()
            .filter(|(_, r)| !**r)
            .map(|(j, _)| j)
            .collect(),
        in_degree,
    }
}
