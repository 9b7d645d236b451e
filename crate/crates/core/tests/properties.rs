//! Randomized invariants across modules.

use mesh_surrogate::dataset::{compute_norm_stats, NormStats, Trajectory};
use mesh_surrogate::geometry::{radius_neighbors, Domain, Level, Mesh, Radius};
use mesh_surrogate::io::{decode_fields, decode_mesh, encode_fields, encode_mesh};
use mesh_surrogate::model::ModelInput;
use mesh_surrogate::nn::{batch_norm, BatchNormState, Mode, PlateauScheduler, Tensor2D};
use mesh_surrogate::splineconv::{bspline_basis, SplineConfig};
use mesh_surrogate::verify::GradCheckCase;
use proptest::prelude::*;
use std::collections::BTreeSet;
use std::path::Path;

fn mesh_from(points: &[(f64, f64)], level: Level) -> Option<Mesh> {
    let coords = points.iter().flat_map(|&(x, y)| [x, y]).collect();
    Mesh::new(2, coords, level).ok()
}

fn brute_force(source: &Mesh, target: &Mesh, r: f64) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for j in 0..target.node_count() {
        for i in 0..source.node_count() {
            let d2: f64 = source
                .node(i)
                .iter()
                .zip(target.node(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2.sqrt() <= r {
                out.insert((i, j));
            }
        }
    }
    out
}

fn points(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighborhoods_match_brute_force(src in points(120), tgt in points(120), r in 0.02..0.6f64) {
        let domain = Domain::unit(2).unwrap();
        let (Some(source), Some(target)) = (mesh_from(&src, Level::Index(0)), mesh_from(&tgt, Level::Index(1))) else {
            return Ok(());
        };
        let expected = brute_force(&source, &target, r);
        let covered = (0..target.node_count()).all(|j| expected.iter().any(|&(_, t)| t == j));
        match radius_neighbors(&source, &target, Radius::Finite(r), &domain) {
            Ok(graph) => {
                prop_assert!(covered);
                let got: BTreeSet<_> = graph.edges.iter().copied().collect();
                prop_assert_eq!(got.len(), graph.edges.len());
                prop_assert_eq!(got, expected);
                prop_assert!(graph.pseudo_coords.iter().all(|u| (0.0..=1.0).contains(u)));
                // sorted by target, CSR offsets consistent
                prop_assert!(graph.edges.windows(2).all(|w| (w[0].1, w[0].0) < (w[1].1, w[1].0)));
                for j in 0..target.node_count() {
                    prop_assert!(graph.incoming(j).all(|e| graph.edges[e].1 == j));
                }
            }
            Err(_) => prop_assert!(!covered),
        }
    }

    #[test]
    fn lattice_boundary_pairs_are_included(n in 2usize..9, k in 1usize..4) {
        // coordinates and radius on a dyadic grid are exact in binary
        let pitch = 0.125;
        let pts: Vec<(f64, f64)> = (0..n).flat_map(|i| (0..n).map(move |j| (i as f64 * pitch, j as f64 * pitch))).collect();
        let mesh = mesh_from(&pts, Level::Index(0)).unwrap();
        let r = k as f64 * pitch;
        let domain = Domain::unit(2).unwrap();
        let graph = radius_neighbors(&mesh, &mesh.clone().with_level(Level::Index(1)), Radius::Finite(r), &domain).unwrap();
        let got: BTreeSet<_> = graph.edges.iter().copied().collect();
        prop_assert_eq!(got, brute_force(&mesh, &mesh, r));
        // the neighbor k pitches to the right sits exactly on the sphere
        if k < n {
            prop_assert!(graph.edges.contains(&(k * n, 0)));
        }
    }

    #[test]
    fn basis_is_a_partition_of_unity(
        u in prop::collection::vec(0.0..=1.0f64, 1..4),
        degree in 1usize..4,
        extra in 0usize..3,
    ) {
        let config = SplineConfig { degree, control_points: degree + 1 + extra, dim: u.len() };
        let entries = bspline_basis(&u, &config).unwrap();
        prop_assert_eq!(entries.len(), (degree + 1).pow(u.len() as u32));
        let sum: f64 = entries.iter().map(|(_, b)| b).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {}", sum);
        prop_assert!(entries.iter().all(|&(p, b)| p < config.kernel_size() && b >= -1e-15));
    }

    #[test]
    fn batch_norm_standardizes_each_channel(
        rows in prop::collection::vec(prop::collection::vec(-50.0..50.0f64, 3), 2..40),
    ) {
        let input = Tensor2D::from_rows(&rows).unwrap();
        let state = BatchNormState::new(3);
        let (out, _) = batch_norm(&input, &[1.0; 3], &[0.0; 3], &state, Mode::Train).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..out.rows()).map(|r| out.get(r, c)).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-10);
            let raw: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let raw_mean = raw.iter().sum::<f64>() / n;
            let raw_var = raw.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / n;
            // unit variance up to the epsilon guard
            prop_assert!((var - raw_var / (raw_var + 1e-5)).abs() <= 1e-10, "var {}", var);
        }
    }

    #[test]
    fn learning_rate_never_increases(metrics in prop::collection::vec(0.0..1.0f64, 1..200)) {
        let mut s = PlateauScheduler::new(5e-2);
        let mut prev = s.lr;
        for m in metrics {
            let lr = s.step(m);
            prop_assert!(lr <= prev && lr >= 1e-6);
            prev = lr;
        }
    }

    #[test]
    fn normalization_round_trips(values in prop::collection::vec(-1e3..1e3f64, 12..48)) {
        let frames: Vec<Tensor2D> = values.chunks_exact(6).map(|c| Tensor2D::new(2, 3, c.to_vec()).unwrap()).collect();
        prop_assume!(frames.len() >= 2);
        let traj = Trajectory { lambda: vec![2.0], frames: frames.clone() };
        let stats: NormStats = compute_norm_stats([&traj]).unwrap();
        prop_assert!(stats.std.as_slice().iter().all(|s| *s >= 0.0));
        for f in &frames {
            let back = stats.denormalize(&stats.normalize(f).unwrap()).unwrap();
            for (a, b) in f.as_slice().iter().zip(back.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn binary_files_round_trip(pts in points(60), t in 1usize..4) {
        let Some(mesh) = mesh_from(&pts, Level::Output) else { return Ok(()); };
        prop_assert_eq!(&decode_mesh(&encode_mesh(&mesh), Path::new("m")).unwrap(), &mesh);
        let frames: Vec<Tensor2D> = (0..t)
            .map(|k| Tensor2D::new(mesh.node_count(), 3, mesh.coords().iter().chain(mesh.coords()).take(3 * mesh.node_count()).map(|v| (v * (k + 1) as f64) as f32 as f64).collect()).unwrap())
            .collect();
        prop_assert_eq!(decode_fields(&encode_fields(&frames).unwrap(), Path::new("f")).unwrap(), frames);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prediction_shape_is_independent_of_inputs(t in -50.0..150.0f64, lambda in 1.5..2.5f64) {
        let case = GradCheckCase::seeded(3, 40, vec![8, 3], (8, 8)).unwrap();
        let (pred, _) = case.model.forward_cached(&ModelInput::new(t, vec![lambda]), Mode::Eval).unwrap();
        prop_assert_eq!(pred.fields.shape(), (40, 3));
        prop_assert!(pred.fields.is_finite());
    }
}
