//! Evaluates the tensor-product B-spline basis at a few pseudo-coordinates
//! and checks that each evaluation sums to one.

use mesh_surrogate::splineconv::{bspline_basis, SplineConfig};

fn main() -> Result<(), mesh_surrogate::Error> {
    for config in [
        SplineConfig {
            degree: 1,
            control_points: 3,
            dim: 2,
        },
        SplineConfig {
            degree: 2,
            control_points: 4,
            dim: 2,
        },
    ] {
        println!(
            "degree {} with {} control points per axis",
            config.degree, config.control_points
        );
        for u in [[0.0, 0.0], [0.25, 0.5], [0.7, 0.1], [1.0, 1.0]] {
            let entries = bspline_basis(&u, &config)?;
            let sum: f64 = entries.iter().map(|(_, b)| b).sum();
            let shown: Vec<String> = entries.iter().map(|(p, b)| format!("{p}:{b:.4}")).collect();
            println!("  u = {u:?}  sum = {sum:.15}  [{}]", shown.join(" "));
        }
    }
    Ok(())
}
