//! Generates a small synthetic dataset, reloads it and prints the
//! normalization statistics at the node nearest the domain centre.

use mesh_surrogate::dataset::{make_dataset, Dataset, SplitName, SyntheticConfig};
use mesh_surrogate::geometry::Domain;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("mesh-surrogate-synthetic");
    let config = SyntheticConfig {
        domain: Domain::new(vec![0.0, 0.0], vec![2.0, 1.0])?,
        num_nodes: 300,
        num_trajectories: 5,
        steps: 40,
        lambda_range: (2.0, 2.2),
        seed: 11,
    };
    let manifest = make_dataset(&config, (3, 1, 1), &dir)?;
    println!(
        "wrote {} trajectories to {}",
        manifest.trajectories.len(),
        dir.display()
    );
    println!("split {:?}", manifest.split);

    let dataset = Dataset::load(&dir)?;
    let stats = dataset.norm_stats()?;
    let centre = dataset.domain().centroid();
    let nearest = (0..dataset.mesh.node_count())
        .min_by(|&a, &b| {
            let d = |i: usize| {
                dataset
                    .mesh
                    .node(i)
                    .iter()
                    .zip(&centre)
                    .map(|(x, c)| (x - c).powi(2))
                    .sum::<f64>()
            };
            d(a).total_cmp(&d(b))
        })
        .expect("mesh is not empty");
    println!("node {nearest} at {:?}", dataset.mesh.node(nearest));
    for (c, name) in ["p", "vx", "vy"].iter().enumerate() {
        println!(
            "  {name:>2}: mean {:.4}  std {:.4}",
            stats.mean.get(nearest, c),
            stats.std.get(nearest, c)
        );
    }
    for traj in dataset.split(SplitName::Test) {
        println!("test trajectory lambda = {:.4}", traj.lambda[0]);
    }
    Ok(())
}
