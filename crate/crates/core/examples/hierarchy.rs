//! Builds the default mesh pyramid over a jittered lattice and reports
//! node counts, neighborhood sizes and reachability.

use mesh_surrogate::dataset::jittered_lattice;
use mesh_surrogate::geometry::{build_hierarchy, check_connectivity, Domain, HierarchyConfig, Radius};

fn main() -> Result<(), mesh_surrogate::Error> {
    let domain = Domain::new(vec![0.0, 0.0], vec![2.0, 1.0])?;
    let output = jittered_lattice(&domain, 300, 7)?;
    let config = HierarchyConfig::halving(&domain, 5)?;
    let hierarchy = build_hierarchy(&domain, &output, &config)?;
    let report = check_connectivity(&hierarchy);

    println!("level  nodes  radius    in-degree (min/mean/max)");
    for (k, graph) in hierarchy.graphs.iter().enumerate() {
        let radius = match graph.radius {
            Radius::Infinite => "inf".to_owned(),
            Radius::Finite(r) => format!("{r:.4}"),
        };
        let d = report.in_degree[k];
        println!(
            "{:>5}  {:>5}  {:>8}  {}/{:.1}/{}",
            k + 1,
            graph.target_count,
            radius,
            d.min,
            d.mean,
            d.max
        );
    }
    println!("unreachable output nodes: {}", report.unreachable.len());
    Ok(())
}
