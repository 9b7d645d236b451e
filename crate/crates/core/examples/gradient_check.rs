//! Verifies the full model's reverse pass against central differences.
//!
//! `cargo run --release --example gradient_check -- [seed]`

use mesh_surrogate::nn::GradCheckOptions;
use mesh_surrogate::verify::GradCheckCase;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let case = GradCheckCase::seeded(seed, 100, vec![16, 8, 3], (128, 64))?;
    println!(
        "{} parameters, nodes per level {:?}",
        case.model.parameter_count(),
        case.model.hierarchy.node_counts()
    );
    let report = case.run(&GradCheckOptions::default())?;
    println!(
        "max relative error {:.3e} over {} coordinates, worst at {:?}",
        report.max_rel_error, report.checked, report.worst
    );
    Ok(())
}
