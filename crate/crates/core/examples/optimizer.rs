//! Adam with the plateau schedule on a two-parameter quadratic bowl.

use mesh_surrogate::nn::{adam_step, AdamState, ParamStore, PlateauScheduler};

fn main() -> Result<(), mesh_surrogate::Error> {
    let mut params = ParamStore::new();
    params.insert("w", vec![2], vec![3.0, -2.0])?;
    let mut adam = AdamState::new(&params, 5e-2);
    let mut schedule = PlateauScheduler::new(5e-2);

    for epoch in 1..=200 {
        // loss = (w0 - 1)^2 + 10 (w1 + 0.5)^2
        let w = params.get("w").to_vec();
        let loss = (w[0] - 1.0).powi(2) + 10.0 * (w[1] + 0.5).powi(2);
        let grad = [2.0 * (w[0] - 1.0), 20.0 * (w[1] + 0.5)];
        params.param_mut("w").grad.copy_from_slice(&grad);
        adam_step(&mut params, &mut adam)?;
        adam.lr = schedule.step(loss);
        if epoch % 20 == 0 {
            println!(
                "epoch {epoch:3}  loss {loss:.3e}  lr {:.0e}  w = {:?}",
                adam.lr,
                params.get("w")
            );
        }
    }
    Ok(())
}
