//! Trains a few epochs, saves the model directory, reloads it and checks
//! that predictions are bitwise identical.

use mesh_surrogate::dataset::{make_dataset, Dataset, SplitName, SyntheticConfig};
use mesh_surrogate::geometry::Domain;
use mesh_surrogate::model::{Model, ModelConfig, ModelInput};
use mesh_surrogate::nn::Mode;
use mesh_surrogate::trainer::{fit_scaling, load_model, samples, save_model, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("mesh-surrogate-persistence");
    let domain = Domain::new(vec![0.0, 0.0], vec![2.0, 1.0])?;
    let data = SyntheticConfig {
        domain: domain.clone(),
        num_nodes: 120,
        num_trajectories: 3,
        steps: 10,
        lambda_range: (2.0, 2.2),
        seed: 5,
    };
    make_dataset(&data, (2, 1, 0), &root.join("data"))?;
    let dataset = Dataset::load(&root.join("data"))?;
    let stats = dataset.norm_stats()?;
    let train_set = samples(dataset.split(SplitName::Train), &stats, None)?;

    let config = ModelConfig::desk(domain, vec![16, 8, 3])?;
    let mut model = Model::init(config, &dataset.mesh, fit_scaling(&dataset)?, 5)?;
    let trainer = train(
        &mut model,
        &train_set,
        &[],
        TrainConfig {
            epochs: 40,
            initial_lr: 1e-2,
            ..TrainConfig::default()
        },
    )?;
    let (first, last) = (&trainer.history[0], &trainer.history[trainer.history.len() - 1]);
    println!("train loss {:.4e} -> {:.4e}", first.train_loss, last.train_loss);

    let model_dir = root.join("model");
    save_model(&model_dir, &model, &stats, None)?;
    let loaded = load_model(&model_dir)?;
    let input = ModelInput::new(4.0, vec![2.1]);
    let before = model.forward_cached(&input, Mode::Eval)?.0;
    let after = loaded.model.forward_cached(&input, Mode::Eval)?.0;
    println!("reloaded prediction bitwise identical: {}", before == after);
    Ok(())
}
