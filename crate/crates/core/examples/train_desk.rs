//! Desk-scale run: synthetic data, four-convolution model, test-split metrics.
//!
//! `cargo run --release --example train_desk -- [epochs] [initial_lr]`

use std::time::Instant;

use mesh_surrogate::dataset::{make_dataset, Dataset, SplitName, SyntheticConfig};
use mesh_surrogate::geometry::Domain;
use mesh_surrogate::model::{Model, ModelConfig};
use mesh_surrogate::trainer::{error_accumulation_stat, evaluate, fit_scaling, samples, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(Ok(300), |s| s.parse())?;
    let initial_lr = args.next().map_or(Ok(1e-2), |s| s.parse())?;
    let dir = tempfile_dir()?;
    let domain = Domain::new(vec![0.0, 0.0], vec![2.0, 1.0])?;
    let data = SyntheticConfig {
        domain: domain.clone(),
        num_nodes: 300,
        num_trajectories: 11,
        steps: 100,
        lambda_range: (2.0, 2.2),
        seed: 0,
    };
    make_dataset(&data, (9, 1, 1), &dir)?;
    let dataset = Dataset::load(&dir)?;
    let stats = dataset.norm_stats()?;
    let train = samples(dataset.split(SplitName::Train), &stats, None)?;
    let val = samples(dataset.split(SplitName::Val), &stats, None)?;

    let config = ModelConfig::desk(domain, vec![64, 32, 16, 3])?;
    let mut model = Model::init(config, &dataset.mesh, fit_scaling(&dataset)?, 42)?;
    println!(
        "nodes per level {:?}, {} parameters",
        model.hierarchy.node_counts(),
        model.parameter_count()
    );

    let mut trainer = Trainer::new(
        &model,
        TrainConfig {
            epochs,
            initial_lr,
            seed: 42,
            ..TrainConfig::default()
        },
    )?;
    let start = Instant::now();
    trainer.run(&mut model, &train, &val, |_, _, r| {
        if r.epoch % 10 == 0 || r.epoch == 1 {
            println!(
                "epoch {:4} train {:.3e} val {:.3e} lr {:.1e} ({:.0?})",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                start.elapsed()
            );
        }
        Ok(())
    })?;
    trainer.restore_best(&mut model)?;
    let m = evaluate(&model, &dataset, &stats, SplitName::Test)?;
    let acc = error_accumulation_stat(&m.rmse);
    println!(
        "test RMSE mean={:.4e} std={:.4e} accum_ratio={:.3} corr={:.3}",
        m.rmse_mean, m.rmse_std, acc.ratio, acc.correlation
    );
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join("mesh-surrogate-desk");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
