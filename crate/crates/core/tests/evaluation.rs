//! Evaluation is pure and its RMSE matches a direct recomputation.

use mesh_surrogate::dataset::{make_dataset, Dataset, SplitName, SyntheticConfig};
use mesh_surrogate::geometry::Domain;
use mesh_surrogate::model::{Model, ModelConfig};
use mesh_surrogate::trainer::{evaluate, fit_scaling, predict_trajectory, samples, train, TrainConfig};

fn trained() -> (tempfile::TempDir, Dataset, Model) {
    let dir = tempfile::tempdir().unwrap();
    let domain = Domain::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
    let config = SyntheticConfig {
        domain: domain.clone(),
        num_nodes: 120,
        num_trajectories: 4,
        steps: 10,
        lambda_range: (2.0, 2.2),
        seed: 5,
    };
    make_dataset(&config, (2, 1, 1), dir.path()).unwrap();
    let dataset = Dataset::load(dir.path()).unwrap();
    let stats = dataset.norm_stats().unwrap();
    let train_set = samples(dataset.split(SplitName::Train), &stats, None).unwrap();
    let model_config = ModelConfig {
        embed_hidden: 16,
        f0_dim: 8,
        ..ModelConfig::desk(domain, vec![8, 4, 3]).unwrap()
    };
    let mut model = Model::init(model_config, &dataset.mesh, fit_scaling(&dataset).unwrap(), 2).unwrap();
    let config = TrainConfig {
        epochs: 3,
        initial_lr: 1e-2,
        ..TrainConfig::default()
    };
    train(&mut model, &train_set, &[], config).unwrap();
    (dir, dataset, model)
}

#[test]
fn evaluate_is_repeatable_and_matches_recomputation() {
    let (_dir, dataset, model) = trained();
    let stats = dataset.norm_stats().unwrap();
    let first = evaluate(&model, &dataset, &stats, SplitName::Test).unwrap();
    let second = evaluate(&model, &dataset, &stats, SplitName::Test).unwrap();
    assert_eq!(first, second);

    let traj = dataset.split(SplitName::Test).next().unwrap();
    let predictions = predict_trajectory(&model, traj).unwrap();
    for (t, (pred, frame)) in predictions.iter().zip(&traj.frames).enumerate() {
        let target = stats.normalize(frame).unwrap();
        let mut sum = 0.0;
        for r in 0..pred.rows() {
            for c in 0..pred.cols() {
                sum += (pred.get(r, c) - target.get(r, c)).powi(2);
            }
        }
        let rmse = (sum / (pred.rows() * pred.cols()) as f64).sqrt();
        assert!(
            (rmse - first.rmse[t]).abs() <= 1e-12,
            "t {t}: {rmse} vs {}",
            first.rmse[t]
        );
    }
    let mean = first.rmse.iter().sum::<f64>() / first.rmse.len() as f64;
    assert!((mean - first.rmse_mean).abs() <= 1e-12);
}

#[test]
fn evaluation_rejects_empty_split() {
    let (_dir, mut dataset, model) = trained();
    let stats = dataset.norm_stats().unwrap();
    dataset.manifest.split.val.clear();
    assert!(evaluate(&model, &dataset, &stats, SplitName::Val).is_err());
}
