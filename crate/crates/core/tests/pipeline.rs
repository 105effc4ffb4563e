use mrplan::experiments::{self, Config, NamedPolicy, Policy, Task, SAFETY_MARGIN};
use mrplan::planner::{self, load_checkpoint, save_checkpoint, PlannerConfig, Variant};
use mrplan::runtime::{closed_loop, ClosedLoopConfig, NetworkModel};
use mrplan::trainer::{self, TrainOptions, TrainingConfig};

fn tiny(variant: Variant) -> TrainingConfig {
    TrainingConfig {
        num_graphs: 24,
        robots: 4,
        steps: 6,
        batch_size: 4,
        epochs: 4,
        lr: 3e-3,
        lr_final_epochs: 1,
        holdout_graphs: 6,
        planner: PlannerConfig {
            variant,
            features: 16,
            ..PlannerConfig::default()
        },
        ..TrainingConfig::default()
    }
}

#[test]
fn train_save_load_and_deploy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::GatpF1);
    let data = trainer::generate_dataset(&cfg).unwrap();
    let holdout = trainer::generate_holdout(&cfg).unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let out = trainer::train(&cfg, &data, &holdout, &opts).unwrap();
    assert_eq!(out.metrics.len(), 4);
    assert!(out.metrics.last().unwrap().holdout_loss < out.initial_holdout_loss);
    for epoch in 0..4 {
        assert!(trainer::checkpoint_path(dir.path(), epoch).exists());
    }

    let path = dir.path().join("final.ckpt");
    save_checkpoint(&path, &out.weights, &trainer::final_meta(&cfg, &out)).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, out.weights);
    assert_eq!(meta.epoch, 3);
    let s = &holdout[0];
    let a = planner::plan(&s.robots, &s.goals, s.env_size, &out.weights).unwrap();
    let b = planner::plan(&s.robots, &s.goals, s.env_size, &loaded).unwrap();
    assert_eq!(a.normalized, b.normalized);

    let mut config = Config::default();
    config.experiment.scenarios = 5;
    config.experiment.robots = vec![4];
    config.experiment.horizons = vec![40.0];
    let policy = NamedPolicy {
        name: "gatp_f1".into(),
        policy: Policy::Planner(Box::new(loaded.clone())),
        checkpoint: Some(path.clone()),
        hash: Some(experiments::content_hash(&std::fs::read(&path).unwrap())),
    };
    let table = experiments::eval_coverage(&config, &[policy], "pipeline").unwrap();
    let pct: f64 = table.rows[0][5].parse().unwrap();
    assert!((0.0..=100.0).contains(&pct));

    let scenario = experiments::eval_scenario(&config.experiment, Task::Zone, 4, 0).unwrap();
    let cl = ClosedLoopConfig {
        duration: 3.0,
        network: NetworkModel::constant(0.1),
        ..ClosedLoopConfig::default()
    };
    let run = closed_loop(&scenario, &loaded, &cl).unwrap();
    assert!(run.log.min_distance >= SAFETY_MARGIN * cl.controller.d_safe);
    assert_eq!(run.cycles.len(), 6);
    // Each cycle's subgoals activate 2 layers x 0.1 s after its snapshot.
    for a in &run.activations {
        assert!((a.ready - a.snapshot_time - 0.2).abs() < 1e-9);
    }
}

#[test]
fn every_variant_trains_without_diverging() {
    for variant in Variant::ALL {
        let cfg = TrainingConfig {
            epochs: 2,
            lr_final_epochs: 0,
            ..tiny(variant)
        };
        let data = trainer::generate_dataset(&cfg).unwrap();
        let holdout = trainer::generate_holdout(&cfg).unwrap();
        let out = trainer::train(&cfg, &data, &holdout, &TrainOptions::default()).unwrap();
        assert!(out.weights.tensors.iter().all(|t| t.is_finite()), "{variant}");
        assert_eq!(out.steps, 12);
    }
}
