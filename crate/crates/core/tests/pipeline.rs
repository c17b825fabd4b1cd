use std::sync::Arc;

use virus_field::simrig::{generate_dataset, trajectory_preset, Dataset, Environment, RigConfig};
use virus_field::train::{run_offline, Mode, TrainConfig, Trainer};

fn dataset(scene: &str, seed: u64) -> Arc<Dataset> {
    let env = Environment::preset(scene).unwrap();
    let traj = trajectory_preset(scene, "loop").unwrap();
    Arc::new(generate_dataset(&env, &traj, &RigConfig::default(), seed, None).unwrap())
}

fn small(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 128,
        grid_resolution: 32,
        nerf_update_samples: 512,
        eval_test_poses: 2,
        psnr_images: 1,
        scan_step_deg: 10.0,
        ..TrainConfig::default()
    }
}

#[test]
fn glass_and_black_surfaces_cost_irs_returns() {
    let office = dataset("mini-office", 0).irs_validity();
    let commons = dataset("mini-commons", 0).irs_validity();
    assert!(commons < office, "commons {commons} office {office}");
    assert!(office > 0.0 && office <= 1.0);
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = dataset("mini-office", 3);
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.frames.len(), ds.frames.len());
    assert_eq!(back.frames, ds.frames);
}

#[test]
fn same_seed_trains_to_the_same_field() {
    let ds = dataset("mini-office", 1);
    let a = run_offline(ds.clone(), small(6)).unwrap();
    let b = run_offline(ds.clone(), small(6)).unwrap();
    assert_eq!(a.field, b.field);
    assert_eq!(a.grid, b.grid);

    let c = run_offline(ds, TrainConfig { seed: 9, ..small(6) }).unwrap();
    assert_ne!(a.field, c.field);
}

#[test]
fn training_lowers_the_loss() {
    let ds = dataset("mini-office", 2);
    let mut t = Trainer::new(small(60), ds).unwrap();
    let first: f64 = (0..5).map(|_| t.step().unwrap().l_tot).sum();
    while t.step < 55 {
        t.step().unwrap();
    }
    let last: f64 = (0..5).map(|_| t.step().unwrap().l_tot).sum();
    assert!(t.finished());
    assert!(last < first, "first {first} last {last}");
    assert!(t.field.tables.data.iter().chain(&t.field.density.data).chain(&t.field.color.data).all(|v| v.is_finite()));
}

#[test]
fn online_mode_reveals_frames_over_time() {
    let ds = dataset("mini-office", 0);
    let t = Trainer::new(TrainConfig { mode: Mode::Online, ..small(100) }, ds.clone()).unwrap();
    let seen: Vec<usize> = [0, 25, 50, 99, 100].iter().map(|&s| t.visible_frames(s)).collect();
    assert!(seen.windows(2).all(|w| w[0] <= w[1]), "{seen:?}");
    assert!(seen[0] < ds.frames.len() / 4, "{seen:?}");
    assert_eq!(seen[4], ds.frames.len());

    let offline = Trainer::new(small(100), ds.clone()).unwrap();
    assert_eq!(offline.visible_frames(0), ds.frames.len());
}

#[test]
fn evaluation_scores_every_test_pose() {
    let ds = dataset("mini-office", 0);
    let mut t = Trainer::new(small(4), ds).unwrap();
    t.run().unwrap();
    let ev = t.evaluate().unwrap();
    assert_eq!(ev.predicted.len(), ev.ground_truth.len());
    assert!(!ev.predicted.is_empty());
    assert!(ev.psnr.is_some_and(f64::is_finite));
    assert_eq!(ev.metrics.zones.len(), 3);
}
