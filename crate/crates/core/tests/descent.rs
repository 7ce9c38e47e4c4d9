use ppmreg::config::ExperimentConfig;
use ppmreg::descent::{check_gradients, run_experiment, with_workers, GradCheckOptions};
use ppmreg::objective::{LossConfig, MainLoss};

fn cramer_only(seed: u64, steps: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("circle-cramer")
        .unwrap()
        .scaled(96, 0, steps);
    cfg.seed = seed;
    cfg.record_every = 500;
    cfg.pd_distance = false;
    cfg.output.frames = false;
    cfg
}

#[test]
fn cramer_descent_does_not_increase_over_500_step_windows() {
    let mut good = 0;
    for seed in 0..10 {
        let out = run_experiment(&cramer_only(seed, 3000)).unwrap();
        let values: Vec<f64> = out.trajectory.records.iter().map(|r| r.value).collect();
        assert_eq!(values.len(), 7);
        if values.windows(2).all(|w| w[1] <= w[0]) {
            good += 1;
        }
    }
    assert!(good >= 9, "only {good}/10 seeds were non-increasing");
}

#[test]
fn zero_steps_records_only_the_start() {
    let out = run_experiment(&cramer_only(1, 0)).unwrap();
    assert_eq!(out.trajectory.records.len(), 1);
    assert_eq!(out.trajectory.records[0].step, 0);
    assert_eq!(out.final_cloud, out.initial);
}

#[test]
fn runs_are_identical_across_worker_counts() {
    let mut cfg = ExperimentConfig::preset("two-circles-mmd-ppm")
        .unwrap()
        .scaled(40, 64, 30);
    cfg.record_every = 10;
    let one = with_workers(1, || run_experiment(&cfg)).unwrap().unwrap();
    let four = with_workers(4, || run_experiment(&cfg)).unwrap().unwrap();
    assert_eq!(one.trajectory, four.trajectory);
    assert_eq!(one.final_cloud, four.final_cloud);
}

#[test]
fn centroid_penalty_keeps_the_gap_open() {
    let mut cfg = ExperimentConfig::preset("imperfect-circle-mmd-c0.12")
        .unwrap()
        .scaled(128, 0, 4000);
    cfg.record_every = 4000;
    cfg.pd_distance = false;
    for seed in 0..3 {
        cfg.seed = seed;
        let out = run_experiment(&cfg).unwrap();
        let gap = out.trajectory.last().unwrap().centroid_gap;
        assert!(gap >= 0.9 * 0.12, "seed {seed}: gap {gap}");
    }
}

#[test]
fn gradient_checker_accuracy_and_detection() {
    let cramer = LossConfig {
        main: MainLoss::Cramer,
        loss_weight: 1.0,
        reg: None,
        penalty: None,
    };
    let report = check_gradients(&cramer, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
    let corrupted = check_gradients(
        &cramer,
        &GradCheckOptions {
            corrupt: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!corrupted.passed());
    assert!(corrupted.max_rel_error() > corrupted.tolerance);
}
