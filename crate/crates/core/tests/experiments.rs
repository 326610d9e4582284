use dnh_core::config::{ExperimentConfig, Mode};
use dnh_core::harness::{compare, fixed_predictor_losses, hindsight_comparator, run_experiment, sweep};
use dnh_core::metrics::{cumulative_regret, freq_variance_across_replicas};
use dnh_core::numerics::RngState;
use dnh_core::streams::{Stream, StreamSpec};

fn small(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed, log_every: 20, eval_samples: 50, ..ExperimentConfig::default() };
    c.stream = StreamSpec { dim: 3, segment_len: 300, num_segments: 2, ..StreamSpec::default() };
    c.meta.window = 50;
    c
}

#[test]
fn realizable_stationary_stream_is_learned() {
    let mut c = ExperimentConfig { seed: 1, ..ExperimentConfig::default() };
    c.stream.shift_magnitude = 0.0;
    c.stream.noise_std = 0.0;
    let out = run_experiment(&c).unwrap();
    let trace = &out.log.task_loss_trace;
    assert_eq!(trace.len(), 20_000);
    let tail = trace[trace.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < 1e-3, "final loss {tail}");
}

#[test]
fn comparator_beats_random_probes() {
    let spec = StreamSpec { dim: 4, segment_len: 500, num_segments: 3, seed: Some(9), ..StreamSpec::default() };
    let best: f64 = hindsight_comparator(&spec, 1500).unwrap().losses.iter().sum();
    let teacher = Stream::new(&spec).unwrap().teacher(1).unwrap();
    let mut rng = RngState::new(10);
    for i in 0..1000 {
        let scale = 10f64.powf(-3.0 + 3.0 * (i as f64 / 1000.0));
        let probe = teacher.add(&rng.normal_matrix(4, 4, scale));
        let total: f64 = fixed_predictor_losses(&spec, 1500, &probe).unwrap().iter().sum();
        assert!(best <= total + 1e-9);
    }
}

#[test]
fn regret_against_the_run_itself_is_zero() {
    let out = run_experiment(&small(2)).unwrap();
    let regret = cumulative_regret(&out.log, &out.log.task_loss_trace.clone()).unwrap();
    assert!(regret.iter().all(|&r| r == 0.0));
}

#[test]
fn seed_changes_log_and_hash() {
    let a = run_experiment(&small(3)).unwrap();
    let b = run_experiment(&small(4)).unwrap();
    assert_ne!(a.log.to_csv(), b.log.to_csv());
    assert_ne!(a.log.header.config_hash, b.log.header.config_hash);
    assert_eq!(a.log.header.replica_hash, b.log.header.replica_hash);
}

#[test]
fn frozen_frequencies_have_zero_replica_variance() {
    let mut c = small(0);
    c.meta.gamma = 0.0;
    c.meta.eta_f = 0.0;
    c.meta.eta_phi = 0.0;
    c.optimizer.sigma2 = 0.0;
    let logs: Vec<_> = (1..=3).map(|s| run_experiment(&c.with_seed(s)).unwrap().log).collect();
    let series = freq_variance_across_replicas(&logs, 1).unwrap();
    assert!(!series.variance.is_empty());
    assert!(series.variance.iter().all(|&v| v == 0.0));

    let other = run_experiment(&ExperimentConfig { l_max: 4, ..c.with_seed(4) }).unwrap().log;
    assert!(freq_variance_across_replicas(&[logs[0].clone(), logs[1].clone(), other], 1).is_err());
}

#[test]
fn single_value_sweep_matches_comparison() {
    let c = small(0);
    let report = compare(&c, &[1, 2, 3], 2).unwrap();
    let rows = sweep(&c, "gamma", &[c.meta.gamma], &[1, 2, 3], 2).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].1, report);
    assert_eq!(rows[0].0.regret_ratio, report.regret_ratio);
}

#[test]
fn sweep_rows_follow_values() {
    let c = ExperimentConfig { total_steps: Some(300), ..small(0) };
    let rows = sweep(&c, "delta_threshold", &[0.01, 0.05, 0.25], &[1, 2, 3], 4).unwrap();
    assert_eq!(rows.iter().map(|r| r.0.value).collect::<Vec<_>>(), vec![0.01, 0.05, 0.25]);
    let again = sweep(&c, "delta_threshold", &[0.01, 0.05, 0.25], &[1, 2, 3], 1).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn static_mode_never_changes_structure() {
    let out = run_experiment(&ExperimentConfig { mode: Mode::Static, ..small(5) }).unwrap();
    assert!(out.log.events.is_empty());
    assert!(out.log.records.iter().all(|r| r.levels == 2 && r.freqs == vec![1.0, 0.5]));
}
