use std::fs;
use std::io::BufReader;

use glauber_learn::dynamics::{random_configuration, simulate_ct, simulate_dt, GlauberChain, Mode, Trajectory};
use glauber_learn::harness::{generate_instance, run_benchmark, ExperimentConfig, InstanceFamily};
use glauber_learn::params::{recover_parameters, RecoveryOptions};
use glauber_learn::poly::{MrfModel, MultilinearPolynomial};
use glauber_learn::structure::{find_stopping_times, heuristic_learn, HeuristicLearner, OnlinePatternScanner, StopRecord};

#[test]
fn trajectory_files_round_trip() {
    let model = MrfModel::with_derived_bounds(
        MultilinearPolynomial::from_terms(4, [(vec![0, 1, 2], 0.9), (vec![2, 3], -0.5)]).unwrap(),
    );
    let dir = tempfile::tempdir().unwrap();
    for traj in [simulate_ct(&model, 30.0, &[1, -1, 1, 1], 4).unwrap(), simulate_dt(&model, 500, &[1, 1, -1, 1], 4).unwrap()] {
        let text = dir.path().join("t.txt");
        traj.write_text(fs::File::create(&text).unwrap()).unwrap();
        let back = Trajectory::read_text(BufReader::new(fs::File::open(&text).unwrap())).unwrap();
        assert_eq!(back.events(), traj.events());
        assert_eq!(back.x0(), traj.x0());

        let bin = dir.path().join("t.bin");
        traj.write_binary(fs::File::create(&bin).unwrap()).unwrap();
        let back = Trajectory::read_binary(fs::File::open(&bin).unwrap()).unwrap();
        assert_eq!(back.events(), traj.events());
        assert_eq!(back.horizon(), traj.horizon());
    }
}

#[test]
fn online_scanner_matches_offline_stopping_times() {
    let model = MrfModel::with_derived_bounds(MultilinearPolynomial::from_terms(3, [(vec![0, 1], 1.0)]).unwrap());
    let (window, r, horizon) = (1.0 / 3.0, 2, 3_000_000.0);
    let traj = simulate_ct(&model, horizon, &[1, 1, 1], 12).unwrap();
    let offline = find_stopping_times(&traj, 0, 1, window, r, u64::MAX).unwrap();
    let mut online = Vec::new();
    let mut scanner = OnlinePatternScanner::new(traj.x0(), 0.0, window, r);
    let mut on_stop = |s: StopRecord<'_>| {
        if (s.i, s.j) == (0, 1) {
            online.push(s.block);
        }
    };
    for e in traj.events() {
        scanner.push(e, &mut on_stop);
    }
    scanner.advance_to(horizon, &mut on_stop);
    assert!(!offline.is_empty());
    assert_eq!(online, offline);
}

#[test]
fn heuristic_graph_feeds_parameter_recovery() {
    let instance = generate_instance(&InstanceFamily::IsingChain { beta: 0.8 }, 5, 2, 8).unwrap();
    let model = &instance.model;
    let traj = simulate_dt(model, 600_000, &random_configuration(5, 8), 8).unwrap();

    let mut learner = HeuristicLearner::new(5, 2, None).unwrap();
    learner.process_block(&traj).unwrap();
    // Symmetrised mean statistic: edges score about 0.15, non-edges below 0.1.
    let graph: Vec<Vec<usize>> = (0..5)
        .map(|i| (0..5).filter(|&j| j != i && learner.z_mean(i, j) + learner.z_mean(j, i) > 0.11).collect())
        .collect();
    assert_eq!(graph, model.graph());

    let options = RecoveryOptions { min_samples: 1000, ..Default::default() };
    let recovered = recover_parameters(&traj, &graph, 2, model.derived_bounds().lambda, &options).unwrap();
    for (vars, c) in model.psi().terms() {
        assert!((recovered.psi.coefficient(vars) - c).abs() < 0.12, "{vars:?}");
    }
    assert!(recovered.max_assembly_discrepancy() < 0.2);
}

#[test]
fn double_parity_target_is_found() {
    let (n, k, seed) = (10, 3, 21);
    let instance = generate_instance(&InstanceFamily::DoubleParity, n, k, seed).unwrap();
    let x0 = random_configuration(n, seed);
    let mut chain = GlauberChain::new(&instance.model, Mode::Discrete, &x0, seed).unwrap();
    let blocks = std::iter::from_fn(|| Some(chain.run_for(10_000.0))).take(3_000);
    let report = heuristic_learn(blocks, n, k, None, 10, instance.target, instance.support()).unwrap();
    assert!(report.succeeded_at.is_some());
}

#[test]
fn benchmark_outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        grid: vec![(8, 3)],
        trials: 2,
        seed: 2,
        max_blocks: Some(100),
        sparsitron_test_size: 300,
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let record = run_benchmark(&config).unwrap();
    assert_eq!(record.trials.len(), 4);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let journal = fs::read_to_string(dir.path().join("trials.jsonl")).unwrap();
    assert_eq!(journal.lines().count(), 4);
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("record.json")).unwrap()).unwrap();
    assert_eq!(parsed["config"]["grid"][0][0], 8);
}
