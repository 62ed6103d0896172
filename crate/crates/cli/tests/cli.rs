use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glauber-learn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).expect("output file")).expect("valid JSON")
}

#[test]
fn simulate_then_learn_structure() {
    let dir = tempfile::tempdir().unwrap();
    let sim = run(
        dir.path(),
        &["--seed", "5", "--out-dir", "sim", "simulate", "--family", "spn", "--n", "6", "--k", "3", "--mode", "discrete", "--horizon", "400000"],
    );
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let model = json(&dir.path().join("sim/model.json"));
    let planted: Vec<usize> = model["terms"][0]["vars"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();

    let learn = run(dir.path(), &["--out-dir", "learned", "learn-structure", "--trajectory", "sim/trajectory.txt", "--model", "sim/model.json"]);
    assert!(learn.status.success(), "{}", String::from_utf8_lossy(&learn.stderr));
    let ranking = json(&dir.path().join("learned/ranking.json"));
    let mut top: Vec<usize> = ranking["top_candidates"][0].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
    top.push(0);
    top.sort_unstable();
    assert_eq!(top, planted);
}

#[test]
fn learn_params_recovers_chain() {
    let dir = tempfile::tempdir().unwrap();
    let sim = run(
        dir.path(),
        &["--seed", "2", "--out-dir", "sim", "simulate", "--family", "ising-chain", "--n", "5", "--beta", "0.3", "--mode", "discrete", "--horizon", "150000"],
    );
    assert!(sim.status.success());
    let fit = run(
        dir.path(),
        &["--out-dir", "fit", "learn-params", "--trajectory", "sim/trajectory.txt", "--model", "sim/model.json", "--min-samples", "1000"],
    );
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let recovered = json(&dir.path().join("fit/recovered.json"));
    for term in recovered["terms"].as_array().unwrap() {
        let vars = term["vars"].as_array().unwrap();
        let coeff = term["coeff"].as_f64().unwrap();
        let truth = if vars.len() == 2 && vars[1].as_u64().unwrap() == vars[0].as_u64().unwrap() + 1 { 0.3 } else { 0.0 };
        assert!((coeff - truth).abs() < 0.15, "{term}");
    }
    assert!(dir.path().join("fit/diagnostics.json").exists());
}

#[test]
fn insufficient_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let sim = run(dir.path(), &["--out-dir", "sim", "simulate", "--family", "ising-chain", "--n", "4", "--mode", "discrete", "--horizon", "500"]);
    assert!(sim.status.success());
    let fit = run(dir.path(), &["learn-params", "--trajectory", "sim/trajectory.txt", "--model", "sim/model.json", "--min-samples", "1000"]);
    assert_eq!(fit.status.code(), Some(2));

    let ct = run(dir.path(), &["--out-dir", "ct", "simulate", "--family", "ising-chain", "--n", "4", "--horizon", "10"]);
    assert!(ct.status.success());
    let theory = run(dir.path(), &["learn-structure", "--mode", "theory", "--trajectory", "ct/trajectory.txt", "--model", "ct/model.json"]);
    assert_eq!(theory.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["simulate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn binary_trajectories_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let sim = run(
        dir.path(),
        &["--out-dir", "sim", "simulate", "--family", "spn", "--n", "5", "--k", "2", "--mode", "discrete", "--horizon", "20000", "--output", "t.bin"],
    );
    assert!(sim.status.success());
    let learn = run(dir.path(), &["learn-structure", "--trajectory", "t.bin", "--k", "2"]);
    assert!(learn.status.success(), "{}", String::from_utf8_lossy(&learn.stderr));
    let report: serde_json::Value = serde_json::from_slice(&learn.stdout).unwrap();
    assert_eq!(report["n"], 5);
}

#[test]
fn baseline_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--seed", "3", "baseline", "--n", "8", "--k", "3", "--max-blocks", "6", "--test-size", "200"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("block,elapsed_s,best_risk,top3_monomials,success"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty() && rows.len() <= 6);
    assert!(rows.iter().all(|r| r.split(',').count() == 5));
}

#[test]
fn bench_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"{"grid": [[8, 3]], "trials": 2, "max_blocks": 50, "sparsitron_test_size": 200}"#;
    fs::write(dir.path().join("config.json"), config).unwrap();
    let out = run(dir.path(), &["--seed", "1", "--threads", "1", "--out-dir", "grid", "bench", "--config", "config.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["summary.csv", "timing.csv", "table.csv", "record.json", "trials.jsonl"] {
        assert!(dir.path().join("grid").join(name).exists(), "{name}");
    }
    let journal = fs::read_to_string(dir.path().join("grid/trials.jsonl")).unwrap();
    assert_eq!(journal.lines().count(), 4);
}

#[test]
fn lower_bound_and_suite_verify() {
    let dir = tempfile::tempdir().unwrap();
    let lb = run(dir.path(), &["--out-dir", "v", "verify-lb"]);
    assert!(lb.status.success());
    let witness = json(&dir.path().join("v/lower_bound.json"));
    assert!(witness["max_discrepancy"].as_f64().unwrap() < 1e-8);

    let suite = run(dir.path(), &["--seed", "1", "verify-suite"]);
    assert!(suite.status.success(), "{}", String::from_utf8_lossy(&suite.stdout));
    assert!(String::from_utf8_lossy(&suite.stdout).contains("statistic-separation"));
}
