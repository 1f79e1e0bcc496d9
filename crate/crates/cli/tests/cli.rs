use std::fs;
use std::process::Command;

fn brcdf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_brcdf"))
}

const SMALL: &str = "\
seed = 3
network.agents = 6
network.edge_prob = 0.6
selection.l = 2, 8
sim.horizon = 30
sim.runs = 2
attack.enabled = true
attack.byzantine = 2
attack.k0 = 10
attack.eta = 6
attack.sigma = optimal
attack.select = bcd
";

#[test]
fn simulate_writes_artifacts_and_design_attack_reads_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    let status = brcdf()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(out.join("series.csv")).unwrap();
    assert!(csv.starts_with("k,l,variant,sigma_mode,s_mode,mse_empirical,mse_prime,mse_analytic\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 31);
    assert!(out.join("manifest.txt").exists());

    let state = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("state_"))
        .unwrap();
    let result = brcdf()
        .args(["design-attack", "--mode", "both", "--state"])
        .arg(&state)
        .output()
        .unwrap();
    assert!(result.status.success());
    let text = String::from_utf8(result.stdout).unwrap();
    assert!(text.starts_with("sigma 48 48\n"));
    assert!(text.contains("patterns 2\n"));
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "selection.l = 9\n").unwrap();
    let result = brcdf().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(result.status.code(), Some(2));
    let err = String::from_utf8(result.stderr).unwrap();
    assert!(err.contains("selection.l"), "{err}");
    assert!(err.contains("l = 9"), "{err}");

    let result = brcdf().args(["reproduce", "fig4"]).output().unwrap();
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn missing_file_exits_with_code_one() {
    let result = brcdf()
        .args(["simulate", "--config", "/nonexistent/brcdf.conf"])
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(1));
}

#[test]
fn gamma_bound_and_graph_export() {
    let result = brcdf().arg("gamma-bound").output().unwrap();
    assert!(result.status.success());
    let text = String::from_utf8(result.stdout).unwrap();
    assert!(text.contains("gamma_star_full_sharing"));
    assert_eq!(text.matches("within_bound = true").count(), 4);

    let dir = tempfile::tempdir().unwrap();
    let dot = dir.path().join("g.dot");
    let status = brcdf()
        .args(["export-graph", "--seed", "5", "--dot"])
        .arg(&dot)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(fs::read_to_string(&dot).unwrap().starts_with("graph"));
}
