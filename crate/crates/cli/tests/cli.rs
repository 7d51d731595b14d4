use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn btlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btlab")).args(args).output().expect("binary runs")
}

fn run_config(experiment: &str, config: &str, dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let mut args = vec![experiment, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    btlab(&args)
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out/report.json")).unwrap()).unwrap()
}

#[test]
fn malformed_config_exits_1_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("gap-test", "seed = 1\n[grid]\nn = 2\nh = 0.1\nbogus = true\n", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 5"), "{err}");
    assert!(err.contains("bogus"), "{err}");

    let o = run_config("gap-test", "[grid]\nn = 2\nh = \"coarse\"\n", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn experiment_mismatch_and_missing_map_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("neck", "experiment = \"solve\"\n", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = run_config("solve", "[input]\nmap = \"nowhere.map\"\n", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.map"));
}

#[test]
fn gap_test_reports_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "seed = 5\n[grid]\nn = 2\nh = 0.0625\n[solver]\nresidual_tol = 1e-8\n[gap]\ntrials = 4\n";
    let o = run_config("gap-test", cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert_eq!(r["constant"], Value::Bool(true));
    assert_eq!(r["trials"].as_array().unwrap().len(), 4);
    for t in r["trials"].as_array().unwrap() {
        assert!(t["initial_energy"].as_f64().unwrap() < r["energy_bound"].as_f64().unwrap());
    }
    let csv = std::fs::read_to_string(dir.path().join("out/trials.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn mobius_sweep_has_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("mobius-sweep", "[grid]\nn = 2\nh = 0.03125\n", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert_eq!(r["rows"].as_array().unwrap().len(), 4);
    let spread = r["max_relative_spread"].as_f64().unwrap();
    assert!(spread >= 0.0 && spread < 0.1, "{spread}");
}

#[test]
fn reports_are_byte_identical_across_runs_and_pools() {
    let cfg = "[grid]\nn = 2\nh = 0.0625\n[gap]\ntrials = 3\n";
    let mut reports = vec![];
    for jobs in ["1", "3"] {
        let dir = tempfile::tempdir().unwrap();
        let o = run_config("gap-test", cfg, dir.path(), &["--seed", "42", "--jobs", jobs]);
        assert_eq!(o.status.code(), Some(0));
        reports.push(std::fs::read(dir.path().join("out/report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);

    let dir = tempfile::tempdir().unwrap();
    run_config("gap-test", cfg, dir.path(), &["--seed", "43"]);
    assert_ne!(std::fs::read(dir.path().join("out/report.json")).unwrap(), reports[0]);
}

#[test]
fn extraction_hitting_generation_cap_exits_2() {
    let cfg = r#"
[grid]
n = 2
h = 0.00390625
[sequence]
k = [1, 3]
superposition = "product"
[[sequence.bubble]]
prototype = "chart-inverse"
[[sequence.bubble]]
prototype = "antipodal"
power = 2.0
[extract]
generation_cap = 1
profile_radii = 0
"#;
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("extract", cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert_eq!(r["incomplete"], Value::Bool(true));
    assert_eq!(r["generations"].as_array().unwrap().len(), 1);
}

#[test]
fn extract_and_identity_on_single_bubble() {
    let cfg = r#"
[grid]
n = 2
h = 0.00390625
[sequence]
k = [2, 5]
[[sequence.bubble]]
prototype = "chart-inverse"
[extract]
profile_radii = 16
identity_tol = 0.05
"#;
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("extract", cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert_eq!(r["generations"].as_array().unwrap().len(), 1);
    assert_eq!(r["generations"][0]["degree"], Value::from(1));
    let profile = std::fs::read_to_string(dir.path().join("out/profile_k5.csv")).unwrap();
    assert!(profile.starts_with("t,Q\n"));
    assert_eq!(profile.lines().count(), 17);
    let defect = std::fs::read_to_string(dir.path().join("out/defect.csv")).unwrap();
    assert!(defect.starts_with("k,defect\n"));

    let o = run_config("verify-identity", cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(dir.path());
    assert_eq!(r["identity_holds"], Value::Bool(true));
    assert_eq!(r["lambda_star_in_bounds"], Value::Bool(true));
}

#[test]
fn solve_writes_map_that_degree_reads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "seed = 2\n[grid]\nn = 2\nh = 0.125\n[solver]\np = 2.0\nresidual_tol = 1e-8\n";
    let o = run_config("solve", cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert!(r["residual"].as_f64().unwrap() <= 1e-8);
    assert_eq!(r["monotone"], Value::Bool(true));
    assert!(dir.path().join("out/convergence.csv").exists());

    let map = dir.path().join("out/solution.map");
    let sub = dir.path().join("deg");
    std::fs::create_dir(&sub).unwrap();
    let cfg = format!("[input]\nmap = {:?}\n", map.to_str().unwrap());
    let o = run_config("degree", &cfg, &sub, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    // Random small maps wind trivially.
    assert_eq!(report(&sub)["rows"][0]["degree"], Value::from(0));
}

#[test]
fn neck_constant_data_below_comparator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[grid]\nn = 2\nh = 0.03125\n[solver]\np = 2.0\nresidual_tol = 1e-8\n[neck]\nr1 = 0.25\nr2 = 0.75\na = [1.0, 0.0]\nb = [0.0, 1.0]\n";
    let o = run_config("neck", cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path());
    assert!(r["extension_over_comparator"].as_f64().unwrap() <= 1.05);
    assert!(r["quadrature_relative_error"].as_f64().unwrap() <= 0.02);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: toml::Value = toml::from_str(&text).unwrap();
        let kind = v["experiment"].as_str().unwrap().to_string();
        assert_eq!(path.file_stem().unwrap().to_str().unwrap(), kind);
        seen += 1;
    }
    assert_eq!(seen, 7);
}
