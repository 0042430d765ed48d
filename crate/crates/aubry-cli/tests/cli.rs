//! End-to-end checks of the binary: exit codes, report persistence, table
//! emission, and config-error reporting.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aubry"))
}

const SMALL_CONFIG: &str = r#"
schema_version = 1

[instance]
dim = 1
coupling = [[1.0, -1.0], [-1.0, 1.0]]
x_subdivisions = 64
q_subdivisions = 32
p_subdivisions = 64

[[instance.hamiltonians]]
kind = "quadratic_minus_potential"

[instance.hamiltonians.potential]
kind = "cosine_sum"
offset = 0.0

[[instance.hamiltonians.potential.terms]]
amplitude = 1.0
frequency = 1
phase = 0.0
axis = 0

[[instance.hamiltonians]]
kind = "quadratic_minus_potential"

[instance.hamiltonians.potential]
kind = "cosine_sum"
offset = 0.0

[[instance.hamiltonians.potential.terms]]
amplitude = 1.0
frequency = 1
phase = 0.0
axis = 0

[tolerances]
reduced_search = true

[[experiments]]
kind = "critical_value"

[[experiments]]
kind = "divergence"
anchor = [0.5]
values = [0.0, -0.5]
start = 0
delta = 0.25
j_max = 5
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_produces_report_and_tables_and_passes_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CONFIG);
    let out_dir = dir.path().join("out");
    let output = bin()
        .args(["run"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--check", "--jobs", "2"])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    let report_path = out_dir.join("report.json");
    assert!(report_path.is_file());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let beta = report["experiments"][0]["outcome"]["data"]["beta"]
        .as_f64()
        .unwrap();
    assert!((beta - 1.0).abs() <= 2e-2, "beta {beta}");
    let divergence_table = out_dir.join("table_01_divergence.csv");
    assert!(divergence_table.is_file());
    let text = std::fs::read_to_string(&divergence_table).unwrap();
    assert!(text.starts_with("j,objective,bound,"));
    assert_eq!(text.lines().count(), 1 + 6, "header plus j = 0..=5");

    // The plots subcommand reproduces the tables from the report alone.
    let plot_dir = dir.path().join("plots");
    let output = bin()
        .args(["plots"])
        .arg(&report_path)
        .arg("--out")
        .arg(&plot_dir)
        .output()
        .unwrap();
    assert!(output.status.success());
    let replotted = plot_dir.join("table_01_divergence.csv");
    assert_eq!(
        std::fs::read_to_string(&replotted).unwrap(),
        text,
        "re-emitted table differs"
    );
}

#[test]
fn seed_override_moves_only_monte_carlo_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CONFIG);
    let mut reports = Vec::new();
    for seed in ["101", "202"] {
        let out_dir = dir.path().join(format!("out_{seed}"));
        let output = bin()
            .args(["run"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_dir)
            .args(["--seed", seed])
            .output()
            .unwrap();
        assert!(output.status.success());
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out_dir.join("report.json")).unwrap(),
        )
        .unwrap();
        reports.push(report);
    }
    let exact = |r: &serde_json::Value| {
        (
            r["experiments"][0]["outcome"]["data"]["beta"].as_f64().unwrap(),
            r["experiments"][1]["outcome"]["data"]["mu"].as_f64().unwrap(),
            r["experiments"][1]["outcome"]["data"]["rows"][3]["objective"]
                .as_f64()
                .unwrap(),
        )
    };
    assert_eq!(exact(&reports[0]), exact(&reports[1]));
    let mc = |r: &serde_json::Value| {
        r["experiments"][1]["outcome"]["data"]["rows"][3]["mc_objective"]
            .as_f64()
            .unwrap()
    };
    assert_ne!(mc(&reports[0]), mc(&reports[1]));
}

#[test]
fn malformed_coupling_exits_one_naming_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let broken = SMALL_CONFIG.replace("[[1.0, -1.0], [-1.0, 1.0]]", "[[1.0, -0.25], [-1.0, 1.0]]");
    let cfg = write_config(dir.path(), &broken);
    let output = bin().args(["run"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("row 0"), "stderr: {stderr}");
}

#[test]
fn unknown_config_keys_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &SMALL_CONFIG.replace("[tolerances]", "[tolerances]\nmember_tollerance = 0.5"),
    );
    let output = bin().args(["run"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("member_tollerance"), "stderr: {stderr}");
}

#[test]
fn verify_reports_invariant_suites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_CONFIG);
    let output = bin().args(["verify"]).arg(&cfg).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    for suite in [
        "config_round_trip",
        "semigroup",
        "fenchel_duality",
        "stopping_consistency",
    ] {
        assert!(
            stdout.contains(&format!("ok   {suite}")),
            "missing {suite} in: {stdout}"
        );
    }
}

#[test]
fn bundled_twowell_config_parses_and_validates() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/twowell.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    let cfg = aubry_cli::config::RunConfig::parse_str(&text).unwrap();
    cfg.validate(path.parent().unwrap()).unwrap();
    assert_eq!(cfg.experiments.len(), 6);
    cfg.build_instance(path.parent().unwrap()).unwrap();
}
