//! Pins the deterministic fields of the bundled two-well run against a
//! committed golden file. Every pinned number comes from exact dynamic
//! programming or the settled value iteration, so drift here means an
//! algorithm change, not noise; the tolerance only absorbs cross-platform
//! differences in the math library.

use std::path::Path;

use aubry_cli::config::RunConfig;
use aubry_cli::report::{ExperimentData, Outcome};
use aubry_cli::run::execute;

const TOL: f64 = 1e-9;

fn close(a: f64, b: f64, what: &str) {
    assert!(
        (a - b).abs() <= TOL,
        "{what}: {a} drifted from pinned {b}"
    );
}

#[test]
fn bundled_two_well_run_matches_the_golden_file() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let config_path = manifest.join("configs/twowell.toml");
    let config = RunConfig::load(&config_path).unwrap();
    let golden: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(manifest.join("tests/golden/twowell_exact.json")).unwrap(),
    )
    .unwrap();

    let report = execute(&config, config_path.parent().unwrap(), None, 1).unwrap();
    assert!(report.all_checks_pass(), "{}", report.to_json());

    let data: Vec<&ExperimentData> = report
        .experiments
        .iter()
        .map(|e| match &e.outcome {
            Outcome::Ok { data } => data,
            Outcome::Failed { error } => panic!("{} failed: {error}", e.label),
        })
        .collect();

    let ExperimentData::CriticalValue { beta, .. } = data[0] else {
        panic!()
    };
    close(*beta, golden["beta"].as_f64().unwrap(), "beta");

    let ExperimentData::Verdicts { rows } = data[1] else {
        panic!()
    };
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(
            row.verdict,
            golden["verdicts"][k].as_str().unwrap(),
            "verdict {k}"
        );
        close(
            row.characteristic_infimum,
            golden["characteristic_infima"][k].as_f64().unwrap(),
            "characteristic infimum",
        );
    }

    let ExperimentData::InfimumCurve { rows } = data[2] else {
        panic!()
    };
    for (k, row) in rows.iter().enumerate() {
        close(row.x, golden["curve"][k][0].as_f64().unwrap(), "curve x");
        close(
            row.infimum,
            golden["curve"][k][1].as_f64().unwrap(),
            "curve infimum",
        );
    }

    let ExperimentData::ScanWidths { rows } = data[3] else {
        panic!()
    };
    for (k, row) in rows.iter().enumerate() {
        close(
            row.width,
            golden["scan_widths"][k].as_f64().unwrap(),
            "scan width",
        );
    }

    let ExperimentData::Divergence { mu, rho, rows, .. } = data[4] else {
        panic!()
    };
    close(*mu, golden["divergence_mu"].as_f64().unwrap(), "mu");
    close(*rho, golden["divergence_rho"].as_f64().unwrap(), "rho");
    for (k, row) in rows.iter().enumerate() {
        close(
            row.objective,
            golden["divergence_objectives"][k].as_f64().unwrap(),
            "divergence objective",
        );
    }

    let ExperimentData::GluedEquivalence {
        glued_characteristic,
        ..
    } = data[5]
    else {
        panic!()
    };
    close(
        *glued_characteristic,
        golden["glued_characteristic"].as_f64().unwrap(),
        "glued characteristic",
    );
}
