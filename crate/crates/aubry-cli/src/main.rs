//! Command-line front end: `run` executes a config and persists the report
//! and CSV tables, `verify` runs fast structural invariant suites against a
//! config, and `plots` re-emits tables from a persisted report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use aubry_cli::config::RunConfig;
use aubry_cli::report::{emit_tables, RunReport};
use aubry_cli::run::execute;
use aubry_core::{
    characteristic_vector, stopping_matrix, GridStoppingTime, StopRule, StoppingOptions,
    SystemInstance,
};

/// Numerical experiments on weakly coupled Hamilton-Jacobi systems.
#[derive(Parser)]
#[command(name = "aubry", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments declared in a config; write report and tables.
    Run {
        config: PathBuf,
        /// Output directory; defaults to $AUBRY_OUT, then to a sibling of
        /// the config named after it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the config seed before running.
        #[arg(long)]
        seed: Option<u64>,
        /// Exit with code 2 when any experiment fails its built-in checks.
        #[arg(long)]
        check: bool,
        /// Worker threads for sampling; defaults to the core count.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Validate a config and run fast invariant suites on its instance.
    Verify { config: PathBuf },
    /// Re-emit CSV tables from a persisted JSON report.
    Plots {
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            check,
            jobs,
        } => run_cmd(&config, out, seed, check, jobs),
        Command::Verify { config } => verify_cmd(&config),
        Command::Plots { report, out } => plots_cmd(&report, out),
    }
}

fn default_out_dir(for_file: &Path, suffix: &str) -> PathBuf {
    if let Some(dir) = std::env::var_os("AUBRY_OUT") {
        return PathBuf::from(dir);
    }
    let stem = for_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "aubry".into());
    for_file
        .parent()
        .unwrap_or(Path::new("."))
        .join(format!("{stem}_{suffix}"))
}

fn run_cmd(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    check: bool,
    jobs: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let config = RunConfig::load(config_path)
        .with_context(|| format!("loading {}", config_path.display()))?;
    if let Some(n) = jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not resize the worker pool: {e}");
        }
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let report = execute(
        &config,
        base,
        seed,
        jobs.unwrap_or_else(rayon::current_num_threads),
    )?;

    let dir = out.unwrap_or_else(|| default_out_dir(config_path, "out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let report_path = dir.join("report.json");
    std::fs::write(&report_path, report.to_json())
        .with_context(|| format!("writing {}", report_path.display()))?;
    let tables = emit_tables(&report, &dir).context("writing tables")?;

    for exp in &report.experiments {
        let status = match &exp.outcome {
            aubry_cli::report::Outcome::Ok { data } => {
                if data.check_ok() {
                    "ok".to_string()
                } else {
                    "check failed".to_string()
                }
            }
            aubry_cli::report::Outcome::Failed { error } => format!("FAILED: {error}"),
        };
        println!("{:<28} {:>7.2}s  {status}", exp.label, exp.seconds);
    }
    println!("report: {}", report_path.display());
    for t in &tables {
        println!("table:  {}", t.display());
    }
    if check && !report.all_checks_pass() {
        eprintln!("one or more checks failed");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn plots_cmd(report_path: &Path, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let report = RunReport::load(report_path)
        .with_context(|| format!("loading {}", report_path.display()))?;
    let dir = out.unwrap_or_else(|| default_out_dir(report_path, "tables"));
    let tables = emit_tables(&report, &dir).context("writing tables")?;
    for t in &tables {
        println!("table: {}", t.display());
    }
    Ok(ExitCode::SUCCESS)
}

type SuiteResult = Result<String, String>;

fn suite_round_trip(config: &RunConfig) -> SuiteResult {
    let text = config.to_toml();
    match RunConfig::parse_str(&text) {
        Ok(again) if again == *config => Ok("serialize-parse identity holds".into()),
        Ok(_) => Err("round-tripped config differs".into()),
        Err(e) => Err(format!("round-tripped config fails to parse: {e}")),
    }
}

fn suite_semigroup(inst: &SystemInstance) -> SuiteResult {
    let a = inst.coupling();
    let m = a.index_count();
    let mut worst_law: f64 = 0.0;
    let mut min_entry = f64::INFINITY;
    for &t in &[0.25, 0.5, 1.0] {
        let whole = a.semigroup(t);
        let half = a.semigroup(t / 2.0);
        min_entry = min_entry.min(whole.min_entry());
        for i in 0..m {
            for j in 0..m {
                let mut composed = 0.0;
                for k in 0..m {
                    composed += half.entry(i, k) * half.entry(k, j);
                }
                worst_law = worst_law.max((composed - whole.entry(i, j)).abs());
            }
        }
    }
    if min_entry <= 0.0 {
        return Err(format!("semigroup entry {min_entry} not positive"));
    }
    if worst_law > 1e-9 {
        return Err(format!("semigroup law residual {worst_law:.2e} > 1e-9"));
    }
    Ok(format!(
        "stochastic, positive, law residual {worst_law:.2e}"
    ))
}

fn suite_fenchel(inst: &SystemInstance) -> SuiteResult {
    let dim = inst.dim();
    let vmax = inst.velocity_bound();
    let mut worst: f64 = f64::INFINITY;
    for i in 0..inst.index_count() {
        let h = inst.hamiltonian(i);
        for &x0 in &[0.0, 0.3, 0.7] {
            let x = vec![x0; dim];
            for &p0 in &[-1.0, 0.0, 1.5] {
                let p = vec![p0; dim];
                let hv = h.eval(&x, &p);
                for k in 0..5 {
                    let q0 = -0.8 * vmax + 0.4 * vmax * k as f64;
                    let q = vec![q0; dim];
                    let l = inst.lagrangian(i, &x, &q);
                    let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
                    worst = worst.min(l + hv - pq);
                }
            }
        }
    }
    if worst < -1e-6 {
        return Err(format!("duality gap {worst:.2e} below -1e-6"));
    }
    Ok(format!("smallest duality slack {worst:.2e}"))
}

fn suite_stopping(inst: &SystemInstance) -> SuiteResult {
    let a = inst.coupling();
    let m = a.index_count();
    let level = inst.grid_level();
    let t = 0.25;
    let steps = (t / inst.grid_step()).round() as usize;
    if steps == 0 {
        return Err("grid too coarse for the deterministic stopping probe".into());
    }
    let tau = GridStoppingTime::new(m, level, t, StopRule::AtStep(steps), &[])
        .map_err(|e| e.to_string())?;
    let sm = stopping_matrix(a, &tau, &StoppingOptions::default());
    let direct = a.semigroup(steps as f64 * inst.grid_step());
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            worst = worst.max((sm.matrix.entry(i, j) - direct.entry(i, j)).abs());
        }
    }
    if worst > 1e-9 {
        return Err(format!(
            "stopped matrix differs from the semigroup by {worst:.2e}"
        ));
    }
    let pv = characteristic_vector(&sm);
    let aw = pv.vector.as_slice();
    let mut residual: f64 = 0.0;
    for j in 0..m {
        let mut prod = 0.0;
        for (i, &ai) in aw.iter().enumerate() {
            prod += ai * sm.matrix.entry(i, j);
        }
        residual = residual.max((prod - aw[j]).abs());
    }
    if residual > 1e-10 {
        return Err(format!("characteristic residual {residual:.2e} > 1e-10"));
    }
    Ok(format!(
        "deterministic stop matches the semigroup ({worst:.1e}), characteristic residual {residual:.1e}"
    ))
}

fn verify_cmd(config_path: &Path) -> anyhow::Result<ExitCode> {
    let config = RunConfig::load(config_path)
        .with_context(|| format!("loading {}", config_path.display()))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let inst = config.build_instance(base)?;

    let suites: Vec<(&str, SuiteResult)> = vec![
        ("config_round_trip", suite_round_trip(&config)),
        ("semigroup", suite_semigroup(&inst)),
        ("fenchel_duality", suite_fenchel(&inst)),
        ("stopping_consistency", suite_stopping(&inst)),
    ];
    let mut failed = false;
    for (name, result) in suites {
        match result {
            Ok(detail) => println!("ok   {name}: {detail}"),
            Err(detail) => {
                failed = true;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
