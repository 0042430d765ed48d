//! Experiment configuration: a schema-versioned TOML document describing
//! one coupled instance, the tolerance set, and an ordered experiment list.
//! Unknown keys are rejected everywhere so typos fail at parse time, and
//! every parsed config serializes back to an equivalent document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use aubry_core::{
    AubryOptions, CouplingError, CouplingMatrix, CriticalOptions, FenchelOptions, HamiltonianSpec,
    InstanceError, InstanceOptions, Potential, ScanOptions, SearchOptions, SystemInstance,
};

/// Config documents this build can read.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema version {found}; this build reads version {SCHEMA_VERSION}")]
    SchemaVersion { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("table file {path}: {message}")]
    TableFile { path: String, message: String },
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

/// Top-level config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub instance: InstanceConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub experiments: Vec<Experiment>,
}

/// One coupled system plus its discretization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    /// Torus dimension of the position variable.
    pub dim: usize,
    /// Coupling matrix rows; validated by the matrix constructor.
    pub coupling: Vec<Vec<f64>>,
    /// One Hamiltonian per index.
    pub hamiltonians: Vec<HamiltonianConfig>,
    #[serde(default = "default_x_subdivisions")]
    pub x_subdivisions: usize,
    /// Velocity box half-width; absent means ask the Hamiltonians.
    #[serde(default)]
    pub velocity_bound: Option<f64>,
    #[serde(default = "default_q_subdivisions")]
    pub q_subdivisions: usize,
    #[serde(default = "default_momentum_radius")]
    pub momentum_radius: f64,
    #[serde(default = "default_p_subdivisions")]
    pub p_subdivisions: usize,
    /// Dyadic level of the stopping-time grids: step `2^-level`.
    #[serde(default = "default_grid_level")]
    pub grid_level: u32,
}

fn default_x_subdivisions() -> usize {
    128
}
fn default_q_subdivisions() -> usize {
    48
}
fn default_momentum_radius() -> f64 {
    4.0
}
fn default_p_subdivisions() -> usize {
    128
}
fn default_grid_level() -> u32 {
    6
}

/// Hamiltonian description: inline analytic form, inline table, or a path
/// to a JSON table file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianConfig {
    QuadraticMinusPotential {
        potential: Potential,
    },
    Table {
        x_subdivisions: usize,
        momentum_radius: f64,
        p_subdivisions: usize,
        /// Row-major: position node outer, momentum node inner.
        values: Vec<f64>,
    },
    TableFile {
        path: String,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFilePayload {
    x_subdivisions: usize,
    momentum_radius: f64,
    p_subdivisions: usize,
    values: Vec<f64>,
}

impl HamiltonianConfig {
    /// Turns the config form into a spec the instance builder accepts,
    /// reading referenced files relative to `base`.
    pub fn resolve(&self, base: &Path) -> Result<HamiltonianSpec, ConfigError> {
        match self {
            HamiltonianConfig::QuadraticMinusPotential { potential } => {
                Ok(HamiltonianSpec::QuadraticMinusPotential {
                    potential: potential.clone(),
                })
            }
            HamiltonianConfig::Table {
                x_subdivisions,
                momentum_radius,
                p_subdivisions,
                values,
            } => Ok(HamiltonianSpec::Table {
                x_subdivisions: *x_subdivisions,
                momentum_radius: *momentum_radius,
                p_subdivisions: *p_subdivisions,
                values: values.clone(),
            }),
            HamiltonianConfig::TableFile { path } => {
                let full = base.join(path);
                let text = std::fs::read_to_string(&full).map_err(|source| ConfigError::Io {
                    path: full.display().to_string(),
                    source,
                })?;
                let payload: TableFilePayload =
                    serde_json::from_str(&text).map_err(|e| ConfigError::TableFile {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                Ok(HamiltonianSpec::Table {
                    x_subdivisions: payload.x_subdivisions,
                    momentum_radius: payload.momentum_radius,
                    p_subdivisions: payload.p_subdivisions,
                    values: payload.values,
                })
            }
        }
    }
}

/// Tolerances and budgets shared by the experiments; every field has a
/// documented default so a config may omit the whole table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Infima at or below this count as vanishing in verdicts.
    pub member_tol: f64,
    /// Scan widths above this count as interior room.
    pub interior_tol: f64,
    /// Search objectives below the negative of this count as violations.
    pub violation_tol: f64,
    /// Settled-drift tolerance of the critical-value iteration.
    pub drift_tolerance: f64,
    pub max_sweeps: usize,
    /// Minimum-duration grid steps probed by the verdict margin sweep.
    pub margin_steps: Vec<usize>,
    /// Action evaluations allowed per cycle search.
    pub search_budget: usize,
    /// Use the slim deterministic search family instead of the full one.
    pub reduced_search: bool,
    pub mc_samples: usize,
    pub seed: u64,
    /// Half-width of admissible-offset scans.
    pub scan_radius: f64,
    /// Offsets per scan, including both endpoints.
    pub scan_samples: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            member_tol: 1e-2,
            interior_tol: 5e-2,
            violation_tol: 1e-3,
            drift_tolerance: 1e-3,
            max_sweeps: 200_000,
            margin_steps: vec![2, 4, 8],
            search_budget: 600,
            reduced_search: false,
            mc_samples: 3_000,
            seed: 0x5eed,
            scan_radius: 1.0,
            scan_samples: 21,
        }
    }
}

impl Tolerances {
    pub fn search(&self) -> SearchOptions {
        let base = if self.reduced_search {
            SearchOptions::reduced()
        } else {
            SearchOptions::default()
        };
        SearchOptions {
            violation_tol: self.violation_tol,
            budget: self.search_budget,
            mc_samples: self.mc_samples,
            seed: self.seed,
            ..base
        }
    }

    /// Scans visit many offsets, so they always use the slim family.
    pub fn scan(&self) -> ScanOptions {
        ScanOptions {
            radius: self.scan_radius,
            samples: self.scan_samples,
            search: SearchOptions {
                violation_tol: self.violation_tol,
                seed: self.seed,
                ..SearchOptions::reduced()
            },
            ..ScanOptions::default()
        }
    }

    pub fn aubry(&self) -> AubryOptions {
        AubryOptions {
            member_tol: self.member_tol,
            interior_tol: self.interior_tol,
            margin_steps: self.margin_steps.clone(),
            search: self.search(),
            scan: self.scan(),
        }
    }

    pub fn critical(&self) -> CriticalOptions {
        CriticalOptions {
            drift_tolerance: self.drift_tolerance,
            max_sweeps: self.max_sweeps,
            ..CriticalOptions::default()
        }
    }
}

/// One experiment; executed in the order declared in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Critical level of the system with its convergence diagnostics.
    CriticalValue,
    /// Membership verdicts at the listed anchors, optionally checked
    /// against expected outcomes (`member`, `non_member`, `inconclusive`).
    Verdicts {
        anchors: Vec<Vec<f64>>,
        #[serde(default)]
        expect: Vec<String>,
    },
    /// Characteristic infimum sampled along the first axis.
    InfimumCurve { points: usize },
    /// Admissible-offset scan widths at the listed anchors.
    ScanWidths { anchors: Vec<Vec<f64>> },
    /// Iterated-cycle divergence probe seeded by the given values.
    Divergence {
        anchor: Vec<f64>,
        values: Vec<f64>,
        start: usize,
        delta: f64,
        j_max: usize,
    },
    /// Per-index versus characteristic infima tied through gluing.
    GluedEquivalence { anchor: Vec<f64>, margin_steps: usize },
}

impl Experiment {
    pub fn label(&self) -> String {
        match self {
            Experiment::CriticalValue => "critical_value".into(),
            Experiment::Verdicts { anchors, .. } => {
                format!("verdicts[{}]", anchors.len())
            }
            Experiment::InfimumCurve { points } => format!("infimum_curve[{points}]"),
            Experiment::ScanWidths { anchors } => format!("scan_widths[{}]", anchors.len()),
            Experiment::Divergence { start, delta, .. } => {
                format!("divergence[start={start},delta={delta}]")
            }
            Experiment::GluedEquivalence { anchor, .. } => {
                format!("glued_equivalence[{anchor:?}]")
            }
        }
    }
}

const VERDICT_NAMES: [&str; 3] = ["member", "non_member", "inconclusive"];

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                found: cfg.schema_version,
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks that need no heavy construction: shape agreement
    /// between the coupling, the Hamiltonian list and every experiment, and
    /// existence of referenced files.
    pub fn validate(&self, base: &Path) -> Result<(), ConfigError> {
        let m = self.instance.coupling.len();
        if self.instance.hamiltonians.len() != m {
            return Err(ConfigError::Invalid(format!(
                "{} Hamiltonians for a coupling of {} rows",
                self.instance.hamiltonians.len(),
                m
            )));
        }
        if self.instance.dim == 0 {
            return Err(ConfigError::Invalid("dim must be at least 1".into()));
        }
        for h in &self.instance.hamiltonians {
            if let HamiltonianConfig::TableFile { path } = h {
                let full = base.join(path);
                if !full.is_file() {
                    return Err(ConfigError::Invalid(format!(
                        "referenced table file {} does not exist",
                        full.display()
                    )));
                }
            }
        }
        let anchor_ok = |anchor: &Vec<f64>| -> Result<(), ConfigError> {
            if anchor.len() != self.instance.dim {
                return Err(ConfigError::Invalid(format!(
                    "anchor {anchor:?} has {} coordinates, instance dim is {}",
                    anchor.len(),
                    self.instance.dim
                )));
            }
            Ok(())
        };
        for exp in &self.experiments {
            match exp {
                Experiment::CriticalValue => {}
                Experiment::Verdicts { anchors, expect } => {
                    anchors.iter().try_for_each(&anchor_ok)?;
                    if !expect.is_empty() && expect.len() != anchors.len() {
                        return Err(ConfigError::Invalid(format!(
                            "{} expectations for {} anchors",
                            expect.len(),
                            anchors.len()
                        )));
                    }
                    for e in expect {
                        if !VERDICT_NAMES.contains(&e.as_str()) {
                            return Err(ConfigError::Invalid(format!(
                                "unknown expected verdict {e:?}; use one of {VERDICT_NAMES:?}"
                            )));
                        }
                    }
                }
                Experiment::InfimumCurve { points } => {
                    if *points < 2 {
                        return Err(ConfigError::Invalid(
                            "infimum curve needs at least 2 points".into(),
                        ));
                    }
                }
                Experiment::ScanWidths { anchors } => {
                    anchors.iter().try_for_each(&anchor_ok)?;
                }
                Experiment::Divergence {
                    anchor,
                    values,
                    start,
                    delta,
                    j_max,
                } => {
                    anchor_ok(anchor)?;
                    if values.len() != m {
                        return Err(ConfigError::Invalid(format!(
                            "divergence values have {} entries for {m} indices",
                            values.len()
                        )));
                    }
                    if *start >= m {
                        return Err(ConfigError::Invalid(format!(
                            "divergence start {start} out of range for {m} indices"
                        )));
                    }
                    if !(*delta > 0.0) {
                        return Err(ConfigError::Invalid(
                            "divergence delta must be positive".into(),
                        ));
                    }
                    if *j_max == 0 {
                        return Err(ConfigError::Invalid(
                            "divergence needs at least one iterate".into(),
                        ));
                    }
                }
                Experiment::GluedEquivalence {
                    anchor,
                    margin_steps,
                } => {
                    anchor_ok(anchor)?;
                    if *margin_steps == 0 {
                        return Err(ConfigError::Invalid(
                            "glued equivalence needs a positive margin".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Builds the coupled system, funneling constructor errors out as
    /// config errors so the caller can map them to the config exit code.
    pub fn build_instance(&self, base: &Path) -> Result<SystemInstance, ConfigError> {
        self.validate(base)?;
        let coupling = CouplingMatrix::from_rows(&self.instance.coupling)?;
        let specs: Vec<HamiltonianSpec> = self
            .instance
            .hamiltonians
            .iter()
            .map(|h| h.resolve(base))
            .collect::<Result<_, _>>()?;
        let opts = InstanceOptions {
            x_subdivisions: self.instance.x_subdivisions,
            velocity_bound: self.instance.velocity_bound,
            q_subdivisions: self.instance.q_subdivisions,
            fenchel: FenchelOptions {
                momentum_radius: self.instance.momentum_radius,
                p_subdivisions: self.instance.p_subdivisions,
                ..FenchelOptions::default()
            },
            grid_level: self.instance.grid_level,
            seed: self.tolerances.seed,
            ..InstanceOptions::default()
        };
        Ok(SystemInstance::build(
            coupling,
            &specs,
            self.instance.dim,
            &opts,
        )?)
    }
}
