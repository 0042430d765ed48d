//! Numerical toolkit for weakly coupled Hamilton-Jacobi systems on the flat
//! torus, organized around the random frame of the problem: the coupling
//! matrix generates a continuous-time jump process on the index set, and
//! subsolution / Aubry-set questions become statements about random action
//! functionals evaluated over adapted cycles of that process.
//!
//! Layering, bottom to top:
//!
//! * [`linalg`]: dense matrix exponential and linear solves for small matrices.
//! * [`markov`]: coupling matrices, stochastic semigroups `e^{-At}`, Perron
//!   vectors, occupation integrals.
//! * [`path`]: cadlag jump paths, cylinder sets, seedable path sampling.
//! * [`stopping`]: bounded stopping times on dyadic grids, dyadic
//!   approximation, stopped-index matrices `e^{-A tau}`, characteristic
//!   vectors, shift-pushforward checks.
//! * [`lagrangian`]: Hamiltonians on the torus, Fenchel transforms to
//!   Lagrangian tables, piecewise-constant control integration.
//! * [`action`]: adapted cycles, random action functionals (exact
//!   dynamic-programming and Monte Carlo evaluators), subsolution and
//!   admissibility tests.
//! * [`iterate`]: cycle concatenation along the shift flow and action
//!   divergence experiments.
//! * [`aubry`]: critical values, per-index and characteristic cycle infima,
//!   Aubry membership verdicts, admissible-offset scans.
//! * [`instance`]: a fully resolved problem instance (coupling + Lagrangian
//!   tables + discretization parameters) shared by the upper layers.
//!
//! Index sets are `0..m` throughout; the state space of positions is the flat
//! torus `[0,1)^N` with `N` small.

pub mod action;
pub mod aubry;
pub mod instance;
pub mod iterate;
pub mod lagrangian;
pub mod linalg;
pub mod markov;
pub mod path;
pub mod stopping;

pub use action::{
    action, admissibility_test, characteristic_admissibility_test, characteristic_objective,
    per_start_infima, subsolution_test, ActionError, ActionEstimate, ActionOptions, AdaptedCycle,
    AdmissibilityVerdict, EvalMethod, PerStartInfima, SearchOptions, SubsolutionReport,
    VelocityFn, VelocityRule,
};
pub use aubry::{
    admissible_scan, aubry_verdict, characteristic_infimum, characteristic_infimum_curve,
    critical_value, glue_stopping_times, glued_action_values, infimum_equivalence,
    per_index_infimum, AubryError, AubryOptions, AubryReport, AubryVerdict, CriticalOptions,
    CriticalValue, EquivalenceReport, InfimumEstimate, ScanOptions, ScanReport, SubsolutionGrid,
};
pub use instance::{InstanceError, InstanceOptions, SystemInstance};
pub use iterate::{
    canonical_divergence_seed, divergence_experiment, iterated_action, iterated_stopping_time,
    iterated_value, iterated_value_front, verify_cycle_property, verify_flow_composition,
    CyclePropertyReport, DivergenceOptions, DivergenceReport, DivergenceRow, IterateError,
};
pub use lagrangian::{
    integrate_control, BoxGrid, FenchelOptions, HamiltonianSpec, LagrangianError, LagrangianTable,
    Potential, TorusGrid, TorusPoint,
};
pub use markov::{
    perron_vector, CouplingError, CouplingMatrix, PerronVector, ProbabilityVector,
    StochasticMatrix,
};
pub use path::{cylinder_probability, Cylinder, JumpPath, PathError, PathSampler};
pub use stopping::{
    characteristic_vector, dyadic_approximation, rho_bound, stopping_matrix,
    verify_shift_pushforward, GridStoppingTime, StopRule, StoppingError, StoppingMatrix,
    StoppingMethod, StoppingOptions,
};
