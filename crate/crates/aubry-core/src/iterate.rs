//! Iteration of stopping times and cycles by restarting at the stop.
//!
//! The `j`-th iterate of a bounded stopping time accumulates the seed value
//! along successively shifted paths: after stopping, the path is shifted to
//! the stop and the seed is applied again, `j + 1` times in total. Two
//! equivalent recursions exist (append the next leg at the end, or peel the
//! first leg off the front); both are provided so the equivalence itself is
//! checkable path by path.
//!
//! Iterating an adapted cycle replays the cycle template on each leg from
//! the position the previous leg reached. Because every leg either closes
//! exactly or ends with a closure window steering onto the target
//! displacement, iterates of cycles are again cycles; `verify_cycle_property`
//! measures the realized displacement residual on sampled paths.
//!
//! `divergence_experiment` runs the canonical unbounded-iteration probe: a
//! seed that rests at the anchor point, stops immediately off the start
//! index, and holds for a margin `delta` on it. When the seed objective is
//! negative, the iterated objectives must fall at least linearly, with rate
//! controlled by the uniform stopped-mass bound of the margin.

use rayon::prelude::*;
use thiserror::Error;

use crate::action::{
    check_speed, occupation_row_sums, replay_cost, ActionError, ActionEstimate, AdaptedCycle,
    EvalMethod, MeanAccumulator, VelocityRule,
};
use crate::instance::SystemInstance;
use crate::lagrangian::TorusPoint;
use crate::markov::ProbabilityVector;
use crate::path::{JumpPath, PathError, PathSampler};
use crate::stopping::{rho_bound, GridStoppingTime, StopRule, StoppingError};

const MC_WORKERS: u64 = 8;

#[derive(Debug, Error)]
pub enum IterateError {
    #[error("path horizon {horizon} cannot cover the iterated value (needs {needed})")]
    HorizonExceeded { needed: f64, horizon: f64 },
    #[error("seed objective {objective} is not negative; nothing diverges")]
    SeedNotNegative { objective: f64 },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Stopping(#[from] StoppingError),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Value of the `j`-th iterate of `seed` on one path, accumulating legs
/// left to right: each leg applies the seed to the path shifted to the
/// running total.
pub fn iterated_value(
    seed: &GridStoppingTime,
    path: &JumpPath,
    j: usize,
) -> Result<f64, IterateError> {
    let mut t = 0.0;
    for _ in 0..=j {
        if t + seed.max_value() > path.horizon() {
            return Err(IterateError::HorizonExceeded {
                needed: t + seed.max_value(),
                horizon: path.horizon(),
            });
        }
        let leg = if t == 0.0 {
            seed.value(path)
        } else {
            seed.value(&path.shifted(t)?)
        };
        t += leg;
    }
    Ok(t)
}

/// Same value through the front-recursive form: one seed leg, then the
/// `j - 1` iterate of the shifted path.
pub fn iterated_value_front(
    seed: &GridStoppingTime,
    path: &JumpPath,
    j: usize,
) -> Result<f64, IterateError> {
    if seed.max_value() > path.horizon() {
        return Err(IterateError::HorizonExceeded {
            needed: seed.max_value(),
            horizon: path.horizon(),
        });
    }
    let first = seed.value(path);
    if j == 0 {
        return Ok(first);
    }
    let rest = iterated_value_front(seed, &path.shifted(first)?, j - 1)?;
    Ok(first + rest)
}

/// The `j`-th iterate packaged as a stopping time on the same grid. The
/// value is replayed from the whole path, so only sampling evaluators
/// apply; the bound is `j + 1` seed bounds.
pub fn iterated_stopping_time(
    seed: &GridStoppingTime,
    j: usize,
) -> Result<GridStoppingTime, IterateError> {
    if seed.max_value() <= 0.0 {
        return Err(IterateError::BadParameter(
            "seed stopping time is identically zero".into(),
        ));
    }
    let bound = (j as f64 + 1.0) * seed.max_value();
    let inner = seed.clone();
    let time = std::sync::Arc::new(move |path: &JumpPath| {
        // Replay as far as the horizon allows; the wrapper caps the value
        // at the bound anyway.
        let mut t = 0.0;
        for _ in 0..=j {
            if t + inner.max_value() > path.horizon() {
                break;
            }
            let leg = if t == 0.0 {
                inner.value(path)
            } else {
                match path.shifted(t) {
                    Ok(p) => inner.value(&p),
                    Err(_) => break,
                }
            };
            t += leg;
        }
        t
    });
    Ok(GridStoppingTime::new(
        seed.index_count(),
        seed.level(),
        bound,
        StopRule::PathTime(time),
        &[],
    )?)
}

/// Shift times of the composed flow agree with the iterate: shifting by
/// the `j - 1` iterate after shifting by the seed equals shifting by the
/// `j` iterate. Returns the largest grid-history disagreement probability
/// argument; zero means the identity held on every sampled path.
pub fn verify_flow_composition(
    seed: &GridStoppingTime,
    sampler: &mut PathSampler,
    start: &ProbabilityVector,
    j: usize,
    samples: usize,
) -> Result<usize, IterateError> {
    if j == 0 {
        return Ok(0);
    }
    let horizon = (j as f64 + 1.0) * seed.max_value() + 1.0;
    let mut mismatches = 0usize;
    for _ in 0..samples {
        let path = sampler.sample(start, horizon);
        let t0 = seed.value(&path);
        let shifted_once = path.shifted(t0)?;
        let t_rest = iterated_value(seed, &shifted_once, j - 1)?;
        let via_composition = shifted_once.shifted(t_rest)?;
        let t_full = iterated_value(seed, &path, j)?;
        let direct = path.shifted(t_full)?;
        // Compare the remaining index evolution on a grid.
        let step = seed.grid_step();
        let steps = ((via_composition.horizon().min(direct.horizon()) - step) / step) as usize;
        if via_composition.grid_history(step, steps) != direct.grid_history(step, steps) {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Realized displacement residual of the `j`-th iterate of a cycle over
/// sampled paths: each leg is replayed from the endpoint of the previous
/// leg and the final lift is compared against `j + 1` target displacements.
#[derive(Debug, Clone)]
pub struct CyclePropertyReport {
    pub max_residual: f64,
    pub paths: usize,
}

pub fn verify_cycle_property(
    inst: &SystemInstance,
    cycle: &AdaptedCycle,
    j: usize,
    samples: usize,
    seed: u64,
) -> Result<CyclePropertyReport, IterateError> {
    let dim = cycle.dim();
    let horizon = (j as f64 + 1.0) * cycle.duration_bound() + 2.0 * cycle.tau().grid_step();
    let mut sampler = PathSampler::with_stream(inst.coupling().clone(), seed, 0);
    let start = ProbabilityVector::uniform(inst.index_count());
    let mut max_residual = 0.0f64;
    for _ in 0..samples {
        let path = sampler.sample(&start, horizon);
        let mut t = 0.0;
        let mut lift = vec![0.0f64; dim];
        for _ in 0..=j {
            let shifted = if t == 0.0 { path.clone() } else { path.shifted(t)? };
            let (realized, dur) = replay_kinematics(inst, cycle, &shifted)?;
            for d in 0..dim {
                lift[d] += realized[d];
            }
            t += dur;
        }
        let residual = lift
            .iter()
            .zip(cycle.target_lift())
            .map(|(l, w)| (l - (j as f64 + 1.0) * w).abs())
            .fold(0.0f64, f64::max);
        max_residual = max_residual.max(residual);
    }
    Ok(CyclePropertyReport {
        max_residual,
        paths: samples,
    })
}

/// Final lift and duration of one cycle replay, without pricing it.
fn replay_kinematics(
    inst: &SystemInstance,
    cycle: &AdaptedCycle,
    path: &JumpPath,
) -> Result<(Vec<f64>, f64), IterateError> {
    let tau = cycle.tau();
    let dt = tau.grid_step();
    let dim = cycle.dim();
    let bound = inst.velocity_bound();
    let k_stop = tau.stop_step(path);
    let hist = path.grid_history(dt, k_stop);
    let mut lift = vec![0.0f64; dim];
    for k in 0..k_stop {
        let v = cycle.control().velocity(k, &hist, &lift, dim);
        check_speed(&v, bound, k)?;
        for d in 0..dim {
            lift[d] += dt * v[d];
        }
    }
    let mut total = k_stop as f64 * dt + tau.offset_for(path.initial_index());
    let c_steps = cycle.closure_steps();
    if c_steps > 0 {
        let t_c = c_steps as f64 * dt;
        let vc: Vec<f64> = cycle
            .target_lift()
            .iter()
            .zip(&lift)
            .map(|(t, l)| (t - l) / t_c)
            .collect();
        check_speed(&vc, bound, k_stop)?;
        for d in 0..dim {
            lift[d] += vc[d] * t_c;
        }
        total += t_c;
    }
    Ok((lift, total))
}

/// Monte Carlo action of the `j`-th iterate of a cycle: legs replayed from
/// shifted paths, the anchor advancing by the target displacement per leg.
#[allow(clippy::too_many_arguments)]
pub fn iterated_action(
    inst: &SystemInstance,
    x: &TorusPoint,
    start: &ProbabilityVector,
    cycle: &AdaptedCycle,
    j: usize,
    alpha: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<ActionEstimate, IterateError> {
    let m = inst.index_count();
    let dim = cycle.dim();
    let dt = cycle.tau().grid_step();
    let horizon = (j as f64 + 1.0) * cycle.duration_bound() + 2.0 * dt;
    let n = mc_samples.max(1);
    let workers = MC_WORKERS.min(n as u64).max(1);
    struct Chunk {
        acc: MeanAccumulator,
        lag: f64,
        dur: f64,
        counts: Vec<f64>,
    }
    let chunks: Vec<Result<Chunk, IterateError>> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let lo = n as u64 * w / workers;
            let hi = n as u64 * (w + 1) / workers;
            let mut sampler = PathSampler::with_stream(inst.coupling().clone(), seed, w);
            let mut res = Chunk {
                acc: MeanAccumulator::default(),
                lag: 0.0,
                dur: 0.0,
                counts: vec![0.0; m],
            };
            for _ in lo..hi {
                let path = sampler.sample(start, horizon);
                let mut t = 0.0;
                let mut lag = 0.0;
                let mut lift = vec![0.0f64; dim];
                for _ in 0..=j {
                    let shifted = if t == 0.0 { path.clone() } else { path.shifted(t)? };
                    let anchor = x.translate(&lift);
                    let (l, d, _) = replay_cost(inst, &anchor, cycle, &shifted)?;
                    lag += l;
                    t += d;
                    for dcoord in 0..dim {
                        lift[dcoord] += cycle.target_lift()[dcoord];
                    }
                }
                res.acc.push(lag + alpha * t);
                res.lag += lag;
                res.dur += t;
                res.counts[path.index_at(t)] += 1.0;
            }
            Ok(res)
        })
        .collect();
    let mut acc = MeanAccumulator::default();
    let mut lag = 0.0;
    let mut dur = 0.0;
    let mut counts = vec![0.0f64; m];
    for c in chunks {
        let c = c?;
        acc.merge(&c.acc);
        lag += c.lag;
        dur += c.dur;
        for i in 0..m {
            counts[i] += c.counts[i];
        }
    }
    let nf = acc.count() as f64;
    Ok(ActionEstimate {
        value: acc.mean(),
        std_error: acc.std_error(),
        method: EvalMethod::MonteCarlo {
            samples: acc.count(),
            seed,
        },
        lagrangian_part: lag / nf,
        expected_duration: dur / nf,
        final_index_law: ProbabilityVector::new(counts.iter().map(|c| c / nf).collect())
            .expect("empirical frequencies"),
    })
}

/// One row of the divergence table: the `j`-th iterated objective, its
/// linear bound, and the Monte Carlo cross-check.
#[derive(Debug, Clone)]
pub struct DivergenceRow {
    pub j: usize,
    /// Exact iterated objective.
    pub objective: f64,
    /// Linear decay bound `-mu (1 + rho j)` the objective must stay below.
    pub bound: f64,
    pub expected_duration: f64,
    pub mc_objective: f64,
    pub mc_std_error: f64,
}

/// Exact and sampled objectives of the canonical divergence probe.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    /// Negated seed objective; positive by the entry check.
    pub mu: f64,
    /// Uniform stopped-mass lower bound of the margin `delta`.
    pub rho: f64,
    pub rows: Vec<DivergenceRow>,
    /// Whether every row satisfied its bound (up to Monte Carlo noise the
    /// exact column is authoritative).
    pub bounds_hold: bool,
}

#[derive(Debug, Clone)]
pub struct DivergenceOptions {
    pub mc_samples: usize,
    pub seed: u64,
    /// Slack added to the linear bound before declaring a failure.
    pub bound_tol: f64,
}

impl Default for DivergenceOptions {
    fn default() -> Self {
        DivergenceOptions {
            mc_samples: 20_000,
            seed: 0x5eed,
            bound_tol: 1e-9,
        }
    }
}

/// The canonical seed behind the divergence probe: rest at the anchor,
/// stop immediately, and hold for `delta` only when started from `start`.
pub fn canonical_divergence_seed(
    inst: &SystemInstance,
    start: usize,
    delta: f64,
) -> Result<AdaptedCycle, IterateError> {
    let m = inst.index_count();
    if start >= m {
        return Err(IterateError::BadParameter(format!(
            "start index {start} out of range 0..{m}"
        )));
    }
    let mut offsets = vec![0.0; m];
    offsets[start] = delta;
    let tau = GridStoppingTime::new(
        m,
        inst.grid_level(),
        inst.grid_step(),
        StopRule::AtStep(0),
        &offsets,
    )?;
    Ok(AdaptedCycle::new(
        tau,
        VelocityRule::Zero,
        0,
        &vec![0i64; inst.dim()],
    )?)
}

/// Runs the divergence probe at `y` with per-index values `values`:
/// the seed rests at `y`, holds `delta` on the start index and nothing
/// elsewhere, and its objective from `start` must be negative. The
/// iterated objectives are then computed exactly through the index-law
/// recursion, cross-checked by Monte Carlo replay, and compared against
/// the linear decay bound.
#[allow(clippy::too_many_arguments)]
pub fn divergence_experiment(
    inst: &SystemInstance,
    y: &TorusPoint,
    values: &[f64],
    start: usize,
    delta: f64,
    alpha: f64,
    j_max: usize,
    opts: &DivergenceOptions,
) -> Result<DivergenceReport, IterateError> {
    let m = inst.index_count();
    if values.len() != m {
        return Err(IterateError::BadParameter(format!(
            "{} values for {m} indices",
            values.len()
        )));
    }
    if !(delta > 0.0) {
        return Err(IterateError::BadParameter(format!("margin {delta}")));
    }
    let seed_cycle = canonical_divergence_seed(inst, start, delta)?;
    let a = inst.coupling();
    let rho = rho_bound(a, delta);

    // Per-index resting cost at y over one margin window, plus the alpha
    // charge: only legs that start on `start` accrue anything.
    let rest_weights: Vec<f64> = (0..m)
        .map(|l| inst.lagrangian(l, y.coords(), &vec![0.0; inst.dim()]))
        .collect();
    let occ_rows = occupation_row_sums(a, &rest_weights, delta);
    let leg_cost = occ_rows[start] + alpha * delta;
    let hold = a.semigroup(delta);

    // Index-law recursion: mass on `start` evolves one margin window, mass
    // elsewhere stalls with zero-length legs.
    let mut law = vec![0.0f64; m];
    law[start] = 1.0;
    let mut lag = 0.0f64;
    let mut dur = 0.0f64;
    let mut exact: Vec<(f64, f64)> = Vec::with_capacity(j_max + 1);
    for _ in 0..=j_max {
        let p = law[start];
        lag += p * leg_cost;
        dur += p * delta;
        let mut next: Vec<f64> = law.clone();
        next[start] = 0.0;
        for jdx in 0..m {
            next[jdx] += p * hold.entry(start, jdx);
        }
        law = next;
        let harvest: f64 = law
            .iter()
            .enumerate()
            .map(|(k, q)| q * (values[k] - values[start]))
            .sum();
        exact.push((lag + harvest, dur));
    }

    // Values within the bound tolerance of zero carry no usable margin.
    let objective_0 = exact[0].0;
    if objective_0 >= -opts.bound_tol {
        return Err(IterateError::SeedNotNegative {
            objective: objective_0,
        });
    }
    let mu = -objective_0;

    // Monte Carlo cross-check by replaying the iterated seed cycle on
    // sampled paths through the shared cycle evaluator.
    let mc = divergence_monte_carlo(inst, y, values, start, &seed_cycle, delta, alpha, j_max, opts)?;

    let mut rows = Vec::with_capacity(j_max + 1);
    let mut bounds_hold = true;
    for (j, ((obj, d), (mc_obj, mc_se))) in exact.iter().zip(mc.iter()).enumerate() {
        let bound = -mu * (1.0 + rho * j as f64);
        if *obj > bound + opts.bound_tol {
            bounds_hold = false;
        }
        rows.push(DivergenceRow {
            j,
            objective: *obj,
            bound,
            expected_duration: *d,
            mc_objective: *mc_obj,
            mc_std_error: *mc_se,
        });
    }
    Ok(DivergenceReport {
        mu,
        rho,
        rows,
        bounds_hold,
    })
}

/// Sampled iterated objectives `(mean, std error)` for `j = 0..=j_max`,
/// replaying the canonical seed cycle leg by leg on shifted paths.
#[allow(clippy::too_many_arguments)]
fn divergence_monte_carlo(
    inst: &SystemInstance,
    y: &TorusPoint,
    values: &[f64],
    start: usize,
    seed_cycle: &AdaptedCycle,
    delta: f64,
    alpha: f64,
    j_max: usize,
    opts: &DivergenceOptions,
) -> Result<Vec<(f64, f64)>, IterateError> {
    let a = inst.coupling();
    let m = a.index_count();
    let horizon = (j_max as f64 + 1.0) * delta + 1.0;
    let n = opts.mc_samples.max(1);
    let workers = MC_WORKERS.min(n as u64).max(1);
    let chunks: Vec<Result<Vec<MeanAccumulator>, IterateError>> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let lo = n as u64 * w / workers;
            let hi = n as u64 * (w + 1) / workers;
            let mut sampler = PathSampler::with_stream(a.clone(), opts.seed, w);
            let start_law = ProbabilityVector::unit(start, m);
            let mut accs = vec![MeanAccumulator::default(); j_max + 1];
            for _ in lo..hi {
                let path = sampler.sample(&start_law, horizon);
                let mut t = 0.0f64;
                let mut cost = 0.0f64;
                for acc in accs.iter_mut() {
                    // One leg: the margin window off the current index;
                    // zero-length whenever the index already left `start`.
                    let shifted = if t == 0.0 { path.clone() } else { path.shifted(t)? };
                    let (lag, dur, _) = replay_cost(inst, y, seed_cycle, &shifted)?;
                    cost += lag + alpha * dur;
                    t += dur;
                    acc.push(cost + values[path.index_at(t)] - values[start]);
                }
            }
            Ok(accs)
        })
        .collect();
    let mut merged = vec![MeanAccumulator::default(); j_max + 1];
    for c in chunks {
        for (m, c) in merged.iter_mut().zip(c?.iter()) {
            m.merge(c);
        }
    }
    Ok(merged
        .iter()
        .map(|acc| (acc.mean(), acc.std_error()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{InstanceOptions, SystemInstance};
    use crate::lagrangian::FenchelOptions;
    use crate::markov::CouplingMatrix;
    use std::sync::OnceLock;

    fn test_instance() -> &'static SystemInstance {
        static INST: OnceLock<SystemInstance> = OnceLock::new();
        INST.get_or_init(|| {
            let opts = InstanceOptions {
                x_subdivisions: 128,
                velocity_bound: Some(3.0),
                q_subdivisions: 48,
                fenchel: FenchelOptions {
                    momentum_radius: 4.0,
                    p_subdivisions: 128,
                    max_expansions: 3,
                },
                ..InstanceOptions::default()
            };
            SystemInstance::two_index_cosine_well(&opts).unwrap()
        })
    }

    fn two_state() -> CouplingMatrix {
        CouplingMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap()
    }

    fn hitting_seed(m: usize) -> GridStoppingTime {
        GridStoppingTime::new(
            m,
            4,
            1.0,
            StopRule::FirstHit {
                target: 1,
                min_steps: 1,
            },
            &[0.25, 0.125],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_seed_iterates_additively() {
        let seed = GridStoppingTime::new(2, 4, 0.5, StopRule::AtStep(8), &[]).unwrap();
        let mut sampler = PathSampler::new(two_state(), 5);
        let start = ProbabilityVector::uniform(2);
        for _ in 0..100 {
            let path = sampler.sample(&start, 6.0);
            for j in [0usize, 1, 3, 7] {
                let v = iterated_value(&seed, &path, j).unwrap();
                assert_eq!(v, (j as f64 + 1.0) * 0.5);
            }
        }
    }

    #[test]
    fn zeroth_iterate_is_the_seed() {
        let seed = hitting_seed(2);
        let mut sampler = PathSampler::new(two_state(), 6);
        let start = ProbabilityVector::uniform(2);
        for _ in 0..200 {
            let path = sampler.sample(&start, 3.0);
            assert_eq!(iterated_value(&seed, &path, 0).unwrap(), seed.value(&path));
        }
    }

    #[test]
    fn both_recursions_agree_path_by_path() {
        let seed = hitting_seed(2);
        let mut sampler = PathSampler::new(two_state(), 7);
        let start = ProbabilityVector::uniform(2);
        for _ in 0..2_000 {
            let path = sampler.sample(&start, 10.0);
            for j in 0..=5usize {
                let right = iterated_value(&seed, &path, j).unwrap();
                let front = iterated_value_front(&seed, &path, j).unwrap();
                assert!(
                    (right - front).abs() < 1e-12,
                    "j {j}: {right} vs {front}"
                );
            }
        }
    }

    #[test]
    fn iterated_wrapper_matches_direct_replay() {
        let seed = hitting_seed(2);
        let tau3 = iterated_stopping_time(&seed, 3).unwrap();
        let mut sampler = PathSampler::new(two_state(), 8);
        let start = ProbabilityVector::uniform(2);
        for _ in 0..300 {
            let path = sampler.sample(&start, tau3.max_value() + 1.0);
            let direct = iterated_value(&seed, &path, 3).unwrap();
            assert!((tau3.value(&path) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_composition_matches_the_iterate() {
        let seed = hitting_seed(2);
        let mut sampler = PathSampler::new(two_state(), 9);
        let start = ProbabilityVector::uniform(2);
        for j in [1usize, 2, 4] {
            let mismatches =
                verify_flow_composition(&seed, &mut sampler, &start, j, 300).unwrap();
            assert_eq!(mismatches, 0, "j = {j}");
        }
    }

    #[test]
    fn resting_cycle_iterates_with_zero_residual() {
        let inst = test_instance();
        let tau = GridStoppingTime::new(
            2,
            inst.grid_level(),
            0.25,
            StopRule::AtStep(16),
            &[],
        )
        .unwrap();
        let cycle = AdaptedCycle::new(tau, VelocityRule::Zero, 0, &[0]).unwrap();
        let report = verify_cycle_property(inst, &cycle, 5, 200, 3).unwrap();
        assert_eq!(report.max_residual, 0.0);
    }

    #[test]
    fn feedback_cycle_iterates_within_float_dust() {
        let inst = test_instance();
        let m = 2;
        let tau = GridStoppingTime::new(
            m,
            inst.grid_level(),
            0.25,
            StopRule::AtStep(16),
            &[],
        )
        .unwrap();
        let rows = vec![vec![1.0], vec![-0.5]];
        let cycle = AdaptedCycle::new(tau, VelocityRule::IndexFeedback(rows), 16, &[0]).unwrap();
        let report = verify_cycle_property(inst, &cycle, 5, 200, 4).unwrap();
        assert!(
            report.max_residual <= 1e-10,
            "residual {}",
            report.max_residual
        );
    }

    #[test]
    fn iterated_resting_action_scales_linearly() {
        // Resting at the well is exactly free at the critical level, so
        // every iterate of the resting cycle still prices to zero; at
        // other levels the price is linear in the accumulated duration.
        let inst = test_instance();
        let x = TorusPoint::from_lift(&[0.5]);
        let tau = GridStoppingTime::new(
            2,
            inst.grid_level(),
            0.25,
            StopRule::AtStep(16),
            &[],
        )
        .unwrap();
        let cycle = AdaptedCycle::new(tau, VelocityRule::Zero, 0, &[0]).unwrap();
        let start = ProbabilityVector::unit(0, 2);
        for (j, alpha) in [(0usize, 1.0), (3, 1.0), (3, 0.8)] {
            let est =
                iterated_action(inst, &x, &start, &cycle, j, alpha, 500, 11).unwrap();
            let t = (j as f64 + 1.0) * 0.25;
            // The integrand is deterministic, so the sample spread is zero
            // and the mean is exact up to interpolation error at the node.
            assert!(
                (est.value - (alpha - 1.0) * t).abs() < 1e-9,
                "j {j} alpha {alpha}: {}",
                est.value
            );
            assert!(est.std_error < 1e-12);
        }
    }

    #[test]
    fn divergence_witness_decays_linearly() {
        let inst = test_instance();
        let y = TorusPoint::from_lift(&[0.5]);
        let delta = 0.25;
        let report = divergence_experiment(
            inst,
            &y,
            &[0.0, 0.5],
            1,
            delta,
            1.0,
            10,
            &DivergenceOptions::default(),
        )
        .unwrap();
        // Seed objective: resting is free at the well, the harvest moves
        // half the hold window's index-1 mass onto the cheaper value.
        let expected_mu = 0.25 * (1.0 - (-2.0 * delta).exp());
        assert!(
            (report.mu - expected_mu).abs() < 1e-9,
            "mu {} want {expected_mu}",
            report.mu
        );
        assert!((report.rho - inst.coupling().semigroup(delta).min_entry()).abs() < 1e-12);
        assert!(report.bounds_hold);
        for row in &report.rows {
            // Exact column inside the linear envelope with real slack.
            assert!(
                row.objective <= row.bound + 1e-9,
                "j {}: {} vs bound {}",
                row.j,
                row.objective,
                row.bound
            );
            // Monte Carlo agrees with the exact recursion.
            assert!(
                (row.mc_objective - row.objective).abs() <= 3.0 * row.mc_std_error + 1e-9,
                "j {}: mc {} exact {} se {}",
                row.j,
                row.mc_objective,
                row.objective,
                row.mc_std_error
            );
        }
        // Strict monotone decay along j.
        for w in report.rows.windows(2) {
            assert!(w[1].objective < w[0].objective);
        }
    }

    #[test]
    fn divergence_is_invariant_under_value_shifts() {
        let inst = test_instance();
        let y = TorusPoint::from_lift(&[0.5]);
        let opts = DivergenceOptions {
            mc_samples: 10,
            ..DivergenceOptions::default()
        };
        let r1 = divergence_experiment(inst, &y, &[0.0, 0.5], 1, 0.25, 1.0, 6, &opts).unwrap();
        let r2 = divergence_experiment(inst, &y, &[7.0, 7.5], 1, 0.25, 1.0, 6, &opts).unwrap();
        for (a, b) in r1.rows.iter().zip(r2.rows.iter()) {
            assert!((a.objective - b.objective).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_values_reject_the_divergence_probe() {
        let inst = test_instance();
        let y = TorusPoint::from_lift(&[0.5]);
        let err = divergence_experiment(
            inst,
            &y,
            &[0.2, 0.2],
            1,
            0.25,
            1.0,
            4,
            &DivergenceOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IterateError::SeedNotNegative { .. }));
    }
}
