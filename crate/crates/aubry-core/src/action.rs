//! Expected action of controlled trajectories run until grid stopping
//! times, and the value tests built on top of it.
//!
//! An adapted cycle bundles a bounded grid stopping time, a control rule
//! that picks a velocity for each grid step from the observed index
//! history, and a closure window appended after the stop that steers the
//! position to a prescribed total displacement at bounded speed. Its
//! expected action from a torus point `x` under an initial index law is
//!
//! `E[ int_0^T L_{omega(s)}(x + X(s), -v(s)) ds + alpha T ]`
//!
//! where `X` integrates the control (the position moves with `+v`, the
//! integrand reads the reversed velocity), `T` is the stop value extended
//! by the per-index offset and the closure window, and `L` interpolates the
//! per-index Lagrangian tables of the instance.
//!
//! Three evaluators cover the control classes:
//! - deterministic controls with automaton stop rules: exact dynamic
//!   programming over `(rule state, index)` mass with per-step occupation
//!   integrals, the position path being a single shared polyline;
//! - index-dependent controls on short horizons: exact enumeration of grid
//!   index histories;
//! - everything else: Monte Carlo over sampled jump paths with per-stream
//!   deterministic seeding.
//!
//! The membership tests ride on the evaluator: `subsolution_test` probes
//! the chain inequality for a candidate family of cycles, and
//! `admissibility_test` searches cycles anchored at one point for a
//! negative combined objective.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::instance::SystemInstance;
use crate::lagrangian::TorusPoint;
use crate::markov::{CouplingMatrix, ProbabilityVector, StochasticMatrix};
use crate::path::{JumpPath, PathSampler};
use crate::stopping::{
    characteristic_vector, stopping_matrix, GridStoppingTime, StopRule, StoppingError,
    StoppingOptions,
};

/// Slack below the velocity bound treated as exact-arithmetic dust.
const SPEED_TOL: f64 = 1e-9;
/// Largest displacement residual a cycle without a closure window may leave.
const CLOSURE_TOL: f64 = 1e-9;
/// Fixed Monte Carlo stream count, so results do not depend on the thread
/// pool shape.
const MC_WORKERS: u64 = 8;

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("control speed {speed} at step {step} exceeds the velocity bound {bound}")]
    SentinelVelocity { step: usize, speed: f64, bound: f64 },
    #[error("cycle leaves displacement residual {residual} and has no closure window")]
    NotClosable { residual: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Stopping(#[from] StoppingError),
}

/// Velocity as a function of the step, the observed index history up to the
/// current grid time, and the accumulated position lift.
pub type VelocityFn = Arc<dyn Fn(usize, &[usize], &[f64]) -> Vec<f64> + Send + Sync>;

/// Control rule consulted once per grid step; the chosen velocity is held
/// constant over the step.
#[derive(Clone)]
pub enum VelocityRule {
    /// Rest everywhere.
    Zero,
    /// One fixed velocity.
    Constant(Vec<f64>),
    /// A velocity per step; the last entry repeats past the end.
    PerStep(Vec<Vec<f64>>),
    /// Velocity selected by the index observed at the start of the step.
    IndexFeedback(Vec<Vec<f64>>),
    /// Arbitrary function of `(step, index history, position lift)`.
    GridFn(VelocityFn),
}

impl std::fmt::Debug for VelocityRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VelocityRule::Zero => write!(f, "Zero"),
            VelocityRule::Constant(v) => write!(f, "Constant({v:?})"),
            VelocityRule::PerStep(v) => write!(f, "PerStep({} steps)", v.len()),
            VelocityRule::IndexFeedback(rows) => write!(f, "IndexFeedback({rows:?})"),
            VelocityRule::GridFn(_) => write!(f, "GridFn(..)"),
        }
    }
}

impl VelocityRule {
    /// Whether the velocity ignores the index history, so that the position
    /// path is one deterministic polyline.
    pub fn is_deterministic(&self) -> bool {
        matches!(
            self,
            VelocityRule::Zero | VelocityRule::Constant(_) | VelocityRule::PerStep(_)
        )
    }

    /// Velocity for one step. `history[k]` must hold the index observed at
    /// grid time `k` for the index-dependent variants.
    pub fn velocity(&self, step: usize, history: &[usize], lift: &[f64], dim: usize) -> Vec<f64> {
        match self {
            VelocityRule::Zero => vec![0.0; dim],
            VelocityRule::Constant(v) => v.clone(),
            VelocityRule::PerStep(seq) => seq[step.min(seq.len() - 1)].clone(),
            VelocityRule::IndexFeedback(rows) => rows[history[step]].clone(),
            VelocityRule::GridFn(f) => f(step, history, lift),
        }
    }

    fn validate(&self, dim: usize, m: usize) -> Result<(), ActionError> {
        let check_vec = |v: &[f64]| -> Result<(), ActionError> {
            if v.len() != dim {
                return Err(ActionError::Shape(format!(
                    "velocity has {} coordinates, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(ActionError::BadParameter("non-finite velocity".into()));
            }
            Ok(())
        };
        match self {
            VelocityRule::Zero | VelocityRule::GridFn(_) => Ok(()),
            VelocityRule::Constant(v) => check_vec(v),
            VelocityRule::PerStep(seq) => {
                if seq.is_empty() {
                    return Err(ActionError::BadParameter(
                        "per-step control needs at least one entry".into(),
                    ));
                }
                seq.iter().try_for_each(|v| check_vec(v))
            }
            VelocityRule::IndexFeedback(rows) => {
                if rows.len() != m {
                    return Err(ActionError::Shape(format!(
                        "feedback control has {} rows, expected {m}",
                        rows.len()
                    )));
                }
                rows.iter().try_for_each(|v| check_vec(v))
            }
        }
    }
}

/// Controlled trajectory template: stop rule, control, closure window, and
/// the total displacement the trajectory must realize.
#[derive(Debug, Clone)]
pub struct AdaptedCycle {
    tau: GridStoppingTime,
    control: VelocityRule,
    closure_steps: usize,
    displacement: Vec<f64>,
}

impl AdaptedCycle {
    /// Cycle closing onto its start point up to the integer winding `w`:
    /// the realized position lift over the whole trajectory is exactly `w`.
    pub fn new(
        tau: GridStoppingTime,
        control: VelocityRule,
        closure_steps: usize,
        winding: &[i64],
    ) -> Result<Self, ActionError> {
        let d: Vec<f64> = winding.iter().map(|&w| w as f64).collect();
        Self::with_displacement(tau, control, closure_steps, &d)
    }

    /// General variant with a real target displacement; used for open
    /// trajectories from `x` to `x + displacement`.
    pub fn with_displacement(
        tau: GridStoppingTime,
        control: VelocityRule,
        closure_steps: usize,
        displacement: &[f64],
    ) -> Result<Self, ActionError> {
        if displacement.is_empty() || displacement.iter().any(|c| !c.is_finite()) {
            return Err(ActionError::BadParameter(
                "displacement must be nonempty and finite".into(),
            ));
        }
        control.validate(displacement.len(), tau.index_count())?;
        if closure_steps == 0 && !control.is_deterministic() {
            // Random controls cannot hit an exact displacement surely.
            return Err(ActionError::BadParameter(
                "index-dependent controls need a closure window".into(),
            ));
        }
        Ok(AdaptedCycle {
            tau,
            control,
            closure_steps,
            displacement: displacement.to_vec(),
        })
    }

    pub fn tau(&self) -> &GridStoppingTime {
        &self.tau
    }

    pub fn control(&self) -> &VelocityRule {
        &self.control
    }

    pub fn closure_steps(&self) -> usize {
        self.closure_steps
    }

    pub fn target_lift(&self) -> &[f64] {
        &self.displacement
    }

    pub fn dim(&self) -> usize {
        self.displacement.len()
    }

    /// Stopping time of the whole trajectory: the base stop extended by the
    /// per-index offsets plus the closure window.
    pub fn total_time(&self) -> Result<GridStoppingTime, StoppingError> {
        let dt = self.tau.grid_step();
        let closure = self.closure_steps as f64 * dt;
        let offsets: Vec<f64> = self.tau.offsets().iter().map(|o| o + closure).collect();
        GridStoppingTime::new(
            self.tau.index_count(),
            self.tau.level(),
            self.tau.bound(),
            self.tau.rule().clone(),
            &offsets,
        )
    }

    /// Upper bound on the trajectory duration over all paths.
    pub fn duration_bound(&self) -> f64 {
        self.tau.max_value() + self.closure_steps as f64 * self.tau.grid_step()
    }
}

/// How an action value was produced.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMethod {
    ExactDp,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Expected action along a cycle, split into its exact linear pieces:
/// `value = lagrangian_part + alpha * expected_duration`.
#[derive(Debug, Clone)]
pub struct ActionEstimate {
    pub value: f64,
    /// Standard error of `value`; zero for exact evaluations.
    pub std_error: f64,
    pub method: EvalMethod,
    pub lagrangian_part: f64,
    pub expected_duration: f64,
    /// Law of the index at the end of the trajectory.
    pub final_index_law: ProbabilityVector,
}

#[derive(Debug, Clone)]
pub struct ActionOptions {
    pub force_monte_carlo: bool,
    pub mc_samples: usize,
    /// Largest exact history tree for index-dependent controls.
    pub history_cap: usize,
    pub seed: u64,
}

impl Default for ActionOptions {
    fn default() -> Self {
        ActionOptions {
            force_monte_carlo: false,
            mc_samples: 20_000,
            history_cap: 1 << 15,
            seed: 0x5eed,
        }
    }
}

impl ActionOptions {
    fn stopping(&self) -> StoppingOptions {
        StoppingOptions {
            history_cap: self.history_cap,
            mc_samples: self.mc_samples,
            seed: self.seed,
        }
    }
}

/// Expected action of `cycle` anchored at `x` under the initial index law
/// `start`, with running constant `alpha`.
pub fn action(
    inst: &SystemInstance,
    x: &TorusPoint,
    start: &ProbabilityVector,
    cycle: &AdaptedCycle,
    alpha: f64,
    opts: &ActionOptions,
) -> Result<ActionEstimate, ActionError> {
    let m = inst.index_count();
    if cycle.tau().index_count() != m || start.dim() != m {
        return Err(ActionError::Shape(format!(
            "cycle stops {} indices, start law has {}, instance has {m}",
            cycle.tau().index_count(),
            start.dim()
        )));
    }
    if x.dim() != inst.dim() || cycle.dim() != inst.dim() {
        return Err(ActionError::Shape(format!(
            "anchor dim {} and cycle dim {} must match instance dim {}",
            x.dim(),
            cycle.dim(),
            inst.dim()
        )));
    }
    if !alpha.is_finite() {
        return Err(ActionError::BadParameter(format!("alpha {alpha}")));
    }
    if !opts.force_monte_carlo {
        if cycle.tau().has_compact_rule() && cycle.control().is_deterministic() {
            return deterministic_dp(inst, x, start, cycle, alpha);
        }
        if cycle.tau().is_grid_measurable() {
            let depth = cycle.tau().step_bound() as i32 + 1;
            if (m as f64).powi(depth) <= opts.history_cap as f64 {
                return history_dp(inst, x, start, cycle, alpha);
            }
        }
    }
    monte_carlo(inst, x, start, cycle, alpha, opts)
}

pub(crate) fn check_speed(v: &[f64], bound: f64, step: usize) -> Result<(), ActionError> {
    let speed = v.iter().fold(0.0f64, |acc, &c| acc.max(c.abs()));
    if !speed.is_finite() || speed > bound + SPEED_TOL {
        return Err(ActionError::SentinelVelocity { step, speed, bound });
    }
    Ok(())
}

/// Per-index Lagrangian weights at position `x0 + lift` with the integrand
/// reading the reversed control velocity.
fn integrand_weights(inst: &SystemInstance, x0: &[f64], lift: &[f64], v: &[f64]) -> Vec<f64> {
    let pos: Vec<f64> = x0.iter().zip(lift).map(|(a, b)| a + b).collect();
    let neg: Vec<f64> = v.iter().map(|c| -c).collect();
    (0..inst.index_count())
        .map(|l| inst.lagrangian(l, &pos, &neg))
        .collect()
}

/// `E_i[int_0^t f_{omega(s)} ds]` for every start `i` in one call.
pub(crate) fn occupation_row_sums(a: &CouplingMatrix, f: &[f64], t: f64) -> Vec<f64> {
    let occ = a.occupation_integral(f, t);
    (0..f.len())
        .map(|i| (0..f.len()).map(|j| occ[[i, j]]).sum())
        .collect()
}

/// Offset and closure legs for mass stopped at `stop_lift` after
/// `stop_step` steps; returns the accrued Lagrangian cost and the final
/// index law contribution.
#[allow(clippy::too_many_arguments)]
fn settle(
    inst: &SystemInstance,
    x0: &[f64],
    stop_lift: &[f64],
    sigma: Vec<f64>,
    off: f64,
    e_off: Option<&StochasticMatrix>,
    cycle: &AdaptedCycle,
    b: &StochasticMatrix,
    stop_step: usize,
) -> Result<(f64, Vec<f64>), ActionError> {
    let a = inst.coupling();
    let m = a.index_count();
    let dim = cycle.dim();
    let dt = cycle.tau().grid_step();
    let bound = inst.velocity_bound();
    let mut law = sigma;
    let mut cost = 0.0;
    if off > 0.0 {
        // The position is frozen, so the integrand is a fixed per-index
        // weight and one occupation integral covers the whole window.
        let f = integrand_weights(inst, x0, stop_lift, &vec![0.0; dim]);
        let rows = occupation_row_sums(a, &f, off);
        cost += law.iter().zip(&rows).map(|(p, r)| p * r).sum::<f64>();
        let e = e_off.expect("offset transport matrix supplied when off > 0");
        law = (0..m)
            .map(|j| (0..m).map(|k| law[k] * e.entry(k, j)).sum())
            .collect();
    }
    let c_steps = cycle.closure_steps();
    let target = cycle.target_lift();
    if c_steps > 0 {
        let t_c = c_steps as f64 * dt;
        let vc: Vec<f64> = target
            .iter()
            .zip(stop_lift)
            .map(|(t, l)| (t - l) / t_c)
            .collect();
        check_speed(&vc, bound, stop_step)?;
        for c in 0..c_steps {
            let mid: Vec<f64> = stop_lift
                .iter()
                .zip(&vc)
                .map(|(l, v)| l + (c as f64 + 0.5) * dt * v)
                .collect();
            let f = integrand_weights(inst, x0, &mid, &vc);
            let rows = occupation_row_sums(a, &f, dt);
            cost += law.iter().zip(&rows).map(|(p, r)| p * r).sum::<f64>();
            law = (0..m)
                .map(|j| (0..m).map(|k| law[k] * b.entry(k, j)).sum())
                .collect();
        }
    } else {
        let resid = target
            .iter()
            .zip(stop_lift)
            .map(|(t, l)| (t - l).abs())
            .fold(0.0f64, f64::max);
        if resid > CLOSURE_TOL {
            return Err(ActionError::NotClosable { residual: resid });
        }
    }
    Ok((cost, law))
}

/// Exact evaluation for deterministic controls and automaton stop rules.
fn deterministic_dp(
    inst: &SystemInstance,
    x: &TorusPoint,
    start: &ProbabilityVector,
    cycle: &AdaptedCycle,
    alpha: f64,
) -> Result<ActionEstimate, ActionError> {
    let a = inst.coupling();
    let m = a.index_count();
    let tau = cycle.tau();
    let dt = tau.grid_step();
    let steps = tau.step_bound();
    let dim = cycle.dim();
    let bound = inst.velocity_bound();
    let rule = tau.rule();
    let n_states = rule.state_count().expect("automaton rule");
    let x0 = x.coords();

    // One deterministic polyline shared by every start.
    let mut lifts: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    lifts.push(vec![0.0; dim]);
    let mut vels: Vec<Vec<f64>> = Vec::with_capacity(steps);
    for k in 0..steps {
        let v = cycle.control().velocity(k, &[], &lifts[k], dim);
        check_speed(&v, bound, k)?;
        let next: Vec<f64> = lifts[k].iter().zip(&v).map(|(p, c)| p + dt * c).collect();
        vels.push(v);
        lifts.push(next);
    }

    // Expected integrand over one step per start index, the position frozen
    // at the midpoint of the step (midpoint quadrature in time).
    let resting = vels.iter().all(|v| v.iter().all(|&c| c == 0.0));
    let step_cost: Vec<Vec<f64>> = if resting {
        let f = integrand_weights(inst, x0, &lifts[0], &vec![0.0; dim]);
        vec![occupation_row_sums(a, &f, dt); steps]
    } else {
        (0..steps)
            .map(|k| {
                let mid: Vec<f64> = lifts[k]
                    .iter()
                    .zip(&vels[k])
                    .map(|(p, c)| p + 0.5 * dt * c)
                    .collect();
                let f = integrand_weights(inst, x0, &mid, &vels[k]);
                occupation_row_sums(a, &f, dt)
            })
            .collect()
    };

    let b = a.semigroup(dt);
    let closure_dur = cycle.closure_steps() as f64 * dt;
    let idx = |s: usize, j: usize| s * m + j;
    let mut total_lag = 0.0;
    let mut total_dur = 0.0;
    let mut law_acc = vec![0.0f64; m];
    for i in 0..m {
        let w = start.entry(i);
        if w == 0.0 {
            continue;
        }
        let off = tau.offset_for(i);
        let e_off = if off > 0.0 { Some(a.semigroup(off)) } else { None };
        let mut live = vec![0.0f64; n_states * m];
        live[idx(rule.state_init(i), i)] = 1.0;
        let mut lag = 0.0;
        let mut dur = off + closure_dur;
        for k in 0..=steps {
            let mut sigma = vec![0.0f64; m];
            let mut keep = vec![0.0f64; n_states * m];
            for s in 0..n_states {
                for j in 0..m {
                    let p = live[idx(s, j)];
                    if p == 0.0 {
                        continue;
                    }
                    if k == steps || rule.state_stops(s, k, j) {
                        sigma[j] += p;
                    } else {
                        keep[idx(s, j)] = p;
                    }
                }
            }
            let stop_mass: f64 = sigma.iter().sum();
            if stop_mass > 0.0 {
                dur += k as f64 * dt * stop_mass;
                let (c, law) = settle(
                    inst,
                    x0,
                    &lifts[k],
                    sigma,
                    off,
                    e_off.as_ref(),
                    cycle,
                    &b,
                    k,
                )?;
                lag += c;
                for j in 0..m {
                    law_acc[j] += w * law[j];
                }
            }
            if k == steps {
                break;
            }
            for j in 0..m {
                let wj: f64 = (0..n_states).map(|s| keep[idx(s, j)]).sum();
                if wj > 0.0 {
                    lag += wj * step_cost[k][j];
                }
            }
            let mut next = vec![0.0f64; n_states * m];
            for s in 0..n_states {
                for j in 0..m {
                    let p = keep[idx(s, j)];
                    if p == 0.0 {
                        continue;
                    }
                    for j2 in 0..m {
                        let s2 = rule.state_advance(s, j2);
                        next[idx(s2, j2)] += p * b.entry(j, j2);
                    }
                }
            }
            live = next;
        }
        total_lag += w * lag;
        total_dur += w * dur;
    }
    let final_law = ProbabilityVector::new(law_acc).expect("conserved DP mass");
    Ok(ActionEstimate {
        value: total_lag + alpha * total_dur,
        std_error: 0.0,
        method: EvalMethod::ExactDp,
        lagrangian_part: total_lag,
        expected_duration: total_dur,
        final_index_law: final_law,
    })
}

/// Exact evaluation by enumerating grid index histories; only viable on
/// short horizons, the dispatcher checks the tree size first.
fn history_dp(
    inst: &SystemInstance,
    x: &TorusPoint,
    start: &ProbabilityVector,
    cycle: &AdaptedCycle,
    alpha: f64,
) -> Result<ActionEstimate, ActionError> {
    struct Node {
        prob: f64,
        indices: Vec<usize>,
        lift: Vec<f64>,
        state: usize,
    }
    let a = inst.coupling();
    let m = a.index_count();
    let tau = cycle.tau();
    let dt = tau.grid_step();
    let steps = tau.step_bound();
    let dim = cycle.dim();
    let bound = inst.velocity_bound();
    let rule = tau.rule();
    let compact = rule.state_count().is_some();
    let x0 = x.coords();
    let b = a.semigroup(dt);
    let closure_dur = cycle.closure_steps() as f64 * dt;

    let mut total_lag = 0.0;
    let mut total_dur = 0.0;
    let mut law_acc = vec![0.0f64; m];
    for i in 0..m {
        let w = start.entry(i);
        if w == 0.0 {
            continue;
        }
        let off = tau.offset_for(i);
        let e_off = if off > 0.0 { Some(a.semigroup(off)) } else { None };
        let mut lag = 0.0;
        let mut dur = off + closure_dur;
        let mut live = vec![Node {
            prob: 1.0,
            indices: vec![i],
            lift: vec![0.0; dim],
            state: if compact { rule.state_init(i) } else { 0 },
        }];
        for k in 0..=steps {
            let mut next: Vec<Node> = Vec::new();
            for node in live.drain(..) {
                let j = *node.indices.last().expect("nonempty history");
                let stops = k == steps
                    || match rule {
                        StopRule::GridFn(g) => g(&node.indices),
                        r => r.state_stops(node.state, k, j),
                    };
                if stops {
                    dur += k as f64 * dt * node.prob;
                    let mut sigma = vec![0.0f64; m];
                    sigma[j] = node.prob;
                    let (c, law) =
                        settle(inst, x0, &node.lift, sigma, off, e_off.as_ref(), cycle, &b, k)?;
                    lag += c;
                    for l in 0..m {
                        law_acc[l] += w * law[l];
                    }
                    continue;
                }
                let v = cycle.control().velocity(k, &node.indices, &node.lift, dim);
                check_speed(&v, bound, k)?;
                let mid: Vec<f64> = node
                    .lift
                    .iter()
                    .zip(&v)
                    .map(|(p, c)| p + 0.5 * dt * c)
                    .collect();
                let f = integrand_weights(inst, x0, &mid, &v);
                let rows = occupation_row_sums(a, &f, dt);
                lag += node.prob * rows[j];
                let new_lift: Vec<f64> =
                    node.lift.iter().zip(&v).map(|(p, c)| p + dt * c).collect();
                for j2 in 0..m {
                    let p2 = node.prob * b.entry(j, j2);
                    if p2 == 0.0 {
                        continue;
                    }
                    let mut indices = node.indices.clone();
                    indices.push(j2);
                    next.push(Node {
                        prob: p2,
                        indices,
                        lift: new_lift.clone(),
                        state: if compact {
                            rule.state_advance(node.state, j2)
                        } else {
                            0
                        },
                    });
                }
            }
            live = next;
        }
        total_lag += w * lag;
        total_dur += w * dur;
    }
    let final_law = ProbabilityVector::new(law_acc).expect("conserved DP mass");
    Ok(ActionEstimate {
        value: total_lag + alpha * total_dur,
        std_error: 0.0,
        method: EvalMethod::ExactDp,
        lagrangian_part: total_lag,
        expected_duration: total_dur,
        final_index_law: final_law,
    })
}

/// Composite Simpson rule with panels no longer than `h_max`.
fn simpson<G: Fn(f64) -> f64>(g: G, a0: f64, b0: f64, h_max: f64) -> f64 {
    let len = b0 - a0;
    if len <= 0.0 {
        return 0.0;
    }
    let panels = (len / h_max).ceil().max(1.0) as usize;
    let h = len / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let l = a0 + p as f64 * h;
        let r = l + h;
        acc += (g(l) + 4.0 * g(0.5 * (l + r)) + g(r)) * h / 6.0;
    }
    acc
}

/// Integral of the Lagrangian over `[t0, t1)` along a path, the position
/// moving linearly from `x0 + lift0` with velocity `v`; split at the jump
/// times, Simpson inside each constant-index segment.
fn integrate_window(
    inst: &SystemInstance,
    x0: &[f64],
    lift0: &[f64],
    v: &[f64],
    path: &JumpPath,
    t0: f64,
    t1: f64,
    h_max: f64,
) -> f64 {
    let dim = lift0.len();
    let neg: Vec<f64> = v.iter().map(|c| -c).collect();
    let moving = v.iter().any(|&c| c != 0.0);
    let mut acc = 0.0;
    let mut pos = vec![0.0f64; dim];
    for (s0, s1, j) in path.segments_in(t0, t1) {
        if moving {
            acc += simpson(
                |s| {
                    let mut p = pos.clone();
                    for d in 0..dim {
                        p[d] = x0[d] + lift0[d] + v[d] * (s - t0);
                    }
                    inst.lagrangian(j, &p, &neg)
                },
                s0,
                s1,
                h_max,
            );
        } else {
            // Frozen position: the integrand is constant on the segment.
            for d in 0..dim {
                pos[d] = x0[d] + lift0[d];
            }
            acc += (s1 - s0) * inst.lagrangian(j, &pos, &neg);
        }
    }
    acc
}

/// Replay of one sampled path: Lagrangian integral, realized duration, and
/// final index. Shared by the Monte Carlo evaluator and the cycle
/// iteration layer.
pub(crate) fn replay_cost(
    inst: &SystemInstance,
    x: &TorusPoint,
    cycle: &AdaptedCycle,
    path: &JumpPath,
) -> Result<(f64, f64, usize), ActionError> {
    let tau = cycle.tau();
    let dt = tau.grid_step();
    let dim = cycle.dim();
    let bound = inst.velocity_bound();
    let x0 = x.coords();
    let h_max = 0.5 * dt;
    let k_stop = tau.stop_step(path);
    let hist = path.grid_history(dt, k_stop);
    let mut lift = vec![0.0f64; dim];
    let mut lag = 0.0;
    for k in 0..k_stop {
        let v = cycle.control().velocity(k, &hist, &lift, dim);
        check_speed(&v, bound, k)?;
        let t0 = k as f64 * dt;
        lag += integrate_window(inst, x0, &lift, &v, path, t0, t0 + dt, h_max);
        for d in 0..dim {
            lift[d] += dt * v[d];
        }
    }
    let base = k_stop as f64 * dt;
    let off = tau.offset_for(path.initial_index());
    if off > 0.0 {
        let zero = vec![0.0f64; dim];
        lag += integrate_window(inst, x0, &lift, &zero, path, base, base + off, h_max);
    }
    let t_off = base + off;
    let c_steps = cycle.closure_steps();
    let mut total = t_off;
    if c_steps > 0 {
        let t_c = c_steps as f64 * dt;
        let vc: Vec<f64> = cycle
            .target_lift()
            .iter()
            .zip(&lift)
            .map(|(t, l)| (t - l) / t_c)
            .collect();
        check_speed(&vc, bound, k_stop)?;
        lag += integrate_window(inst, x0, &lift, &vc, path, t_off, t_off + t_c, h_max);
        total += t_c;
    } else {
        let resid = cycle
            .target_lift()
            .iter()
            .zip(&lift)
            .map(|(t, l)| (t - l).abs())
            .fold(0.0f64, f64::max);
        if resid > CLOSURE_TOL {
            return Err(ActionError::NotClosable { residual: resid });
        }
    }
    Ok((lag, total, path.index_at(total)))
}

/// Streaming mean and spread in Welford form, safe against cancellation
/// when all samples coincide up to rounding dust.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct MeanAccumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub(crate) fn merge(&mut self, other: &MeanAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let d = other.mean - self.mean;
        self.mean += d * nb / (na + nb);
        self.m2 += other.m2 + d * d * na * nb / (na + nb);
        self.n += other.n;
    }

    pub(crate) fn count(&self) -> usize {
        self.n
    }

    pub(crate) fn mean(&self) -> f64 {
        self.mean
    }

    /// Standard error of the mean under the iid sample variance.
    pub(crate) fn std_error(&self) -> f64 {
        if self.n > 1 {
            (self.m2.max(0.0) / (self.n as f64 - 1.0) / self.n as f64).sqrt()
        } else {
            0.0
        }
    }
}

#[derive(Default, Clone)]
struct McChunk {
    acc: MeanAccumulator,
    lag_sum: f64,
    dur_sum: f64,
    counts: Vec<f64>,
}

fn monte_carlo(
    inst: &SystemInstance,
    x: &TorusPoint,
    start: &ProbabilityVector,
    cycle: &AdaptedCycle,
    alpha: f64,
    opts: &ActionOptions,
) -> Result<ActionEstimate, ActionError> {
    let a = inst.coupling();
    let m = a.index_count();
    let dt = cycle.tau().grid_step();
    let horizon = cycle.duration_bound() + 2.0 * dt;
    let n = opts.mc_samples.max(1);
    let workers = MC_WORKERS.min(n as u64).max(1);
    let chunks: Vec<Result<McChunk, ActionError>> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let lo = n as u64 * w / workers;
            let hi = n as u64 * (w + 1) / workers;
            let mut sampler = PathSampler::with_stream(a.clone(), opts.seed, w);
            let mut chunk = McChunk {
                counts: vec![0.0; m],
                ..McChunk::default()
            };
            for _ in lo..hi {
                let path = sampler.sample(start, horizon);
                let (lag, dur, fin) = replay_cost(inst, x, cycle, &path)?;
                chunk.acc.push(lag + alpha * dur);
                chunk.lag_sum += lag;
                chunk.dur_sum += dur;
                chunk.counts[fin] += 1.0;
            }
            Ok(chunk)
        })
        .collect();
    let mut merged = McChunk {
        counts: vec![0.0; m],
        ..McChunk::default()
    };
    for c in chunks {
        let c = c?;
        merged.acc.merge(&c.acc);
        merged.lag_sum += c.lag_sum;
        merged.dur_sum += c.dur_sum;
        for j in 0..m {
            merged.counts[j] += c.counts[j];
        }
    }
    let nf = merged.acc.count() as f64;
    let law = ProbabilityVector::new(merged.counts.iter().map(|c| c / nf).collect())
        .expect("empirical frequencies");
    Ok(ActionEstimate {
        value: merged.acc.mean(),
        std_error: merged.acc.std_error(),
        method: EvalMethod::MonteCarlo {
            samples: merged.acc.count(),
            seed: opts.seed,
        },
        lagrangian_part: merged.lag_sum / nf,
        expected_duration: merged.dur_sum / nf,
        final_index_law: law,
    })
}

/// Knobs of the cycle-family searches behind the value tests.
#[derive(Debug, Clone)]
pub struct SearchOptions {
    /// Smallest stop-step count of template cycles; keeps every stopping
    /// time in the family bounded away from zero.
    pub min_steps: usize,
    /// Largest stop-step count in the family.
    pub max_steps: usize,
    /// Speeds used by traveling templates.
    pub speeds: Vec<f64>,
    /// Objectives below the negative of this tolerance count as violations.
    pub violation_tol: f64,
    /// Cap on action evaluations per test.
    pub budget: usize,
    /// Perturb the most negative templates when budget remains.
    pub refine: bool,
    /// Include index-feedback templates (Monte Carlo evaluation).
    pub use_feedback: bool,
    pub mc_samples: usize,
    pub history_cap: usize,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            min_steps: 2,
            max_steps: 128,
            speeds: vec![0.5, 1.0, 2.0],
            violation_tol: 1e-3,
            budget: 600,
            refine: true,
            use_feedback: true,
            mc_samples: 3_000,
            history_cap: 1 << 15,
            seed: 0x5eed,
        }
    }
}

impl SearchOptions {
    /// Slim deterministic family for scans over many anchor points.
    pub fn reduced() -> Self {
        SearchOptions {
            speeds: vec![1.0, 2.0],
            budget: 150,
            refine: false,
            use_feedback: false,
            ..SearchOptions::default()
        }
    }

    pub(crate) fn action_options(&self) -> ActionOptions {
        ActionOptions {
            force_monte_carlo: false,
            mc_samples: self.mc_samples,
            history_cap: self.history_cap,
            seed: self.seed,
        }
    }
}

/// Template shapes the searches draw from; each builds one cycle.
#[derive(Debug, Clone, PartialEq)]
enum TemplateKind {
    Rest { steps: usize },
    FirstHitRest { target: usize },
    VisitRest { target: usize },
    OutBack { axis: usize, speed: f64, half: usize },
    FarRest { axis: usize, speed: f64, half: usize, rest: usize },
    Wind { axis: usize, w: i64, steps: usize },
    Feedback { speed: f64 },
}

struct Candidate {
    cycle: AdaptedCycle,
    label: String,
    kind: TemplateKind,
}

fn build_candidate(
    inst: &SystemInstance,
    opts: &SearchOptions,
    kind: TemplateKind,
) -> Result<Option<Candidate>, ActionError> {
    let m = inst.index_count();
    let dim = inst.dim();
    let level = inst.grid_level();
    let dt = inst.grid_step();
    let vmax = inst.velocity_bound();
    let zero_w = vec![0i64; dim];
    let bound_time = opts.max_steps as f64 * dt;
    let label = format!("{kind:?}");
    let cand = match kind {
        TemplateKind::Rest { steps } => {
            if steps == 0 || steps > opts.max_steps {
                return Ok(None);
            }
            let tau = GridStoppingTime::new(m, level, steps as f64 * dt, StopRule::AtStep(steps), &[])?;
            Candidate {
                cycle: AdaptedCycle::new(tau, VelocityRule::Zero, 0, &zero_w)?,
                label,
                kind,
            }
        }
        TemplateKind::FirstHitRest { target } => {
            let rule = StopRule::FirstHit {
                target,
                min_steps: opts.min_steps,
            };
            let tau = GridStoppingTime::new(m, level, bound_time, rule, &[])?;
            Candidate {
                cycle: AdaptedCycle::new(tau, VelocityRule::Zero, 0, &zero_w)?,
                label,
                kind,
            }
        }
        TemplateKind::VisitRest { target } => {
            let rule = StopRule::VisitCount {
                target,
                required: 2,
            };
            let tau = GridStoppingTime::new(m, level, bound_time, rule, &[])?;
            Candidate {
                cycle: AdaptedCycle::new(tau, VelocityRule::Zero, 0, &zero_w)?,
                label,
                kind,
            }
        }
        TemplateKind::OutBack { axis, speed, half } => {
            if speed > vmax || half == 0 || 2 * half > opts.max_steps {
                return Ok(None);
            }
            let mut fwd = vec![0.0; dim];
            fwd[axis] = speed;
            let mut back = vec![0.0; dim];
            back[axis] = -speed;
            let seq: Vec<Vec<f64>> = (0..2 * half)
                .map(|k| if k < half { fwd.clone() } else { back.clone() })
                .collect();
            let tau = GridStoppingTime::new(
                m,
                level,
                2.0 * half as f64 * dt,
                StopRule::AtStep(2 * half),
                &[],
            )?;
            Candidate {
                cycle: AdaptedCycle::new(tau, VelocityRule::PerStep(seq), 0, &zero_w)?,
                label,
                kind,
            }
        }
        TemplateKind::FarRest {
            axis,
            speed,
            half,
            rest,
        } => {
            let total = 2 * half + rest;
            if speed > vmax || half == 0 || total > 2 * opts.max_steps {
                return Ok(None);
            }
            let mut fwd = vec![0.0; dim];
            fwd[axis] = speed;
            let mut back = vec![0.0; dim];
            back[axis] = -speed;
            let zero = vec![0.0; dim];
            let seq: Vec<Vec<f64>> = (0..total)
                .map(|k| {
                    if k < half {
                        fwd.clone()
                    } else if k < half + rest {
                        zero.clone()
                    } else {
                        back.clone()
                    }
                })
                .collect();
            let tau = GridStoppingTime::new(
                m,
                level,
                total as f64 * dt,
                StopRule::AtStep(total),
                &[],
            )?;
            Candidate {
                cycle: AdaptedCycle::new(tau, VelocityRule::PerStep(seq), 0, &zero_w)?,
                label,
                kind,
            }
        }
        TemplateKind::Wind { axis, w, steps } => {
            if w == 0 || steps == 0 || steps > opts.max_steps {
                return Ok(None);
            }
            let speed = w as f64 / (steps as f64 * dt);
            if speed.abs() > vmax {
                return Ok(None);
            }
            let mut vel = vec![0.0; dim];
            vel[axis] = speed;
            let mut winding = zero_w.clone();
            winding[axis] = w;
            let tau =
                GridStoppingTime::new(m, level, steps as f64 * dt, StopRule::AtStep(steps), &[])?;
            Candidate {
                cycle: AdaptedCycle::new(tau, VelocityRule::Constant(vel), 0, &winding)?,
                label,
                kind,
            }
        }
        TemplateKind::Feedback { speed } => {
            if speed > vmax || m < 2 {
                return Ok(None);
            }
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|j| {
                    let mut r = vec![0.0; dim];
                    r[0] = if j % 2 == 0 { speed } else { -speed };
                    r
                })
                .collect();
            let c_steps =
                ((opts.max_steps as f64 * speed / vmax).ceil() as usize).max(opts.min_steps) + 1;
            let rule = StopRule::FirstHit {
                target: 0,
                min_steps: opts.min_steps,
            };
            let tau = GridStoppingTime::new(m, level, bound_time, rule, &[])?;
            Candidate {
                cycle: AdaptedCycle::new(tau, VelocityRule::IndexFeedback(rows), c_steps, &zero_w)?,
                label,
                kind,
            }
        }
    };
    Ok(Some(cand))
}

fn template_kinds(inst: &SystemInstance, opts: &SearchOptions) -> Vec<TemplateKind> {
    let m = inst.index_count();
    let dim = inst.dim();
    let dt = inst.grid_step();
    let vmax = inst.velocity_bound();
    let mut kinds = Vec::new();
    let mut n = opts.min_steps.max(1);
    while n < opts.max_steps {
        kinds.push(TemplateKind::Rest { steps: n });
        n *= 4;
    }
    kinds.push(TemplateKind::Rest {
        steps: opts.max_steps,
    });
    for target in 0..m {
        kinds.push(TemplateKind::FirstHitRest { target });
        kinds.push(TemplateKind::VisitRest { target });
    }
    for axis in 0..dim {
        for &speed in &opts.speeds {
            for half in [opts.min_steps.max(2), opts.max_steps / 4] {
                kinds.push(TemplateKind::OutBack { axis, speed, half });
            }
            // Travel roughly half way around the torus, rest there, return.
            let half = (0.5 / (speed * dt)).ceil() as usize;
            kinds.push(TemplateKind::FarRest {
                axis,
                speed,
                half,
                rest: opts.max_steps / 2,
            });
        }
        for w in [-2i64, -1, 1, 2] {
            let fastest = (w.unsigned_abs() as f64 / (0.75 * vmax * dt)).ceil() as usize;
            let steps = fastest.max(opts.min_steps);
            kinds.push(TemplateKind::Wind { axis, w, steps });
            kinds.push(TemplateKind::Wind {
                axis,
                w,
                steps: 2 * steps,
            });
        }
    }
    if opts.use_feedback {
        for &speed in &opts.speeds {
            kinds.push(TemplateKind::Feedback { speed });
        }
    }
    kinds
}

/// Local perturbations of a template, used by the refinement pass.
fn neighbor_kinds(kind: &TemplateKind, opts: &SearchOptions) -> Vec<TemplateKind> {
    match *kind {
        TemplateKind::Rest { steps } => vec![
            TemplateKind::Rest {
                steps: (steps / 2).max(opts.min_steps),
            },
            TemplateKind::Rest {
                steps: (steps * 3 / 2).max(steps + 1),
            },
        ],
        TemplateKind::OutBack { axis, speed, half } => vec![
            TemplateKind::OutBack {
                axis,
                speed: 0.8 * speed,
                half,
            },
            TemplateKind::OutBack {
                axis,
                speed: 1.25 * speed,
                half,
            },
            TemplateKind::OutBack {
                axis,
                speed,
                half: half + opts.min_steps,
            },
        ],
        TemplateKind::FarRest {
            axis,
            speed,
            half,
            rest,
        } => vec![
            TemplateKind::FarRest {
                axis,
                speed,
                half,
                rest: rest / 2,
            },
            TemplateKind::FarRest {
                axis,
                speed: 1.25 * speed,
                half: (half * 4 / 5).max(1),
                rest,
            },
        ],
        TemplateKind::Wind { axis, w, steps } => vec![
            TemplateKind::Wind {
                axis,
                w,
                steps: steps + opts.min_steps,
            },
            TemplateKind::Wind {
                axis,
                w,
                steps: (steps * 3 / 2).max(steps + 1),
            },
        ],
        _ => Vec::new(),
    }
}

/// Verdict of a cycle-family search at one anchor point.
#[derive(Debug, Clone)]
pub enum AdmissibilityVerdict {
    /// Some cycle drives the objective significantly below zero.
    Violated {
        description: String,
        start: usize,
        objective: f64,
    },
    /// Every cycle tried kept its objective above `-violation_tol`.
    AdmissibleAlongSearch {
        min_objective: f64,
        evaluations: usize,
        budget_exhausted: bool,
    },
}

impl AdmissibilityVerdict {
    pub fn is_violated(&self) -> bool {
        matches!(self, AdmissibilityVerdict::Violated { .. })
    }

    /// Smallest objective seen by the search.
    pub fn min_objective(&self) -> f64 {
        match self {
            AdmissibilityVerdict::Violated { objective, .. } => *objective,
            AdmissibilityVerdict::AdmissibleAlongSearch { min_objective, .. } => *min_objective,
        }
    }
}

/// Worst start-index objective of one cycle:
/// `min_i E_i[action] + sum_j law_i(j) (values(j) - values(i))`.
fn cycle_objective(
    inst: &SystemInstance,
    y: &TorusPoint,
    values: Option<&[f64]>,
    alpha: f64,
    cycle: &AdaptedCycle,
    aopts: &ActionOptions,
) -> Result<(f64, usize, f64), ActionError> {
    let m = inst.index_count();
    let mut best = (f64::INFINITY, 0usize, 0.0f64);
    for i in 0..m {
        let est = action(
            inst,
            y,
            &ProbabilityVector::unit(i, m),
            cycle,
            alpha,
            aopts,
        )?;
        let harvest = match values {
            Some(b) => est
                .final_index_law
                .as_slice()
                .iter()
                .enumerate()
                .map(|(j, p)| p * (b[j] - b[i]))
                .sum::<f64>(),
            None => 0.0,
        };
        let obj = est.value + harvest;
        if obj < best.0 {
            best = (obj, i, est.std_error);
        }
    }
    Ok(best)
}

/// Searches cycles anchored at `y` for one whose expected action plus the
/// final-law difference of the candidate per-index `values` is negative.
/// The difference form makes the verdict exactly invariant under shifting
/// all values by a constant.
pub fn admissibility_test(
    inst: &SystemInstance,
    y: &TorusPoint,
    values: &[f64],
    alpha: f64,
    opts: &SearchOptions,
) -> Result<AdmissibilityVerdict, ActionError> {
    if values.len() != inst.index_count() {
        return Err(ActionError::Shape(format!(
            "{} values for {} indices",
            values.len(),
            inst.index_count()
        )));
    }
    run_search(inst, y, Some(values), alpha, opts, false)
}

/// Same search with the start law of each cycle replaced by the
/// characteristic row of its total stopping time, which cancels the
/// per-index values identically: the objective reduces to the expected
/// action alone.
pub fn characteristic_admissibility_test(
    inst: &SystemInstance,
    y: &TorusPoint,
    alpha: f64,
    opts: &SearchOptions,
) -> Result<AdmissibilityVerdict, ActionError> {
    run_search(inst, y, None, alpha, opts, true)
}

/// Objective of one cycle under its characteristic start law, with the law
/// itself. Any per-index value vector contributes exactly zero here, so
/// none is taken.
pub fn characteristic_objective(
    inst: &SystemInstance,
    y: &TorusPoint,
    cycle: &AdaptedCycle,
    alpha: f64,
    aopts: &ActionOptions,
) -> Result<(f64, ProbabilityVector, f64), ActionError> {
    let total = cycle.total_time()?;
    let sm = stopping_matrix(inst.coupling(), &total, &aopts.stopping());
    let pv = characteristic_vector(&sm);
    let est = action(inst, y, &pv.vector, cycle, alpha, aopts)?;
    Ok((est.value, pv.vector, est.std_error))
}

fn run_search(
    inst: &SystemInstance,
    y: &TorusPoint,
    values: Option<&[f64]>,
    alpha: f64,
    opts: &SearchOptions,
    characteristic: bool,
) -> Result<AdmissibilityVerdict, ActionError> {
    let m = inst.index_count();
    let aopts = opts.action_options();
    let mut evals = 0usize;
    let mut budget_exhausted = false;
    let mut min_obj = f64::INFINITY;
    let mut scored: Vec<(f64, TemplateKind)> = Vec::new();

    let mut seen: Vec<TemplateKind> = Vec::new();
    let mut queue: Vec<TemplateKind> = template_kinds(inst, opts);
    let mut refined = false;
    loop {
        for kind in queue {
            if seen.contains(&kind) {
                continue;
            }
            seen.push(kind.clone());
            if evals >= opts.budget {
                budget_exhausted = true;
                break;
            }
            let Some(cand) = build_candidate(inst, opts, kind)? else {
                continue;
            };
            let (obj, start, se) = if characteristic {
                evals += 1;
                let (v, _, se) = characteristic_objective(inst, y, &cand.cycle, alpha, &aopts)?;
                (v, 0, se)
            } else {
                evals += m;
                cycle_objective(inst, y, values, alpha, &cand.cycle, &aopts)?
            };
            if obj + 3.0 * se < -opts.violation_tol {
                return Ok(AdmissibilityVerdict::Violated {
                    description: cand.label,
                    start,
                    objective: obj,
                });
            }
            min_obj = min_obj.min(obj);
            scored.push((obj, cand.kind));
        }
        if refined || !opts.refine || budget_exhausted {
            break;
        }
        refined = true;
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut next_queue = Vec::new();
        for (_, kind) in scored.iter().take(3) {
            next_queue.extend(neighbor_kinds(kind, opts));
        }
        if next_queue.is_empty() {
            break;
        }
        queue = next_queue;
    }
    Ok(AdmissibilityVerdict::AdmissibleAlongSearch {
        min_objective: min_obj,
        evaluations: evals,
        budget_exhausted,
    })
}

/// Best objective and a witness cycle for every start index, over the same
/// template family the admissibility searches walk.
#[derive(Debug, Clone)]
pub struct PerStartInfima {
    /// Smallest objective found for each start index.
    pub objectives: Vec<f64>,
    /// Standard error of each winning evaluation; zero for exact DP.
    pub std_errors: Vec<f64>,
    /// The cycle achieving each per-start minimum.
    pub witnesses: Vec<AdaptedCycle>,
    pub labels: Vec<String>,
    pub evaluations: usize,
    pub budget_exhausted: bool,
}

/// Per-start version of the admissibility search: instead of reporting the
/// single worst start, it keeps the minimum of
/// `E_i[action] + sum_j law_i(j) (values(j) - values(i))`
/// separately for every start index `i`, together with the cycle that
/// attains it. With `values = None` the final-law term is dropped. The
/// search never exits early, so the minima are over the whole family up to
/// the evaluation budget.
pub fn per_start_infima(
    inst: &SystemInstance,
    y: &TorusPoint,
    values: Option<&[f64]>,
    alpha: f64,
    opts: &SearchOptions,
) -> Result<PerStartInfima, ActionError> {
    let m = inst.index_count();
    if let Some(b) = values {
        if b.len() != m {
            return Err(ActionError::Shape(format!(
                "{} values for {m} indices",
                b.len()
            )));
        }
    }
    let aopts = opts.action_options();
    let mut evals = 0usize;
    let mut budget_exhausted = false;
    let mut best: Vec<(f64, f64, Option<(AdaptedCycle, String)>)> =
        vec![(f64::INFINITY, 0.0, None); m];
    let mut scored: Vec<(f64, TemplateKind)> = Vec::new();

    let mut seen: Vec<TemplateKind> = Vec::new();
    let mut queue: Vec<TemplateKind> = template_kinds(inst, opts);
    let mut refined = false;
    loop {
        for kind in queue {
            if seen.contains(&kind) {
                continue;
            }
            seen.push(kind.clone());
            if evals >= opts.budget {
                budget_exhausted = true;
                break;
            }
            let Some(cand) = build_candidate(inst, opts, kind)? else {
                continue;
            };
            evals += m;
            let mut kind_min = f64::INFINITY;
            for (i, slot) in best.iter_mut().enumerate() {
                let est = action(
                    inst,
                    y,
                    &ProbabilityVector::unit(i, m),
                    &cand.cycle,
                    alpha,
                    &aopts,
                )?;
                let harvest = match values {
                    Some(b) => est
                        .final_index_law
                        .as_slice()
                        .iter()
                        .enumerate()
                        .map(|(j, p)| p * (b[j] - b[i]))
                        .sum::<f64>(),
                    None => 0.0,
                };
                let obj = est.value + harvest;
                kind_min = kind_min.min(obj);
                if obj < slot.0 {
                    *slot = (
                        obj,
                        est.std_error,
                        Some((cand.cycle.clone(), cand.label.clone())),
                    );
                }
            }
            scored.push((kind_min, cand.kind));
        }
        if refined || !opts.refine || budget_exhausted {
            break;
        }
        refined = true;
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut next_queue = Vec::new();
        for (_, kind) in scored.iter().take(3) {
            next_queue.extend(neighbor_kinds(kind, opts));
        }
        if next_queue.is_empty() {
            break;
        }
        queue = next_queue;
    }

    let mut objectives = Vec::with_capacity(m);
    let mut std_errors = Vec::with_capacity(m);
    let mut witnesses = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for (obj, se, wit) in best {
        let (cycle, label) = wit.ok_or_else(|| {
            ActionError::BadParameter("search budget too small to evaluate any cycle".into())
        })?;
        objectives.push(obj);
        std_errors.push(se);
        witnesses.push(cycle);
        labels.push(label);
    }
    Ok(PerStartInfima {
        objectives,
        std_errors,
        witnesses,
        labels,
        evaluations: evals,
        budget_exhausted,
    })
}

/// Report of a subsolution probe over a family of closed cycles.
#[derive(Debug, Clone)]
pub struct SubsolutionReport {
    /// Smallest slack `action - expected drop of u` seen.
    pub min_slack: f64,
    /// Description of a configuration with slack below `-violation_tol`.
    pub witness: Option<String>,
    pub evaluations: usize,
}

/// Probes the chain inequality for `u`: along every cycle the expected
/// action must dominate the expected drop of `u` between the anchor point
/// and the endpoint. Negative slack beyond the tolerance names a witness.
pub fn subsolution_test(
    inst: &SystemInstance,
    u: &(dyn Fn(usize, &TorusPoint) -> f64 + Sync),
    alpha: f64,
    points: &[TorusPoint],
    opts: &SearchOptions,
) -> Result<SubsolutionReport, ActionError> {
    let m = inst.index_count();
    let aopts = opts.action_options();
    let mut min_slack = f64::INFINITY;
    let mut witness = None;
    let mut evals = 0usize;
    let mut starts: Vec<ProbabilityVector> =
        (0..m).map(|i| ProbabilityVector::unit(i, m)).collect();
    starts.push(ProbabilityVector::uniform(m));
    'outer: for x in points {
        let kinds = template_kinds(inst, opts);
        for kind in kinds {
            let Some(cand) = build_candidate(inst, opts, kind)? else {
                continue;
            };
            let y = x.translate(cand.cycle.target_lift());
            for a in &starts {
                if evals >= opts.budget {
                    break 'outer;
                }
                evals += 1;
                let est = action(inst, x, a, &cand.cycle, alpha, &aopts)?;
                let drop = a
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p * u(i, x))
                    .sum::<f64>()
                    - est
                        .final_index_law
                        .as_slice()
                        .iter()
                        .enumerate()
                        .map(|(j, p)| p * u(j, &y))
                        .sum::<f64>();
                let slack = est.value - drop;
                if slack < min_slack {
                    min_slack = slack;
                    if slack + 3.0 * est.std_error < -opts.violation_tol {
                        witness = Some(format!(
                            "{} at {:?} with start {:?}",
                            cand.label,
                            x.coords(),
                            a.as_slice()
                        ));
                    }
                }
            }
        }
    }
    Ok(SubsolutionReport {
        min_slack,
        witness,
        evaluations: evals,
    })
}
