//! Bounded stopping times of the index process on dyadic time grids.
//!
//! A grid stopping time watches the index process at times `0, D, 2D, ...`
//! with `D = 2^-level`, applies a nonanticipating stop rule to the observed
//! history, is forced to stop at a finite bound, and may add a deterministic
//! offset that depends on the initial index. Working on the grid keeps the
//! filtration structure checkable by construction and makes the law of the
//! stopped index computable exactly by dynamic programming: grid histories
//! form a Markov chain with step matrix `e^{-AD}`, stopped mass splits off
//! per the rule, and offsets transport it by `e^{-A offset}`.
//!
//! The stopped-index matrix of a stopping time `tau` is the row stochastic
//! matrix whose row `i` is the law of `omega(tau)` started from index `i`;
//! it plays the role of `e^{-A tau}`. Its Perron row is the characteristic
//! vector of `tau`: the unique initial law reproduced by stopping.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::markov::{
    perron_vector, CouplingMatrix, PerronVector, ProbabilityVector, StochasticMatrix,
};
use crate::path::{cylinder_probability, Cylinder, JumpPath, PathSampler};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoppingError {
    #[error("grid level {level} out of supported range 0..=20")]
    BadLevel { level: u32 },
    #[error("bound {bound} must be a positive multiple of the grid step {step}")]
    BadBound { bound: f64, step: f64 },
    #[error("offset {offset} for index {index} must be a nonnegative multiple of the grid step")]
    BadOffset { index: usize, offset: f64 },
    #[error("need one offset per index ({m}), got {got}")]
    OffsetShape { m: usize, got: usize },
    #[error("rule refers to index {index} outside 0..{m}")]
    RuleIndexOutOfRange { index: usize, m: usize },
    #[error("random time must come with a finite bound, got {bound}")]
    UnboundedInput { bound: f64 },
    #[error("history enumeration exceeded the cap of {cap} live histories")]
    HistoryExplosion { cap: usize },
    #[error("rule is not grid-history measurable; only sampling evaluators apply")]
    NotGridMeasurable,
    #[error("per-start rule needs one child per index ({m}), got {got}")]
    PerStartShape { m: usize, got: usize },
    #[error("per-start and capped rules require automaton children")]
    CompositeChildNotAutomaton,
}

/// Stop rule consulted at each grid time with the observed index history.
#[derive(Clone)]
pub enum StopRule {
    /// Stop at a fixed step.
    AtStep(usize),
    /// Stop at the first step `>= min_steps` whose observed index equals
    /// `target`.
    FirstHit { target: usize, min_steps: usize },
    /// Stop once `target` has been observed at `required` grid times.
    VisitCount { target: usize, required: usize },
    /// Stop at the first multiple of `stride` steps at or after the first
    /// observation of `target`; the dyadic coarsening of a first hit.
    CoarseFirstHit { target: usize, stride: usize },
    /// Arbitrary function of the observed history `omega(0), ..., omega(kD)`.
    /// Exact dynamic programming enumerates histories for this variant.
    GridFn(Arc<dyn Fn(&[usize]) -> bool + Send + Sync>),
    /// Stop at the first grid time at or after the value of a bounded
    /// nonanticipating random time evaluated on the whole path. Only
    /// sampling evaluators apply.
    PathTime(Arc<dyn Fn(&JumpPath) -> f64 + Send + Sync>),
    /// Delegate to the rule selected by the initial index: realizes glued
    /// stopping times that act as `rule[i]` on paths starting at `i`.
    /// Children must be automaton rules; one child per index.
    PerStart(Vec<StopRule>),
    /// The inner rule forced to stop no later than `steps`: composing with
    /// `PerStart` preserves each child's own bound.
    Capped { rule: Box<StopRule>, steps: usize },
}

impl std::fmt::Debug for StopRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopRule::AtStep(k) => write!(f, "AtStep({k})"),
            StopRule::FirstHit { target, min_steps } => {
                write!(f, "FirstHit{{target: {target}, min_steps: {min_steps}}}")
            }
            StopRule::VisitCount { target, required } => {
                write!(f, "VisitCount{{target: {target}, required: {required}}}")
            }
            StopRule::CoarseFirstHit { target, stride } => {
                write!(f, "CoarseFirstHit{{target: {target}, stride: {stride}}}")
            }
            StopRule::GridFn(_) => write!(f, "GridFn(..)"),
            StopRule::PathTime(_) => write!(f, "PathTime(..)"),
            StopRule::PerStart(rules) => f.debug_tuple("PerStart").field(rules).finish(),
            StopRule::Capped { rule, steps } => {
                write!(f, "Capped{{rule: {rule:?}, steps: {steps}}}")
            }
        }
    }
}

impl StopRule {
    /// Number of automaton states for rules with small sufficient statistics;
    /// `None` for general history rules and path-time rules.
    pub(crate) fn state_count(&self) -> Option<usize> {
        match self {
            StopRule::AtStep(_) | StopRule::FirstHit { .. } => Some(1),
            StopRule::CoarseFirstHit { .. } => Some(2),
            StopRule::VisitCount { required, .. } => Some(required + 1),
            StopRule::GridFn(_) | StopRule::PathTime(_) => None,
            StopRule::PerStart(rules) => {
                let stride = self.child_stride()?;
                Some(rules.len().max(1) * stride)
            }
            StopRule::Capped { rule, .. } => rule.state_count(),
        }
    }

    /// Common state width used to pack `PerStart` child states.
    fn child_stride(&self) -> Option<usize> {
        match self {
            StopRule::PerStart(rules) => {
                let mut stride = 1;
                for r in rules {
                    stride = stride.max(r.state_count()?);
                }
                Some(stride)
            }
            _ => None,
        }
    }

    pub(crate) fn state_init(&self, first: usize) -> usize {
        match self {
            StopRule::AtStep(_) | StopRule::FirstHit { .. } => 0,
            StopRule::CoarseFirstHit { target, .. } => usize::from(first == *target),
            StopRule::VisitCount { target, .. } => usize::from(first == *target),
            StopRule::PerStart(rules) => {
                let stride = self.child_stride().expect("automaton children");
                first * stride + rules[first].state_init(first)
            }
            StopRule::Capped { rule, .. } => rule.state_init(first),
            _ => unreachable!("compact rules only"),
        }
    }

    pub(crate) fn state_advance(&self, state: usize, next: usize) -> usize {
        match self {
            StopRule::AtStep(_) | StopRule::FirstHit { .. } => 0,
            StopRule::CoarseFirstHit { target, .. } => state | usize::from(next == *target),
            StopRule::VisitCount { target, required } => {
                (state + usize::from(next == *target)).min(*required)
            }
            StopRule::PerStart(rules) => {
                let stride = self.child_stride().expect("automaton children");
                let (child, sub) = (state / stride, state % stride);
                child * stride + rules[child].state_advance(sub, next)
            }
            StopRule::Capped { rule, .. } => rule.state_advance(state, next),
            _ => unreachable!("compact rules only"),
        }
    }

    pub(crate) fn state_stops(&self, state: usize, step: usize, current: usize) -> bool {
        match self {
            StopRule::AtStep(k) => step >= *k,
            StopRule::FirstHit { target, min_steps } => {
                step >= *min_steps && current == *target
            }
            StopRule::CoarseFirstHit { stride, .. } => state == 1 && step % stride == 0,
            StopRule::VisitCount { required, .. } => state >= *required,
            StopRule::PerStart(rules) => {
                let stride = self.child_stride().expect("automaton children");
                let (child, sub) = (state / stride, state % stride);
                rules[child].state_stops(sub, step, current)
            }
            StopRule::Capped { rule, steps } => {
                step >= *steps || rule.state_stops(state, step, current)
            }
            _ => unreachable!("compact rules only"),
        }
    }

    fn max_index(&self) -> Option<usize> {
        match self {
            StopRule::FirstHit { target, .. }
            | StopRule::VisitCount { target, .. }
            | StopRule::CoarseFirstHit { target, .. } => Some(*target),
            StopRule::PerStart(rules) => {
                let dispatch = rules.len().saturating_sub(1);
                Some(
                    rules
                        .iter()
                        .filter_map(|r| r.max_index())
                        .fold(dispatch, usize::max),
                )
            }
            StopRule::Capped { rule, .. } => rule.max_index(),
            _ => None,
        }
    }
}

/// Bounded stopping time on a dyadic grid, with per-index deterministic
/// offsets realizing strict lower-bound margins.
#[derive(Debug, Clone)]
pub struct GridStoppingTime {
    m: usize,
    level: u32,
    step: f64,
    /// Forced-stop step count: the base value never exceeds `steps * step`.
    steps: usize,
    rule: StopRule,
    /// Offset added to the base value, keyed by the initial index; entries
    /// are nonnegative multiples of the grid step.
    offset_steps: Vec<usize>,
}

impl GridStoppingTime {
    pub fn new(
        m: usize,
        level: u32,
        bound: f64,
        rule: StopRule,
        offsets: &[f64],
    ) -> Result<Self, StoppingError> {
        if level > 20 {
            return Err(StoppingError::BadLevel { level });
        }
        let step = 0.5f64.powi(level as i32);
        let steps = to_grid_steps(bound, step)
            .filter(|&s| s > 0)
            .ok_or(StoppingError::BadBound { bound, step })?;
        let offset_steps = if offsets.is_empty() {
            vec![0; m]
        } else {
            if offsets.len() != m {
                return Err(StoppingError::OffsetShape {
                    m,
                    got: offsets.len(),
                });
            }
            let mut v = Vec::with_capacity(m);
            for (i, &o) in offsets.iter().enumerate() {
                let s = to_grid_steps(o, step).ok_or(StoppingError::BadOffset {
                    index: i,
                    offset: o,
                })?;
                v.push(s);
            }
            v
        };
        if let Some(idx) = rule.max_index() {
            if idx >= m {
                return Err(StoppingError::RuleIndexOutOfRange { index: idx, m });
            }
        }
        validate_composite(&rule, m)?;
        Ok(GridStoppingTime {
            m,
            level,
            step,
            steps,
            rule,
            offset_steps,
        })
    }

    /// Uniform offset on every initial index.
    pub fn with_uniform_offset(
        m: usize,
        level: u32,
        bound: f64,
        rule: StopRule,
        offset: f64,
    ) -> Result<Self, StoppingError> {
        let offsets = vec![offset; m];
        GridStoppingTime::new(m, level, bound, rule, &offsets)
    }

    pub fn index_count(&self) -> usize {
        self.m
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn grid_step(&self) -> f64 {
        self.step
    }

    /// Bound on the base value (before offsets).
    pub fn bound(&self) -> f64 {
        self.steps as f64 * self.step
    }

    /// Forced-stop step count of the base rule.
    pub fn step_bound(&self) -> usize {
        self.steps
    }

    /// Per-index offsets in grid steps.
    pub fn offset_step_counts(&self) -> &[usize] {
        &self.offset_steps
    }

    pub fn rule(&self) -> &StopRule {
        &self.rule
    }

    pub fn offsets(&self) -> Vec<f64> {
        self.offset_steps
            .iter()
            .map(|&s| s as f64 * self.step)
            .collect()
    }

    pub fn offset_for(&self, initial: usize) -> f64 {
        self.offset_steps[initial] as f64 * self.step
    }

    /// Largest possible value over all paths and initial indices.
    pub fn max_value(&self) -> f64 {
        let max_off = self.offset_steps.iter().copied().max().unwrap_or(0);
        (self.steps + max_off) as f64 * self.step
    }

    /// Whether exact dynamic programming over compressed rule states applies.
    pub fn has_compact_rule(&self) -> bool {
        self.rule.state_count().is_some()
    }

    /// Whether the rule factors through grid histories at all.
    pub fn is_grid_measurable(&self) -> bool {
        !matches!(self.rule, StopRule::PathTime(_))
    }

    /// Step at which the base rule stops on this path.
    pub fn stop_step(&self, path: &JumpPath) -> usize {
        match &self.rule {
            StopRule::PathTime(f) => {
                let raw = f(path).max(0.0);
                let k = (raw / self.step).ceil() as usize;
                k.min(self.steps)
            }
            StopRule::GridFn(g) => {
                let mut history = Vec::with_capacity(self.steps + 1);
                for k in 0..=self.steps {
                    history.push(path.index_at(self.step * k as f64));
                    if k == self.steps || g(&history) {
                        return k;
                    }
                }
                self.steps
            }
            rule => {
                let first = path.index_at(0.0);
                let mut state = rule.state_init(first);
                let mut current = first;
                for k in 0..=self.steps {
                    if k > 0 {
                        current = path.index_at(self.step * k as f64);
                        state = rule.state_advance(state, current);
                    }
                    if k == self.steps || rule.state_stops(state, k, current) {
                        return k;
                    }
                }
                self.steps
            }
        }
    }

    /// Value of the stopping time on a path: base stop time plus the offset
    /// of the initial index.
    pub fn value(&self, path: &JumpPath) -> f64 {
        let base = self.stop_step(path);
        (base + self.offset_steps[path.initial_index()]) as f64 * self.step
    }
}

/// Composite rules must dispatch to automaton children so the exact solver
/// stays available; reject anything else up front.
fn validate_composite(rule: &StopRule, m: usize) -> Result<(), StoppingError> {
    match rule {
        StopRule::PerStart(children) => {
            if children.len() != m {
                return Err(StoppingError::PerStartShape {
                    m,
                    got: children.len(),
                });
            }
            for c in children {
                if c.state_count().is_none() {
                    return Err(StoppingError::CompositeChildNotAutomaton);
                }
                validate_composite(c, m)?;
            }
            Ok(())
        }
        StopRule::Capped { rule, .. } => {
            if rule.state_count().is_none() {
                return Err(StoppingError::CompositeChildNotAutomaton);
            }
            validate_composite(rule, m)
        }
        _ => Ok(()),
    }
}

/// Number of grid steps in `x` when `x` is a nonnegative multiple of `step`
/// up to rounding dust.
pub(crate) fn to_grid_steps(x: f64, step: f64) -> Option<usize> {
    if !x.is_finite() || x < 0.0 {
        return None;
    }
    let k = (x / step).round();
    if (x - k * step).abs() > 1e-9 * step.max(1.0) {
        return None;
    }
    Some(k as usize)
}

/// Dyadic simple approximation of a bounded nonanticipating random time:
/// values are rounded up to the grid `2^-level`, so the approximation
/// dominates the input, errs by at most one grid step on every path, and
/// leaves grid-valued inputs unchanged.
pub fn dyadic_approximation(
    m: usize,
    time: Arc<dyn Fn(&JumpPath) -> f64 + Send + Sync>,
    bound: f64,
    level: u32,
) -> Result<GridStoppingTime, StoppingError> {
    if !bound.is_finite() || bound <= 0.0 {
        return Err(StoppingError::UnboundedInput { bound });
    }
    let step = 0.5f64.powi(level as i32);
    let padded = step * (bound / step).ceil();
    GridStoppingTime::new(m, level, padded, StopRule::PathTime(time), &[])
}

/// Law of the stopped index per starting index, with the method that
/// produced it.
#[derive(Debug, Clone)]
pub struct StoppingMatrix {
    pub matrix: StochasticMatrix,
    pub method: StoppingMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoppingMethod {
    /// Exact dynamic programming over rule states or enumerated histories.
    ExactDp,
    /// Monte Carlo fallback with its sample count and worst per-entry
    /// standard error.
    MonteCarlo { samples: usize, max_std_error: f64 },
}

/// Controls for [`stopping_matrix`]: the history-enumeration cap and the
/// Monte Carlo fallback budget.
#[derive(Debug, Clone)]
pub struct StoppingOptions {
    pub history_cap: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for StoppingOptions {
    fn default() -> Self {
        StoppingOptions {
            history_cap: 1_000_000,
            mc_samples: 100_000,
            seed: 0x5eed,
        }
    }
}

/// Stopped-index matrix `e^{-A tau}`: row `i` is the law of `omega(tau)`
/// under the path law started from index `i`.
///
/// Compact rules are solved exactly by dynamic programming over
/// `(rule state, index)` pairs; general history rules enumerate histories up
/// to the cap and then fall back to Monte Carlo, as do path-time rules.
pub fn stopping_matrix(
    a: &CouplingMatrix,
    tau: &GridStoppingTime,
    options: &StoppingOptions,
) -> StoppingMatrix {
    assert_eq!(a.index_count(), tau.index_count(), "index count mismatch");
    match exact_stopping_matrix(a, tau, options.history_cap) {
        Ok(matrix) => StoppingMatrix {
            matrix,
            method: StoppingMethod::ExactDp,
        },
        Err(_) => monte_carlo_stopping_matrix(a, tau, options),
    }
}

/// Exact route only; errors when the rule forces sampling.
pub fn exact_stopping_matrix(
    a: &CouplingMatrix,
    tau: &GridStoppingTime,
    history_cap: usize,
) -> Result<StochasticMatrix, StoppingError> {
    let m = a.index_count();
    let step_matrix = a.semigroup(tau.grid_step());
    let mut rows = ndarray::Array2::<f64>::zeros((m, m));
    for i in 0..m {
        let stopped = match &tau.rule {
            StopRule::PathTime(_) => return Err(StoppingError::NotGridMeasurable),
            StopRule::GridFn(g) => history_dp(g, tau, &step_matrix, i, history_cap)?,
            rule => compact_dp(rule, tau, &step_matrix, i),
        };
        // Transport the stopped law through the deterministic offset.
        let transported = if tau.offset_steps[i] > 0 {
            let off = a.semigroup(tau.offset_for(i));
            (0..m)
                .map(|j| (0..m).map(|k| stopped[k] * off.entry(k, j)).sum())
                .collect()
        } else {
            stopped
        };
        for j in 0..m {
            rows[[i, j]] = transported[j];
        }
    }
    Ok(StochasticMatrix::new(rows).expect("stopped mass is a probability row"))
}

/// DP over `(rule state, current index)` for compact rules.
fn compact_dp(
    rule: &StopRule,
    tau: &GridStoppingTime,
    step_matrix: &StochasticMatrix,
    start: usize,
    ) -> Vec<f64> {
    let m = step_matrix.dim();
    let n_states = rule.state_count().expect("compact rule");
    let idx = |s: usize, j: usize| s * m + j;
    let mut live = vec![0.0f64; n_states * m];
    live[idx(rule.state_init(start), start)] = 1.0;
    let mut stopped = vec![0.0f64; m];
    for k in 0..=tau.steps {
        let mut next = vec![0.0f64; n_states * m];
        for s in 0..n_states {
            for j in 0..m {
                let p = live[idx(s, j)];
                if p == 0.0 {
                    continue;
                }
                if k == tau.steps || rule.state_stops(s, k, j) {
                    stopped[j] += p;
                } else {
                    for j2 in 0..m {
                        let s2 = rule.state_advance(s, j2);
                        next[idx(s2, j2)] += p * step_matrix.entry(j, j2);
                    }
                }
            }
        }
        live = next;
    }
    stopped
}

/// DP over explicit histories for general grid rules, capped.
fn history_dp(
    g: &Arc<dyn Fn(&[usize]) -> bool + Send + Sync>,
    tau: &GridStoppingTime,
    step_matrix: &StochasticMatrix,
    start: usize,
    cap: usize,
) -> Result<Vec<f64>, StoppingError> {
    let m = step_matrix.dim();
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![start], 1.0)];
    let mut stopped = vec![0.0f64; m];
    for k in 0..=tau.steps {
        let mut next = Vec::new();
        for (h, p) in live.into_iter() {
            let j = *h.last().expect("nonempty history");
            if k == tau.steps || g(&h) {
                stopped[j] += p;
            } else {
                for j2 in 0..m {
                    let mut h2 = h.clone();
                    h2.push(j2);
                    next.push((h2, p * step_matrix.entry(j, j2)));
                }
            }
        }
        if next.len() > cap {
            return Err(StoppingError::HistoryExplosion { cap });
        }
        live = next;
    }
    Ok(stopped)
}

fn monte_carlo_stopping_matrix(
    a: &CouplingMatrix,
    tau: &GridStoppingTime,
    options: &StoppingOptions,
) -> StoppingMatrix {
    let m = a.index_count();
    let n = options.mc_samples;
    let horizon = tau.max_value() + tau.grid_step();
    let mut rows = ndarray::Array2::<f64>::zeros((m, m));
    let mut max_se = 0.0f64;
    for i in 0..m {
        let mut sampler = PathSampler::with_stream(a.clone(), options.seed, i as u64);
        let start = ProbabilityVector::unit(i, m);
        let mut counts = vec![0usize; m];
        for _ in 0..n {
            let path = sampler.sample(&start, horizon);
            let v = tau.value(&path);
            counts[path.index_at(v)] += 1;
        }
        for j in 0..m {
            let p = counts[j] as f64 / n as f64;
            rows[[i, j]] = p;
            max_se = max_se.max((p * (1.0 - p) / n as f64).sqrt());
        }
    }
    StoppingMatrix {
        matrix: StochasticMatrix::new(rows).expect("empirical rows are stochastic"),
        method: StoppingMethod::MonteCarlo {
            samples: n,
            max_std_error: max_se,
        },
    }
}

/// Characteristic vector of a stopping time: the Perron row of its
/// stopped-index matrix, i.e. the initial law `a` with `a e^{-A tau} = a`.
pub fn characteristic_vector(stopping: &StoppingMatrix) -> PerronVector {
    perron_vector(&stopping.matrix)
}

/// Uniform lower bound on stopped-index probabilities for stopping times
/// that keep a margin `eps` below themselves: the smallest entry of
/// `e^{-A eps}`.
pub fn rho_bound(a: &CouplingMatrix, eps: f64) -> f64 {
    assert!(eps > 0.0 && eps.is_finite(), "margin must be positive");
    a.semigroup(eps).min_entry()
}

/// Outcome of the shift-pushforward check: shifting the path law by a
/// stopping time lands on the path law restarted from the stopped law.
#[derive(Debug, Clone)]
pub struct ShiftCheckReport {
    /// Standardized deviation per probed cylinder.
    pub z_scores: Vec<f64>,
    pub max_abs_z: f64,
    pub samples: usize,
}

/// Empirically verifies that the time shift by `tau` pushes the path law
/// started from `start` onto the path law started from
/// `start * e^{-A tau}`: for each probe cylinder, the frequency among
/// shifted sampled paths is compared against the restarted cylinder
/// probability on the binomial scale.
pub fn verify_shift_pushforward(
    a: &CouplingMatrix,
    start: &ProbabilityVector,
    tau: &GridStoppingTime,
    probes: &[Cylinder],
    samples: usize,
    seed: u64,
) -> ShiftCheckReport {
    let stopped = stopping_matrix(a, tau, &StoppingOptions::default());
    let restarted = start.pushforward(&stopped.matrix);
    let probe_span = probes
        .iter()
        .flat_map(|c| c.times().iter().copied())
        .fold(0.0f64, f64::max);
    let horizon = tau.max_value() + probe_span + 1.0;
    let mut sampler = PathSampler::new(a.clone(), seed);
    let mut hits = vec![0usize; probes.len()];
    for _ in 0..samples {
        let path = sampler.sample(start, horizon);
        let shifted = path
            .shifted(tau.value(&path))
            .expect("horizon covers the stopping value");
        for (c, cyl) in probes.iter().enumerate() {
            if shifted.matches(cyl) {
                hits[c] += 1;
            }
        }
    }
    let mut z_scores = Vec::with_capacity(probes.len());
    let mut max_abs = 0.0f64;
    for (c, cyl) in probes.iter().enumerate() {
        let p = cylinder_probability(a, &restarted, cyl);
        let sigma = (p * (1.0 - p) / samples as f64).sqrt().max(1e-300);
        let z = (hits[c] as f64 / samples as f64 - p) / sigma;
        max_abs = max_abs.max(z.abs());
        z_scores.push(z);
    }
    ShiftCheckReport {
        z_scores,
        max_abs_z: max_abs,
        samples,
    }
}

/// Deterministic rng for test batteries built on top of this module.
pub fn battery_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
