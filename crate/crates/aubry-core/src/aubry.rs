//! Critical levels and Aubry-set membership.
//!
//! The critical value is computed by relative value iteration of a coupled
//! semi-Lagrangian scheme: one sweep applies, at every position node and
//! every index, the one-step Bellman operator of the discounted form of the
//! system, with the coupling row feeding the other components back in. The
//! operator commutes with adding a constant to all components, so iterates
//! drift by a constant vector once the shape settles; the drift per unit
//! time is the negative of the critical value, and the settled shape is a
//! grid subsolution certificate at that level.
//!
//! Membership verdicts combine three probes built on the action machinery:
//! the characteristic cycle infimum at the anchor (no value vector needed),
//! a scan of admissible value offsets along a direction, and strict-margin
//! cycle infima at a surviving offset. A small characteristic infimum is
//! evidence for membership; a wide admissible scan together with uniformly
//! positive margin infima is evidence against.

use thiserror::Error;

use crate::action::{
    action, admissibility_test, characteristic_admissibility_test, characteristic_objective,
    per_start_infima, ActionError, ActionOptions, AdaptedCycle, AdmissibilityVerdict,
    SearchOptions, VelocityRule,
};
use crate::instance::SystemInstance;
use crate::lagrangian::TorusPoint;
use crate::markov::ProbabilityVector;
use crate::stopping::{GridStoppingTime, StopRule, StoppingError};

#[derive(Debug, Error)]
pub enum AubryError {
    #[error("critical value solver supports one-dimensional positions, got dimension {dim}")]
    UnsupportedDimension { dim: usize },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("value iteration did not settle after {iterations} sweeps (drift span {span:.3e})")]
    NotConverged { iterations: usize, span: f64 },
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Stopping(#[from] StoppingError),
}

/// Knobs of the critical-value iteration.
#[derive(Debug, Clone)]
pub struct CriticalOptions {
    /// Position nodes of the solver grid; `0` borrows the instance grid.
    pub x_subdivisions: usize,
    /// Velocity choices per sweep are the nodes of a symmetric grid with
    /// this many subdivisions; `0` borrows the instance velocity grid.
    pub velocity_subdivisions: usize,
    /// Settled when the per-sweep drift varies across components by less
    /// than this once rescaled to drift per unit time.
    pub drift_tolerance: f64,
    pub max_sweeps: usize,
    /// Sweeps between drift measurements.
    pub window: usize,
}

impl Default for CriticalOptions {
    fn default() -> Self {
        CriticalOptions {
            x_subdivisions: 0,
            velocity_subdivisions: 0,
            drift_tolerance: 1e-3,
            max_sweeps: 200_000,
            window: 64,
        }
    }
}

/// Piecewise-linear per-index values on a uniform circle grid; the settled
/// shape of the critical iteration, usable directly as a subsolution
/// candidate.
#[derive(Debug, Clone)]
pub struct SubsolutionGrid {
    subdivisions: usize,
    /// Outer: index. Inner: node values at `k / subdivisions`.
    values: Vec<Vec<f64>>,
}

impl SubsolutionGrid {
    pub fn index_count(&self) -> usize {
        self.values.len()
    }

    pub fn subdivisions(&self) -> usize {
        self.subdivisions
    }

    pub fn node_values(&self, index: usize) -> &[f64] {
        &self.values[index]
    }

    /// Circular linear interpolation at a one-dimensional torus point.
    pub fn eval(&self, index: usize, x: &TorusPoint) -> f64 {
        let n = self.subdivisions;
        let v = &self.values[index];
        let mut u = x.coords()[0].rem_euclid(1.0) * n as f64;
        if u >= n as f64 {
            u = 0.0;
        }
        let k = u.floor() as usize;
        let f = u - k as f64;
        let k1 = (k + 1) % n;
        (1.0 - f) * v[k] + f * v[k1]
    }
}

/// Critical level of the system with its convergence diagnostics and the
/// settled grid certificate.
#[derive(Debug, Clone)]
pub struct CriticalValue {
    pub beta: f64,
    pub sweeps: usize,
    /// Componentwise spread of the final drift measurement, per unit time.
    pub drift_span: f64,
    pub certificate: SubsolutionGrid,
}

/// Critical value by relative value iteration; one-dimensional positions
/// only.
pub fn critical_value(
    inst: &SystemInstance,
    opts: &CriticalOptions,
) -> Result<CriticalValue, AubryError> {
    let dim = inst.dim();
    if dim != 1 {
        return Err(AubryError::UnsupportedDimension { dim });
    }
    let m = inst.index_count();
    let n = if opts.x_subdivisions == 0 {
        inst.table(0).x_grid().subdivisions()
    } else {
        opts.x_subdivisions
    };
    if n < 8 {
        return Err(AubryError::BadParameter(format!(
            "need at least 8 position nodes, got {n}"
        )));
    }
    if opts.window < 2 {
        return Err(AubryError::BadParameter("window must be at least 2".into()));
    }
    let h = 1.0 / n as f64;
    let vmax = inst.velocity_bound();
    let nv = if opts.velocity_subdivisions == 0 {
        inst.table(0).velocity_box().points_per_axis() - 1
    } else {
        opts.velocity_subdivisions
    };
    if nv < 2 || nv % 2 != 0 {
        return Err(AubryError::BadParameter(format!(
            "velocity subdivisions must be even and at least 2, got {nv}"
        )));
    }
    let a = inst.coupling().entries();
    let max_rate = (0..m).map(|i| a[[i, i]]).fold(0.0f64, f64::max);
    // The foot of every characteristic stays within one cell, and the
    // diagonal discount weight stays nonnegative.
    let dt = (h / vmax).min(0.5 / max_rate);

    // Velocity nodes, their one-step costs, and their interpolation feet.
    let velocities: Vec<f64> = (0..=nv)
        .map(|k| -vmax + 2.0 * vmax * k as f64 / nv as f64)
        .collect();
    let mut cost = vec![vec![0.0f64; (nv + 1) * n]; m];
    for i in 0..m {
        for k in 0..n {
            let x = [k as f64 * h];
            for (wi, &w) in velocities.iter().enumerate() {
                cost[i][k * (nv + 1) + wi] = dt * inst.lagrangian(i, &x, &[-w]);
            }
        }
    }
    // Foot of the characteristic from node k at velocity w: node offset and
    // fractional weight, shared across k on the uniform grid.
    let feet: Vec<(isize, f64)> = velocities
        .iter()
        .map(|&w| {
            let s = w * dt / h;
            let base = s.floor();
            (base as isize, s - base)
        })
        .collect();

    let mut v = vec![vec![0.0f64; n]; m];
    let mut next = vec![vec![0.0f64; n]; m];
    let mut prev = v.clone();
    let mut sweeps = 0usize;
    let mut last_span = f64::INFINITY;
    while sweeps < opts.max_sweeps {
        for _ in 0..opts.window {
            for i in 0..m {
                let keep = 1.0 - a[[i, i]] * dt;
                for k in 0..n {
                    let mut feed = 0.0;
                    for j in 0..m {
                        if j != i {
                            feed += -a[[i, j]] * v[j][k];
                        }
                    }
                    let feed = dt * feed;
                    let mut best = f64::INFINITY;
                    for wi in 0..=nv {
                        let (di, f) = feet[wi];
                        let k0 = (k as isize + di).rem_euclid(n as isize) as usize;
                        let k1 = (k0 + 1) % n;
                        let foot = (1.0 - f) * v[i][k0] + f * v[i][k1];
                        let cand = cost[i][k * (nv + 1) + wi] + feed + keep * foot;
                        if cand < best {
                            best = cand;
                        }
                    }
                    next[i][k] = best;
                }
            }
            std::mem::swap(&mut v, &mut next);
            sweeps += 1;
        }
        let mut dmin = f64::INFINITY;
        let mut dmax = f64::NEG_INFINITY;
        let mut dsum = 0.0;
        for i in 0..m {
            for k in 0..n {
                let d = (v[i][k] - prev[i][k]) / opts.window as f64;
                dmin = dmin.min(d);
                dmax = dmax.max(d);
                dsum += d;
            }
        }
        let span = (dmax - dmin) / dt;
        last_span = span;
        if span <= opts.drift_tolerance {
            let beta = -dsum / (m * n) as f64 / dt;
            let anchor = v[0][0];
            for row in v.iter_mut() {
                for val in row.iter_mut() {
                    *val -= anchor;
                }
            }
            return Ok(CriticalValue {
                beta,
                sweeps,
                drift_span: span,
                certificate: SubsolutionGrid {
                    subdivisions: n,
                    values: v,
                },
            });
        }
        // Pin the absolute level so long runs stay well conditioned.
        let anchor = v[0][0];
        for row in v.iter_mut() {
            for val in row.iter_mut() {
                *val -= anchor;
            }
        }
        prev.clone_from(&v);
    }
    Err(AubryError::NotConverged {
        iterations: sweeps,
        span: last_span,
    })
}

/// Characteristic cycle infimum at an anchor: the smallest objective the
/// search finds, negative when a violating cycle exists.
pub fn characteristic_infimum(
    inst: &SystemInstance,
    y: &TorusPoint,
    alpha: f64,
    search: &SearchOptions,
) -> Result<f64, AubryError> {
    Ok(match characteristic_admissibility_test(inst, y, alpha, search)? {
        AdmissibilityVerdict::Violated { objective, .. } => objective,
        AdmissibilityVerdict::AdmissibleAlongSearch { min_objective, .. } => min_objective,
    })
}

/// Characteristic infima over a list of anchors.
pub fn characteristic_infimum_curve(
    inst: &SystemInstance,
    anchors: &[TorusPoint],
    alpha: f64,
    search: &SearchOptions,
) -> Result<Vec<f64>, AubryError> {
    anchors
        .iter()
        .map(|y| characteristic_infimum(inst, y, alpha, search))
        .collect()
}

/// Knobs of the admissible-offset scan.
#[derive(Debug, Clone)]
pub struct ScanOptions {
    /// Half-width of the scanned offset interval.
    pub radius: f64,
    /// Number of scan points; odd counts place one at zero.
    pub samples: usize,
    /// Direction of the offset line in value space; normalized internally.
    /// Defaults to the first two coordinates moving oppositely.
    pub direction: Option<Vec<f64>>,
    pub search: SearchOptions,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            radius: 1.0,
            samples: 21,
            direction: None,
            search: SearchOptions::reduced(),
        }
    }
}

/// Which offsets along the scanned line survive the admissibility search.
#[derive(Debug, Clone)]
pub struct ScanReport {
    pub offsets: Vec<f64>,
    pub admissible: Vec<bool>,
    /// Scan resolution.
    pub step: f64,
    /// Total measure of surviving offsets, at scan resolution.
    pub width: f64,
}

impl ScanReport {
    /// Surviving offset closest to zero, if any.
    pub fn central_survivor(&self) -> Option<f64> {
        self.offsets
            .iter()
            .zip(&self.admissible)
            .filter(|(_, &ok)| ok)
            .map(|(&s, _)| s)
            .min_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
    }
}

/// Scans value offsets `b = s d` and runs the admissibility search at each.
pub fn admissible_scan(
    inst: &SystemInstance,
    y: &TorusPoint,
    alpha: f64,
    opts: &ScanOptions,
) -> Result<ScanReport, AubryError> {
    let m = inst.index_count();
    if opts.samples < 2 {
        return Err(AubryError::BadParameter(format!(
            "scan needs at least 2 samples, got {}",
            opts.samples
        )));
    }
    if !(opts.radius > 0.0) {
        return Err(AubryError::BadParameter(format!(
            "scan radius {} must be positive",
            opts.radius
        )));
    }
    let mut d = match &opts.direction {
        Some(d) => d.clone(),
        None => {
            let mut d = vec![0.0; m];
            d[0] = 1.0;
            d[1] = -1.0;
            d
        }
    };
    if d.len() != m {
        return Err(AubryError::BadParameter(format!(
            "direction has {} entries for {m} indices",
            d.len()
        )));
    }
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(AubryError::BadParameter("direction is zero".into()));
    }
    for x in d.iter_mut() {
        *x /= norm;
    }
    let step = 2.0 * opts.radius / (opts.samples - 1) as f64;
    let mut offsets = Vec::with_capacity(opts.samples);
    let mut admissible = Vec::with_capacity(opts.samples);
    for k in 0..opts.samples {
        let s = -opts.radius + step * k as f64;
        let b: Vec<f64> = d.iter().map(|di| s * di).collect();
        let verdict = admissibility_test(inst, y, &b, alpha, &opts.search)?;
        offsets.push(s);
        admissible.push(!verdict.is_violated());
    }
    let width = step * admissible.iter().filter(|&&ok| ok).count() as f64;
    Ok(ScanReport {
        offsets,
        admissible,
        step,
        width,
    })
}

/// Knobs of the membership verdict.
#[derive(Debug, Clone)]
pub struct AubryOptions {
    /// Characteristic infima at or below this count as membership evidence.
    pub member_tol: f64,
    /// Scan widths above this count as interior admissible room.
    pub interior_tol: f64,
    /// Stop-step margins of the strict-margin infima behind a
    /// non-membership verdict.
    pub margin_steps: Vec<usize>,
    pub search: SearchOptions,
    pub scan: ScanOptions,
}

impl Default for AubryOptions {
    fn default() -> Self {
        AubryOptions {
            member_tol: 1e-2,
            interior_tol: 5e-2,
            margin_steps: vec![2, 4, 8],
            search: SearchOptions::default(),
            scan: ScanOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AubryVerdict {
    Member,
    NonMember,
    Inconclusive,
}

/// Evidence behind one membership decision.
#[derive(Debug, Clone)]
pub struct AubryReport {
    pub anchor: Vec<f64>,
    pub alpha: f64,
    pub verdict: AubryVerdict,
    pub characteristic_infimum: f64,
    /// Width of the admissible-offset scan; absent when the verdict was
    /// reached without scanning.
    pub scan_width: Option<f64>,
    /// Strict-margin infima `(margin steps, infimum)` at the surviving
    /// offset; empty when not probed.
    pub margin_infima: Vec<(usize, f64)>,
}

/// Membership decision at one anchor: a small characteristic infimum means
/// member; an admissible scan with interior room plus uniformly positive
/// strict-margin infima means non-member; anything else is inconclusive.
pub fn aubry_verdict(
    inst: &SystemInstance,
    y: &TorusPoint,
    alpha: f64,
    opts: &AubryOptions,
) -> Result<AubryReport, AubryError> {
    let char_inf = characteristic_infimum(inst, y, alpha, &opts.search)?;
    if char_inf <= opts.member_tol {
        return Ok(AubryReport {
            anchor: y.coords().to_vec(),
            alpha,
            verdict: AubryVerdict::Member,
            characteristic_infimum: char_inf,
            scan_width: None,
            margin_infima: Vec::new(),
        });
    }
    let scan = admissible_scan(inst, y, alpha, &opts.scan)?;
    let mut margin_infima = Vec::new();
    let verdict = if scan.width > opts.interior_tol {
        match scan.central_survivor() {
            Some(s) => {
                let m = inst.index_count();
                let mut d = match &opts.scan.direction {
                    Some(d) => d.clone(),
                    None => {
                        let mut d = vec![0.0; m];
                        d[0] = 1.0;
                        d[1] = -1.0;
                        d
                    }
                };
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in d.iter_mut() {
                    *x /= norm;
                }
                let b: Vec<f64> = d.iter().map(|di| s * di).collect();
                let mut all_positive = true;
                for &steps in &opts.margin_steps {
                    let search = SearchOptions {
                        min_steps: steps,
                        ..opts.search.clone()
                    };
                    let gap = match admissibility_test(inst, y, &b, alpha, &search)? {
                        AdmissibilityVerdict::Violated { objective, .. } => objective,
                        AdmissibilityVerdict::AdmissibleAlongSearch { min_objective, .. } => {
                            min_objective
                        }
                    };
                    if gap <= opts.member_tol {
                        all_positive = false;
                    }
                    margin_infima.push((steps, gap));
                }
                if all_positive {
                    AubryVerdict::NonMember
                } else {
                    AubryVerdict::Inconclusive
                }
            }
            None => AubryVerdict::Inconclusive,
        }
    } else {
        AubryVerdict::Inconclusive
    };
    Ok(AubryReport {
        anchor: y.coords().to_vec(),
        alpha,
        verdict,
        characteristic_infimum: char_inf,
        scan_width: Some(scan.width),
        margin_infima,
    })
}

/// Glues per-index stopping times into one that delegates by the initial
/// index: the glued time acts exactly as `taus[i]` on paths starting at
/// `i`, including that child's own bound and offset.
pub fn glue_stopping_times(taus: &[GridStoppingTime]) -> Result<GridStoppingTime, AubryError> {
    let m = taus.len();
    if m == 0 {
        return Err(AubryError::BadParameter("no stopping times to glue".into()));
    }
    let level = taus[0].level();
    for (i, tau) in taus.iter().enumerate() {
        if tau.index_count() != m {
            return Err(AubryError::BadParameter(format!(
                "stopping time {i} is over {} indices, gluing {m}",
                tau.index_count()
            )));
        }
        if tau.level() != level {
            return Err(AubryError::BadParameter(format!(
                "stopping time {i} lives on grid level {}, expected {level}",
                tau.level()
            )));
        }
        if !tau.has_compact_rule() {
            return Err(AubryError::BadParameter(format!(
                "stopping time {i} has no automaton rule; gluing needs one"
            )));
        }
    }
    let bound = taus
        .iter()
        .map(|t| t.bound())
        .fold(f64::NEG_INFINITY, f64::max);
    let offsets: Vec<f64> = taus.iter().enumerate().map(|(i, t)| t.offset_for(i)).collect();
    let children: Vec<StopRule> = taus
        .iter()
        .map(|t| StopRule::Capped {
            rule: Box::new(t.rule().clone()),
            steps: t.step_bound(),
        })
        .collect();
    Ok(GridStoppingTime::new(
        m,
        level,
        bound,
        StopRule::PerStart(children),
        &offsets,
    )?)
}

/// Exact actions of resting cycles built on per-index stopping times, and
/// of their glued form, from a common anchor: by linearity the glued value
/// under any start law is the law-weighted combination of the per-index
/// values. Returns `(per-index values, glued value under start)`.
pub fn glued_action_values(
    inst: &SystemInstance,
    y: &TorusPoint,
    taus: &[GridStoppingTime],
    start: &ProbabilityVector,
    alpha: f64,
    opts: &ActionOptions,
) -> Result<(Vec<f64>, f64), AubryError> {
    let m = inst.index_count();
    if taus.len() != m {
        return Err(AubryError::BadParameter(format!(
            "{} stopping times for {m} indices",
            taus.len()
        )));
    }
    let dim = inst.dim();
    let winding = vec![0i64; dim];
    let mut per_index = Vec::with_capacity(m);
    for (i, tau) in taus.iter().enumerate() {
        let cycle = AdaptedCycle::new(tau.clone(), VelocityRule::Zero, 0, &winding)?;
        let est = action(
            inst,
            y,
            &ProbabilityVector::unit(i, m),
            &cycle,
            alpha,
            opts,
        )?;
        per_index.push(est.value);
    }
    let glued = glue_stopping_times(taus)?;
    let cycle = AdaptedCycle::new(glued, VelocityRule::Zero, 0, &winding)?;
    let est = action(inst, y, start, &cycle, alpha, opts)?;
    Ok((per_index, est.value))
}

/// One per-index cycle infimum, reported raw and clamped at zero. The
/// clamped form is the quantity whose vanishing certifies the index at the
/// anchor; the raw form keeps the sign for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct InfimumEstimate {
    pub raw: f64,
    pub clamped: f64,
    /// Standard error of the winning evaluation; zero when it was exact DP.
    pub std_error: f64,
    /// Action evaluations spent by the search that produced it.
    pub evaluations: usize,
}

/// Margin `epsilon` translated to a minimum stop-step count on the grid.
fn margin_steps_for(
    inst: &SystemInstance,
    epsilon: f64,
    opts: &SearchOptions,
) -> Result<usize, AubryError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(AubryError::BadParameter(format!(
            "margin must be a positive time, got {epsilon}"
        )));
    }
    let steps = (epsilon / inst.grid_step()).ceil() as usize;
    let steps = steps.max(1);
    if steps > opts.max_steps {
        return Err(AubryError::BadParameter(format!(
            "margin {epsilon} needs {steps} grid steps, search caps at {}",
            opts.max_steps
        )));
    }
    Ok(steps)
}

/// Infimum of the cycle objective for one fixed start index at `y`, over
/// cycles whose stopping time is at least `epsilon` in every realization.
/// The objective adds the final-law difference of `values` to the expected
/// action, so it is invariant under shifting all values by a constant.
pub fn per_index_infimum(
    inst: &SystemInstance,
    y: &TorusPoint,
    values: &[f64],
    index: usize,
    epsilon: f64,
    alpha: f64,
    search: &SearchOptions,
) -> Result<InfimumEstimate, AubryError> {
    let m = inst.index_count();
    if index >= m {
        return Err(AubryError::BadParameter(format!(
            "start index {index} out of range for {m} indices"
        )));
    }
    let min_steps = margin_steps_for(inst, epsilon, search)?;
    let opts = SearchOptions {
        min_steps,
        ..search.clone()
    };
    let per = per_start_infima(inst, y, Some(values), alpha, &opts)?;
    Ok(InfimumEstimate {
        raw: per.objectives[index],
        clamped: per.objectives[index].max(0.0),
        std_error: per.std_errors[index],
        evaluations: per.evaluations,
    })
}

fn same_control(a: &VelocityRule, b: &VelocityRule) -> bool {
    match (a, b) {
        (VelocityRule::Zero, VelocityRule::Zero) => true,
        (VelocityRule::Constant(u), VelocityRule::Constant(v)) => u == v,
        (VelocityRule::PerStep(u), VelocityRule::PerStep(v)) => u == v,
        (VelocityRule::IndexFeedback(u), VelocityRule::IndexFeedback(v)) => u == v,
        (VelocityRule::GridFn(f), VelocityRule::GridFn(g)) => {
            std::sync::Arc::as_ptr(f) as *const () == std::sync::Arc::as_ptr(g) as *const ()
        }
        _ => false,
    }
}

/// Two evidence routes to the same membership question at one anchor, made
/// comparable through gluing.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    /// Per-index infima with the margin applied, raw and clamped.
    pub per_index: Vec<InfimumEstimate>,
    /// Template labels of the winning per-index cycles.
    pub witness_labels: Vec<String>,
    /// Characteristic-law infimum over the same family.
    pub characteristic: f64,
    /// Characteristic objective of the single cycle glued from the
    /// per-index witnesses.
    pub glued_characteristic: f64,
    pub max_per_index: f64,
    /// `glued_characteristic - max_per_index`; the glued objective is a
    /// characteristic-weighted mean of the per-index ones (the value terms
    /// cancel against the fixed row), so this never exceeds float dust.
    pub identity_gap: f64,
    /// Whether both routes land on the same side of `tol`.
    pub agree: bool,
}

/// Runs the per-index and characteristic infima side by side and checks
/// them against each other through the glued witness cycle. The glued
/// stopping time acts as witness `i`'s on paths starting at `i`; its
/// characteristic objective is exactly the characteristic-weighted mean of
/// the per-index objectives, hence at most their maximum. Requires the
/// witnesses to share one control; the search templates that win at
/// membership anchors are resting cycles, which do.
pub fn infimum_equivalence(
    inst: &SystemInstance,
    y: &TorusPoint,
    values: &[f64],
    epsilon: f64,
    alpha: f64,
    tol: f64,
    search: &SearchOptions,
) -> Result<EquivalenceReport, AubryError> {
    let min_steps = margin_steps_for(inst, epsilon, search)?;
    let opts = SearchOptions {
        min_steps,
        ..search.clone()
    };
    let per = per_start_infima(inst, y, Some(values), alpha, &opts)?;
    let characteristic =
        characteristic_admissibility_test(inst, y, alpha, &opts)?.min_objective();

    let first = &per.witnesses[0];
    for w in &per.witnesses[1..] {
        if !same_control(first.control(), w.control())
            || first.closure_steps() != w.closure_steps()
            || first.target_lift() != w.target_lift()
        {
            return Err(AubryError::BadParameter(
                "per-index witnesses use different controls; the glued cycle \
                 is only formed for a shared control"
                    .into(),
            ));
        }
    }
    let taus: Vec<GridStoppingTime> = per.witnesses.iter().map(|w| w.tau().clone()).collect();
    let glued = glue_stopping_times(&taus)?;
    let glued_cycle = AdaptedCycle::with_displacement(
        glued,
        first.control().clone(),
        first.closure_steps(),
        first.target_lift(),
    )?;
    let (glued_characteristic, _, _) =
        characteristic_objective(inst, y, &glued_cycle, alpha, &opts.action_options())?;

    let max_per_index = per
        .objectives
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let per_small = per.objectives.iter().all(|&v| v <= tol);
    let agree = per_small == (characteristic <= tol);
    let per_index = per
        .objectives
        .iter()
        .zip(&per.std_errors)
        .map(|(&raw, &se)| InfimumEstimate {
            raw,
            clamped: raw.max(0.0),
            std_error: se,
            evaluations: per.evaluations,
        })
        .collect();
    Ok(EquivalenceReport {
        per_index,
        witness_labels: per.labels,
        characteristic,
        glued_characteristic,
        max_per_index,
        identity_gap: glued_characteristic - max_per_index,
        agree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{InstanceOptions, SystemInstance};
    use crate::lagrangian::{CosTerm, FenchelOptions, HamiltonianSpec, Potential};
    use crate::markov::CouplingMatrix;
    use std::sync::OnceLock;

    fn base_options() -> InstanceOptions {
        InstanceOptions {
            x_subdivisions: 128,
            velocity_bound: Some(3.0),
            q_subdivisions: 48,
            fenchel: FenchelOptions {
                momentum_radius: 4.0,
                p_subdivisions: 128,
                max_expansions: 3,
            },
            ..InstanceOptions::default()
        }
    }

    fn test_instance() -> &'static SystemInstance {
        static INST: OnceLock<SystemInstance> = OnceLock::new();
        INST.get_or_init(|| SystemInstance::two_index_cosine_well(&base_options()).unwrap())
    }

    fn critical() -> &'static CriticalValue {
        static CRIT: OnceLock<CriticalValue> = OnceLock::new();
        CRIT.get_or_init(|| {
            critical_value(test_instance(), &CriticalOptions::default()).unwrap()
        })
    }

    fn cosine_spec(amplitude: f64, phase: f64) -> HamiltonianSpec {
        HamiltonianSpec::QuadraticMinusPotential {
            potential: Potential::CosineSum {
                offset: 0.0,
                terms: vec![CosTerm {
                    amplitude,
                    frequency: 1,
                    phase,
                    axis: 0,
                }],
            },
        }
    }

    fn small_options() -> InstanceOptions {
        InstanceOptions {
            x_subdivisions: 64,
            velocity_bound: Some(3.0),
            q_subdivisions: 32,
            fenchel: FenchelOptions {
                momentum_radius: 4.0,
                p_subdivisions: 64,
                max_expansions: 3,
            },
            ..InstanceOptions::default()
        }
    }

    #[test]
    fn critical_value_of_the_double_well_is_one() {
        let crit = critical();
        assert!(
            (crit.beta - 1.0).abs() <= 5e-3,
            "beta {} after {} sweeps (span {})",
            crit.beta,
            crit.sweeps,
            crit.drift_span
        );
    }

    #[test]
    fn critical_value_tracks_the_potential_amplitude() {
        let coupling =
            CouplingMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let spec = cosine_spec(2.0, 0.0);
        let inst =
            SystemInstance::build(coupling, &[spec.clone(), spec], 1, &small_options()).unwrap();
        let crit = critical_value(&inst, &CriticalOptions::default()).unwrap();
        assert!(
            (crit.beta - 2.0).abs() <= 2e-2,
            "beta {} for the doubled well",
            crit.beta
        );
    }

    #[test]
    fn opposed_wells_land_between_the_scalar_levels() {
        // One index prefers resting at 0.5, the other at 0.0; the mean
        // under the stationary law (2/3, 1/3) lower-bounds the level by
        // 1/3 and the flat profile upper-bounds it by 1.
        let coupling =
            CouplingMatrix::from_rows(&[vec![1.0, -1.0], vec![-2.0, 2.0]]).unwrap();
        let specs = [cosine_spec(1.0, 0.0), cosine_spec(1.0, std::f64::consts::PI)];
        let inst = SystemInstance::build(coupling, &specs, 1, &small_options()).unwrap();
        let crit = critical_value(&inst, &CriticalOptions::default()).unwrap();
        assert!(
            crit.beta > 1.0 / 3.0 - 1e-2 && crit.beta < 1.0,
            "beta {}",
            crit.beta
        );
        // The settled shape passes the cycle-based subsolution test a bit
        // above its own level.
        let cert = crit.certificate.clone();
        let u = move |i: usize, x: &TorusPoint| cert.eval(i, x);
        let points: Vec<TorusPoint> =
            [0.0, 0.25, 0.5].iter().map(|&x| TorusPoint::from_lift(&[x])).collect();
        let report = crate::action::subsolution_test(
            &inst,
            &u,
            crit.beta + 0.05,
            &points,
            &SearchOptions::reduced(),
        )
        .unwrap();
        assert!(
            report.min_slack > -5e-3,
            "certificate slack {}",
            report.min_slack
        );
    }

    #[test]
    fn certificate_of_the_double_well_is_a_subsolution_near_the_level() {
        let inst = test_instance();
        let crit = critical();
        let cert = crit.certificate.clone();
        let u = move |i: usize, x: &TorusPoint| cert.eval(i, x);
        let points: Vec<TorusPoint> =
            [0.0, 0.3, 0.5].iter().map(|&x| TorusPoint::from_lift(&[x])).collect();
        let report = crate::action::subsolution_test(
            inst,
            &u,
            crit.beta + 0.02,
            &points,
            &SearchOptions::reduced(),
        )
        .unwrap();
        assert!(
            report.min_slack > -5e-3,
            "certificate slack {}",
            report.min_slack
        );
    }

    #[test]
    fn two_dimensional_instances_are_rejected() {
        let coupling =
            CouplingMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let spec = HamiltonianSpec::QuadraticMinusPotential {
            potential: Potential::Zero,
        };
        let opts = InstanceOptions {
            x_subdivisions: 4,
            velocity_bound: Some(2.0),
            q_subdivisions: 4,
            fenchel: FenchelOptions {
                momentum_radius: 3.0,
                p_subdivisions: 8,
                max_expansions: 1,
            },
            ..InstanceOptions::default()
        };
        let inst = SystemInstance::build(coupling, &[spec.clone(), spec], 2, &opts).unwrap();
        let err = critical_value(&inst, &CriticalOptions::default()).unwrap_err();
        assert!(matches!(err, AubryError::UnsupportedDimension { dim: 2 }));
    }

    #[test]
    fn verdicts_separate_the_well_from_the_hilltop() {
        let inst = test_instance();
        let beta = critical().beta;
        let opts = AubryOptions {
            search: SearchOptions {
                budget: 200,
                use_feedback: false,
                refine: false,
                speeds: vec![1.0, 2.0],
                ..SearchOptions::default()
            },
            scan: ScanOptions {
                radius: 1.0,
                samples: 11,
                ..ScanOptions::default()
            },
            ..AubryOptions::default()
        };
        let at_well =
            aubry_verdict(inst, &TorusPoint::from_lift(&[0.5]), beta, &opts).unwrap();
        assert_eq!(at_well.verdict, AubryVerdict::Member, "{at_well:?}");
        let at_top = aubry_verdict(inst, &TorusPoint::origin(1), beta, &opts).unwrap();
        assert_eq!(at_top.verdict, AubryVerdict::NonMember, "{at_top:?}");
        assert!(at_top.characteristic_infimum > opts.member_tol);
        assert!(at_top.scan_width.unwrap() > opts.interior_tol);
        for (steps, gap) in &at_top.margin_infima {
            assert!(gap > &opts.member_tol, "margin {steps}: {gap}");
        }
    }

    #[test]
    fn scan_widths_separate_the_well_from_the_hilltop() {
        let inst = test_instance();
        let beta = critical().beta;
        let fine = ScanOptions {
            radius: 0.1,
            samples: 21,
            ..ScanOptions::default()
        };
        let at_well =
            admissible_scan(inst, &TorusPoint::from_lift(&[0.5]), beta, &fine).unwrap();
        assert!(at_well.width <= 0.02, "width {}", at_well.width);
        let coarse = ScanOptions {
            radius: 1.0,
            samples: 21,
            ..ScanOptions::default()
        };
        let at_top = admissible_scan(inst, &TorusPoint::origin(1), beta, &coarse).unwrap();
        assert!(at_top.width >= 0.1, "width {}", at_top.width);
        assert!(at_top.central_survivor().unwrap().abs() < 1e-12);
    }

    #[test]
    fn infimum_curve_dips_at_the_well() {
        let inst = test_instance();
        let beta = critical().beta;
        let xs: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
        let anchors: Vec<TorusPoint> =
            xs.iter().map(|&x| TorusPoint::from_lift(&[x])).collect();
        let curve =
            characteristic_infimum_curve(inst, &anchors, beta, &SearchOptions::reduced())
                .unwrap();
        let (argmin, min) = curve
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, &v)| (xs[k], v))
            .unwrap();
        assert_eq!(argmin, 0.5, "curve {curve:?}");
        assert!(min.abs() <= 2e-2, "minimum {min}");
        for (x, v) in xs.iter().zip(&curve) {
            if (x - 0.5).abs() > 0.11 {
                assert!(*v > min + 2e-2, "anchor {x}: {v}");
            }
        }
    }

    #[test]
    fn glued_stopping_time_prices_by_the_start_law() {
        let inst = test_instance();
        let level = inst.grid_level();
        let tau0 = GridStoppingTime::new(
            2,
            level,
            0.5,
            StopRule::AtStep(20),
            &[0.25, 0.0],
        )
        .unwrap();
        let tau1 = GridStoppingTime::new(
            2,
            level,
            1.0,
            StopRule::FirstHit {
                target: 0,
                min_steps: 2,
            },
            &[0.0, 0.125],
        )
        .unwrap();
        let start = ProbabilityVector::new(vec![0.3, 0.7]).unwrap();
        let y = TorusPoint::from_lift(&[0.5]);
        let (per_index, glued) = glued_action_values(
            inst,
            &y,
            &[tau0, tau1],
            &start,
            0.9,
            &ActionOptions::default(),
        )
        .unwrap();
        let expected = 0.3 * per_index[0] + 0.7 * per_index[1];
        assert!(
            (glued - expected).abs() < 1e-12,
            "glued {glued} vs {expected}"
        );
    }

    #[test]
    fn gluing_rejects_mismatched_shapes() {
        let t4 = GridStoppingTime::new(2, 4, 0.5, StopRule::AtStep(4), &[]).unwrap();
        let t5 = GridStoppingTime::new(2, 5, 0.5, StopRule::AtStep(4), &[]).unwrap();
        assert!(matches!(
            glue_stopping_times(&[t4.clone(), t5]),
            Err(AubryError::BadParameter(_))
        ));
        assert!(matches!(
            glue_stopping_times(&[t4]),
            Err(AubryError::BadParameter(_))
        ));
        assert!(glue_stopping_times(&[]).is_err());
    }

    #[test]
    fn per_index_infima_separate_the_well_from_the_hilltop() {
        let inst = test_instance();
        let alpha = critical().beta;
        let search = SearchOptions::reduced();
        let well = TorusPoint::from_lift(&[0.5]);
        let top = TorusPoint::origin(1);
        for i in 0..2 {
            let at_well =
                per_index_infimum(inst, &well, &[0.0, 0.0], i, 0.25, alpha, &search).unwrap();
            assert!(
                at_well.raw.abs() <= 5e-3,
                "index {i} at the well: raw {}",
                at_well.raw
            );
            assert!(at_well.clamped >= 0.0 && at_well.clamped >= at_well.raw);
            let at_top =
                per_index_infimum(inst, &top, &[0.0, 0.0], i, 0.25, alpha, &search).unwrap();
            assert!(
                at_top.raw >= 0.05,
                "index {i} at the hilltop: raw {}",
                at_top.raw
            );
            assert_eq!(at_top.clamped, at_top.raw);
        }
        // A margin the template family cannot realize is refused.
        assert!(matches!(
            per_index_infimum(inst, &well, &[0.0, 0.0], 0, 100.0, alpha, &search),
            Err(AubryError::BadParameter(_))
        ));
    }

    #[test]
    fn glued_witnesses_tie_the_two_infimum_routes_together() {
        let inst = test_instance();
        let alpha = critical().beta;
        let search = SearchOptions::reduced();
        let eps = 4.0 * inst.grid_step();
        let well = TorusPoint::from_lift(&[0.5]);
        let rep =
            infimum_equivalence(inst, &well, &[0.0, 0.0], eps, alpha, 1e-2, &search).unwrap();
        assert!(rep.agree, "routes disagree at the well: {rep:?}");
        assert!(rep.characteristic <= 1e-2);
        for est in &rep.per_index {
            assert!(est.raw <= 1e-2, "per-index raw {}", est.raw);
        }
        assert!(
            rep.identity_gap <= 1e-9,
            "glued {} exceeds max per-index {}",
            rep.glued_characteristic,
            rep.max_per_index
        );
        assert_eq!(rep.witness_labels.len(), 2);

        let top = TorusPoint::origin(1);
        let rep =
            infimum_equivalence(inst, &top, &[0.0, 0.0], eps, alpha, 1e-2, &search).unwrap();
        assert!(rep.agree, "routes disagree at the hilltop: {rep:?}");
        assert!(rep.characteristic > 1e-2);
        for est in &rep.per_index {
            assert!(est.raw > 1e-2, "per-index raw {}", est.raw);
        }
        assert!(rep.identity_gap <= 1e-9);
    }

    #[test]
    fn level_shifts_exactly_with_a_constant_added_to_both_hamiltonians() {
        let coupling =
            CouplingMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let shifted = |c: f64| HamiltonianSpec::QuadraticMinusPotential {
            potential: Potential::CosineSum {
                // Raising the Hamiltonian by c lowers the potential by c.
                offset: -c,
                terms: vec![CosTerm {
                    amplitude: 1.0,
                    frequency: 1,
                    phase: 0.0,
                    axis: 0,
                }],
            },
        };
        let base = SystemInstance::build(
            coupling.clone(),
            &[shifted(0.0), shifted(0.0)],
            1,
            &small_options(),
        )
        .unwrap();
        let lifted = SystemInstance::build(
            coupling,
            &[shifted(0.3), shifted(0.3)],
            1,
            &small_options(),
        )
        .unwrap();
        let opts = CriticalOptions::default();
        let b0 = critical_value(&base, &opts).unwrap().beta;
        let b1 = critical_value(&lifted, &opts).unwrap().beta;
        assert!(
            ((b1 - b0) - 0.3).abs() <= 1e-6,
            "shift by 0.3 moved the level from {b0} to {b1}"
        );
    }

    #[test]
    fn level_is_monotone_when_one_hamiltonian_grows() {
        let coupling =
            CouplingMatrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let raised = HamiltonianSpec::QuadraticMinusPotential {
            potential: Potential::CosineSum {
                offset: -0.2,
                terms: vec![CosTerm {
                    amplitude: 1.0,
                    frequency: 1,
                    phase: 0.0,
                    axis: 0,
                }],
            },
        };
        let base = SystemInstance::build(
            coupling.clone(),
            &[cosine_spec(1.0, 0.0), cosine_spec(1.0, 0.0)],
            1,
            &small_options(),
        )
        .unwrap();
        let bumped = SystemInstance::build(
            coupling,
            &[cosine_spec(1.0, 0.0), raised],
            1,
            &small_options(),
        )
        .unwrap();
        let opts = CriticalOptions::default();
        let b0 = critical_value(&base, &opts).unwrap().beta;
        let b1 = critical_value(&bumped, &opts).unwrap().beta;
        // Raising one component by 0.2 raises the level, by at most 0.2.
        assert!(
            b1 >= b0 + 0.05 && b1 <= b0 + 0.2 + 2e-2,
            "level moved from {b0} to {b1}"
        );
    }

    #[test]
    fn level_and_infima_survive_index_relabeling() {
        let a = CouplingMatrix::from_rows(&[vec![1.0, -1.0], vec![-2.0, 2.0]]).unwrap();
        let a_swapped =
            CouplingMatrix::from_rows(&[vec![2.0, -2.0], vec![-1.0, 1.0]]).unwrap();
        let s0 = cosine_spec(1.0, 0.0);
        let s1 = cosine_spec(1.0, std::f64::consts::PI);
        let inst = SystemInstance::build(a, &[s0.clone(), s1.clone()], 1, &small_options()).unwrap();
        let swapped = SystemInstance::build(a_swapped, &[s1, s0], 1, &small_options()).unwrap();
        let opts = CriticalOptions::default();
        let b = critical_value(&inst, &opts).unwrap().beta;
        let b_swapped = critical_value(&swapped, &opts).unwrap().beta;
        assert!(
            (b - b_swapped).abs() <= 1e-9,
            "levels {b} and {b_swapped} differ under relabeling"
        );
        let search = SearchOptions::reduced();
        for x in [0.0, 0.3] {
            let y = TorusPoint::from_lift(&[x]);
            let v = characteristic_infimum(&inst, &y, b, &search).unwrap();
            let v_swapped = characteristic_infimum(&swapped, &y, b_swapped, &search).unwrap();
            assert!(
                (v - v_swapped).abs() <= 1e-9,
                "infima at {x}: {v} vs {v_swapped}"
            );
        }
    }
}
