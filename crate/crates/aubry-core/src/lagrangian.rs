//! Hamiltonians on the flat torus, their Fenchel transforms, and control
//! integration.
//!
//! Hamiltonians are continuous in position, convex and superlinear in the
//! momentum. The Fenchel transform `L(x,q) = max_p (p.q - H(x,p))` is
//! computed per grid node by a maximum over a momentum box followed by one
//! local quadratic refinement; superlinearity makes the argmax interior once
//! the box is large enough, and the box is enlarged automatically until it
//! is (or a violation is reported). Tables interpolate multilinearly,
//! periodically in position and within the velocity box in velocity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LagrangianError {
    #[error("momentum argmax stayed on the box boundary after {expansions} expansions (x node {x_node}, velocity node {q_node}); superlinearity violated or box too small")]
    SuperlinearityViolation {
        x_node: usize,
        q_node: usize,
        expansions: usize,
    },
    #[error("midpoint convexity fails in the momentum at x node {x_node}: gap {gap}")]
    ConvexityViolation { x_node: usize, gap: f64 },
    #[error("grid parameter out of range: {what}")]
    BadGrid { what: String },
    #[error("table values have wrong shape: expected {expected}, got {got}")]
    TableShape { expected: usize, got: usize },
}

/// Point on the flat torus `[0,1)^N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    /// Wraps arbitrary real coordinates onto `[0,1)^N`.
    pub fn from_lift(lift: &[f64]) -> Self {
        TorusPoint {
            coords: lift.iter().map(|&x| wrap_unit(x)).collect(),
        }
    }

    pub fn origin(dim: usize) -> Self {
        TorusPoint {
            coords: vec![0.0; dim],
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// The point translated by a real displacement, wrapped back.
    pub fn translate(&self, delta: &[f64]) -> TorusPoint {
        TorusPoint {
            coords: self
                .coords
                .iter()
                .zip(delta.iter())
                .map(|(&x, &d)| wrap_unit(x + d))
                .collect(),
        }
    }
}

fn wrap_unit(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    // rem_euclid can return exactly 1.0 for tiny negative inputs.
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Uniform periodic grid on the torus `[0,1)^N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    subdivisions: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, subdivisions: usize) -> Result<Self, LagrangianError> {
        if dim == 0 || dim > 2 {
            return Err(LagrangianError::BadGrid {
                what: format!("torus dimension {dim} (supported: 1 or 2)"),
            });
        }
        if subdivisions < 2 {
            return Err(LagrangianError::BadGrid {
                what: format!("torus subdivisions {subdivisions}"),
            });
        }
        Ok(TorusGrid { dim, subdivisions })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subdivisions(&self) -> usize {
        self.subdivisions
    }

    pub fn step(&self) -> f64 {
        1.0 / self.subdivisions as f64
    }

    pub fn node_count(&self) -> usize {
        self.subdivisions.pow(self.dim as u32)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let h = self.step();
        match self.dim {
            1 => vec![flat as f64 * h],
            _ => {
                let i = flat / self.subdivisions;
                let j = flat % self.subdivisions;
                vec![i as f64 * h, j as f64 * h]
            }
        }
    }

    /// Periodic multilinear interpolation of nodal values at `x`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.node_count());
        let (nodes, len) = self.neighbor_weights(x);
        nodes[..len].iter().map(|&(i, w)| values[i] * w).sum()
    }

    /// Interpolation stencil at `x`: up to four `(node, weight)` pairs with
    /// weights summing to one. Lets callers touch only the nodes that
    /// matter instead of a full nodal array.
    pub fn neighbor_weights(&self, x: &[f64]) -> ([(usize, f64); 4], usize) {
        debug_assert_eq!(x.len(), self.dim);
        let n = self.subdivisions;
        match self.dim {
            1 => {
                let s = wrap_unit(x[0]) * n as f64;
                let i0 = s.floor() as usize % n;
                let w = s - s.floor();
                let i1 = (i0 + 1) % n;
                ([(i0, 1.0 - w), (i1, w), (0, 0.0), (0, 0.0)], 2)
            }
            _ => {
                let s0 = wrap_unit(x[0]) * n as f64;
                let s1 = wrap_unit(x[1]) * n as f64;
                let i0 = s0.floor() as usize % n;
                let j0 = s1.floor() as usize % n;
                let (w0, w1) = (s0 - s0.floor(), s1 - s1.floor());
                let (i1, j1) = ((i0 + 1) % n, (j0 + 1) % n);
                (
                    [
                        (i0 * n + j0, (1.0 - w0) * (1.0 - w1)),
                        (i1 * n + j0, w0 * (1.0 - w1)),
                        (i0 * n + j1, (1.0 - w0) * w1),
                        (i1 * n + j1, w0 * w1),
                    ],
                    4,
                )
            }
        }
    }
}

/// Centered uniform grid on a box `[-radius, radius]^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxGrid {
    dim: usize,
    radius: f64,
    subdivisions: usize,
}

impl BoxGrid {
    pub fn new(dim: usize, radius: f64, subdivisions: usize) -> Result<Self, LagrangianError> {
        if !(radius.is_finite() && radius > 0.0) || subdivisions < 2 || subdivisions % 2 != 0 {
            return Err(LagrangianError::BadGrid {
                what: format!("box radius {radius} / subdivisions {subdivisions} (must be positive, even)"),
            });
        }
        Ok(BoxGrid {
            dim,
            radius,
            subdivisions,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn step(&self) -> f64 {
        2.0 * self.radius / self.subdivisions as f64
    }

    pub fn points_per_axis(&self) -> usize {
        self.subdivisions + 1
    }

    pub fn node_count(&self) -> usize {
        self.points_per_axis().pow(self.dim as u32)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let pts = self.points_per_axis();
        let h = self.step();
        let coord = |k: usize| -self.radius + k as f64 * h;
        match self.dim {
            1 => vec![coord(flat)],
            _ => vec![coord(flat / pts), coord(flat % pts)],
        }
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        q.iter().all(|&v| v.abs() <= self.radius + 1e-12)
    }

    /// Multilinear interpolation inside the box; callers must stay in it.
    pub fn interpolate(&self, values: &[f64], q: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.node_count());
        let pts = self.points_per_axis();
        let h = self.step();
        let locate = |v: f64| -> (usize, f64) {
            let clamped = v.clamp(-self.radius, self.radius);
            let s = (clamped + self.radius) / h;
            let mut i0 = s.floor() as usize;
            if i0 >= pts - 1 {
                i0 = pts - 2;
            }
            (i0, s - i0 as f64)
        };
        match self.dim {
            1 => {
                let (i0, w) = locate(q[0]);
                values[i0] * (1.0 - w) + values[i0 + 1] * w
            }
            _ => {
                let (i0, w0) = locate(q[0]);
                let (j0, w1) = locate(q[1]);
                let v = |i: usize, j: usize| values[i * pts + j];
                v(i0, j0) * (1.0 - w0) * (1.0 - w1)
                    + v(i0 + 1, j0) * w0 * (1.0 - w1)
                    + v(i0, j0 + 1) * (1.0 - w0) * w1
                    + v(i0 + 1, j0 + 1) * w0 * w1
            }
        }
    }
}

/// One cosine term of a potential: `amplitude * cos(2 pi frequency x_axis + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosTerm {
    pub amplitude: f64,
    pub frequency: u32,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub axis: usize,
}

/// Potential on the torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    Zero,
    /// Constant plus a sum of cosine terms along coordinate axes.
    CosineSum {
        #[serde(default)]
        offset: f64,
        terms: Vec<CosTerm>,
    },
}

impl Potential {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::CosineSum { offset, terms } => {
                let mut v = *offset;
                for t in terms {
                    let arg = 2.0 * std::f64::consts::PI * t.frequency as f64 * x[t.axis] + t.phase;
                    v += t.amplitude * arg.cos();
                }
                v
            }
        }
    }

    /// The classic single-well `cos(2 pi x)` along the first axis.
    pub fn cosine_well() -> Self {
        Potential::CosineSum {
            offset: 0.0,
            terms: vec![CosTerm {
                amplitude: 1.0,
                frequency: 1,
                phase: 0.0,
                axis: 0,
            }],
        }
    }
}

/// Hamiltonian of one index of the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HamiltonianSpec {
    /// `H(x,p) = |p|^2 / 2 - V(x)`.
    QuadraticMinusPotential { potential: Potential },
    /// Gridded momentum table at each position node, interpolated
    /// multilinearly; values must be convex along the momentum grid.
    Table {
        x_subdivisions: usize,
        momentum_radius: f64,
        p_subdivisions: usize,
        /// Row-major: position node outer, momentum node inner.
        values: Vec<f64>,
    },
}

impl HamiltonianSpec {
    pub fn eval(&self, x: &[f64], p: &[f64]) -> f64 {
        match self {
            HamiltonianSpec::QuadraticMinusPotential { potential } => {
                let kin: f64 = p.iter().map(|&v| 0.5 * v * v).sum();
                kin - potential.eval(x)
            }
            HamiltonianSpec::Table {
                x_subdivisions,
                momentum_radius,
                p_subdivisions,
                values,
            } => {
                let xg = TorusGrid::new(x.len().max(1), *x_subdivisions).expect("table grid");
                let pg = BoxGrid::new(p.len().max(1), *momentum_radius, *p_subdivisions)
                    .expect("table grid");
                // Interpolate in momentum at the two neighboring x nodes,
                // then linearly in x.
                let nq = pg.node_count();
                let n = xg.node_count();
                let per_x: Vec<f64> = (0..n)
                    .map(|ix| pg.interpolate(&values[ix * nq..(ix + 1) * nq], p))
                    .collect();
                xg.interpolate(&per_x, x)
            }
        }
    }

    /// Midpoint convexity of the momentum dependence, probed on a grid;
    /// returns the worst violation gap found (nonpositive when convex).
    pub fn convexity_gap(&self, dim: usize, x_grid: &TorusGrid, p_box: &BoxGrid) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for ix in 0..x_grid.node_count() {
            let x = x_grid.node(ix);
            for ka in 0..p_box.node_count() {
                for kb in (ka + 1)..p_box.node_count() {
                    let pa = p_box.node(ka);
                    let pb = p_box.node(kb);
                    let mid: Vec<f64> = pa
                        .iter()
                        .zip(pb.iter())
                        .map(|(&a, &b)| 0.5 * (a + b))
                        .collect();
                    let gap = self.eval(&x, &mid)
                        - 0.5 * (self.eval(&x, &pa) + self.eval(&x, &pb));
                    worst = worst.max(gap);
                }
            }
        }
        let _ = dim;
        worst
    }

    /// Upper bound on momenta relevant at the flat level `alpha0 = max_x H(x,0)`:
    /// the largest grid momentum with `H(x,p) <= alpha0`, times three.
    /// A generous default for the velocity box of the Fenchel table.
    pub fn suggest_velocity_bound(&self, x_grid: &TorusGrid, p_box: &BoxGrid) -> f64 {
        let dim = x_grid.dim();
        let zero = vec![0.0; dim];
        let mut alpha0 = f64::NEG_INFINITY;
        for ix in 0..x_grid.node_count() {
            alpha0 = alpha0.max(self.eval(&x_grid.node(ix), &zero));
        }
        let mut ell: f64 = 0.0;
        for ix in 0..x_grid.node_count() {
            let x = x_grid.node(ix);
            for kp in 0..p_box.node_count() {
                let p = p_box.node(kp);
                if self.eval(&x, &p) <= alpha0 {
                    let norm = p.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                    ell = ell.max(norm);
                }
            }
        }
        (3.0 * ell).max(1.0)
    }
}

/// Fenchel transform of one Hamiltonian, tabulated over position and
/// velocity grids, with the argmax momenta retained.
#[derive(Debug, Clone)]
pub struct LagrangianTable {
    x_grid: TorusGrid,
    q_box: BoxGrid,
    values: Vec<f64>,
    /// Flat argmax momentum per (x, q) node, one coordinate block per axis.
    argmax: Vec<f64>,
}

/// Build controls for [`LagrangianTable`].
#[derive(Debug, Clone)]
pub struct FenchelOptions {
    pub momentum_radius: f64,
    pub p_subdivisions: usize,
    /// Box doubling attempts before reporting a superlinearity violation.
    pub max_expansions: usize,
}

impl Default for FenchelOptions {
    fn default() -> Self {
        FenchelOptions {
            momentum_radius: 4.0,
            p_subdivisions: 256,
            max_expansions: 6,
        }
    }
}

impl LagrangianTable {
    /// Tabulates `L(x,q) = max_p (p.q - H(x,p))` on the product grid.
    ///
    /// Per node the maximum is taken over the momentum grid and refined once
    /// by a per-axis parabolic fit through the argmax neighbors, which is
    /// exact for quadratic Hamiltonians. If any argmax lands on the box
    /// boundary the box is doubled and the build restarts.
    pub fn build(
        spec: &HamiltonianSpec,
        x_grid: TorusGrid,
        q_box: BoxGrid,
        options: &FenchelOptions,
    ) -> Result<Self, LagrangianError> {
        let dim = x_grid.dim();
        let mut radius = options.momentum_radius;
        for expansion in 0..=options.max_expansions {
            let p_box = BoxGrid::new(dim, radius, options.p_subdivisions)?;
            match Self::build_once(spec, &x_grid, &q_box, &p_box) {
                Ok(t) => return Ok(t),
                Err(boundary_node) => {
                    if expansion == options.max_expansions {
                        return Err(LagrangianError::SuperlinearityViolation {
                            x_node: boundary_node.0,
                            q_node: boundary_node.1,
                            expansions: expansion,
                        });
                    }
                    radius *= 2.0;
                }
            }
        }
        unreachable!()
    }

    fn build_once(
        spec: &HamiltonianSpec,
        x_grid: &TorusGrid,
        q_box: &BoxGrid,
        p_box: &BoxGrid,
    ) -> Result<LagrangianTable, (usize, usize)> {
        let dim = x_grid.dim();
        let nq = q_box.node_count();
        let pts = p_box.points_per_axis();
        let results: Vec<Result<(Vec<f64>, Vec<f64>), (usize, usize)>> = (0..x_grid.node_count())
            .into_par_iter()
            .map(|ix| {
                let x = x_grid.node(ix);
                // Cache H on the momentum grid for this x.
                let h_vals: Vec<f64> =
                    (0..p_box.node_count()).map(|kp| spec.eval(&x, &p_box.node(kp))).collect();
                let mut row_vals = vec![0.0; nq];
                let mut row_arg = vec![0.0; nq * dim];
                for kq in 0..nq {
                    let q = q_box.node(kq);
                    let score = |kp: usize, h: f64| -> f64 {
                        let p = p_box.node(kp);
                        p.iter().zip(q.iter()).map(|(&a, &b)| a * b).sum::<f64>() - h
                    };
                    let mut best_k = 0;
                    let mut best = f64::NEG_INFINITY;
                    for kp in 0..p_box.node_count() {
                        let s = score(kp, h_vals[kp]);
                        if s > best {
                            best = s;
                            best_k = kp;
                        }
                    }
                    // Boundary argmax: abort this pass, ask for a larger box.
                    let on_boundary = match dim {
                        1 => best_k == 0 || best_k == pts - 1,
                        _ => {
                            let (i, j) = (best_k / pts, best_k % pts);
                            i == 0 || i == pts - 1 || j == 0 || j == pts - 1
                        }
                    };
                    if on_boundary {
                        return Err((ix, kq));
                    }
                    // One per-axis parabolic refinement around the argmax.
                    let p_star = p_box.node(best_k);
                    let h = p_box.step();
                    let mut refined = p_star.clone();
                    for axis in 0..dim {
                        let neighbor = |delta: i64| -> f64 {
                            let stride = if dim == 1 { 1 } else if axis == 0 { pts } else { 1 };
                            let kk = (best_k as i64 + delta * stride as i64) as usize;
                            score(kk, h_vals[kk])
                        };
                        let (fm, f0, fp) = (neighbor(-1), score(best_k, h_vals[best_k]), neighbor(1));
                        let denom = fm - 2.0 * f0 + fp;
                        if denom < 0.0 {
                            let delta = 0.5 * h * (fm - fp) / denom;
                            refined[axis] = p_star[axis] + delta.clamp(-h, h);
                        }
                    }
                    let refined_score = refined
                        .iter()
                        .zip(q.iter())
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        - spec.eval(&x, &refined);
                    if refined_score > best {
                        best = refined_score;
                        row_arg[kq * dim..(kq + 1) * dim].copy_from_slice(&refined);
                    } else {
                        row_arg[kq * dim..(kq + 1) * dim].copy_from_slice(&p_star);
                    }
                    row_vals[kq] = best;
                }
                Ok((row_vals, row_arg))
            })
            .collect();
        let mut values = vec![0.0; x_grid.node_count() * nq];
        let mut argmax = vec![0.0; x_grid.node_count() * nq * dim];
        for (ix, r) in results.into_iter().enumerate() {
            let (row_vals, row_arg) = r?;
            values[ix * nq..(ix + 1) * nq].copy_from_slice(&row_vals);
            argmax[ix * nq * dim..(ix + 1) * nq * dim].copy_from_slice(&row_arg);
        }
        Ok(LagrangianTable {
            x_grid: x_grid.clone(),
            q_box: q_box.clone(),
            values,
            argmax,
        })
    }

    pub fn x_grid(&self) -> &TorusGrid {
        &self.x_grid
    }

    pub fn velocity_box(&self) -> &BoxGrid {
        &self.q_box
    }

    /// Interpolated Lagrangian value; the velocity must lie in the box.
    pub fn eval(&self, x: &[f64], q: &[f64]) -> f64 {
        debug_assert!(self.q_box.contains(q), "velocity outside the table box");
        let nq = self.q_box.node_count();
        // Interpolate in q only at the x nodes of the stencil, then in x.
        let (nodes, len) = self.x_grid.neighbor_weights(x);
        nodes[..len]
            .iter()
            .map(|&(ix, w)| {
                w * self
                    .q_box
                    .interpolate(&self.values[ix * nq..(ix + 1) * nq], q)
            })
            .sum()
    }

    /// Nodal value without interpolation.
    pub fn value_at_nodes(&self, x_node: usize, q_node: usize) -> f64 {
        self.values[x_node * self.q_box.node_count() + q_node]
    }

    /// Argmax momentum at a table node.
    pub fn argmax_at_nodes(&self, x_node: usize, q_node: usize) -> &[f64] {
        let dim = self.x_grid.dim();
        let base = (x_node * self.q_box.node_count() + q_node) * dim;
        &self.argmax[base..base + dim]
    }

    /// Largest nodal second difference of `L` along position axes divided by
    /// the squared step: a curvature estimate for quadrature error bounds.
    pub fn position_curvature_bound(&self) -> f64 {
        let n = self.x_grid.subdivisions();
        let nq = self.q_box.node_count();
        let h2 = self.x_grid.step() * self.x_grid.step();
        let mut worst = 0.0f64;
        match self.x_grid.dim() {
            1 => {
                for kq in 0..nq {
                    for ix in 0..n {
                        let m = |i: usize| self.values[(i % n) * nq + kq];
                        let dd = (m(ix + 1) - 2.0 * m(ix) + m(ix + n - 1)) / h2;
                        worst = worst.max(dd.abs());
                    }
                }
            }
            _ => {
                for kq in 0..nq {
                    for i in 0..n {
                        for j in 0..n {
                            let m = |a: usize, b: usize| self.values[((a % n) * n + b % n) * nq + kq];
                            let dd0 = (m(i + 1, j) - 2.0 * m(i, j) + m(i + n - 1, j)) / h2;
                            let dd1 = (m(i, j + 1) - 2.0 * m(i, j) + m(i, j + n - 1)) / h2;
                            worst = worst.max(dd0.abs()).max(dd1.abs());
                        }
                    }
                }
            }
        }
        worst
    }
}

/// Integrates a piecewise-constant control: returns the total displacement
/// (compensated summation per coordinate) and its torus projection.
pub fn integrate_control(segments: &[(f64, Vec<f64>)]) -> (Vec<f64>, TorusPoint) {
    let dim = segments.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut sum = vec![0.0f64; dim];
    let mut comp = vec![0.0f64; dim];
    for (dur, vel) in segments {
        for d in 0..dim {
            // Kahan step.
            let y = dur * vel[d] - comp[d];
            let t = sum[d] + y;
            comp[d] = (t - sum[d]) - y;
            sum[d] = t;
        }
    }
    let point = TorusPoint::from_lift(&sum);
    (sum, point)
}
