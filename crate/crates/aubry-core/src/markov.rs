//! Coupling matrices and the stochastic semigroups they generate.
//!
//! A coupling matrix `A` has nonpositive off-diagonal entries, zero row sums
//! and an irreducible transition graph. `-A` is then the generator of a
//! continuous-time Markov chain on the index set, `e^{-At}` is a row
//! stochastic matrix for every `t >= 0` and has strictly positive entries for
//! `t > 0`. Probability rows act on the left: the law of the index at time
//! `t` started from law `a` is `a e^{-At}`.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::linalg;

/// Row sums of a coupling matrix must vanish to this absolute tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Row sums of a stochastic matrix must equal one to this absolute tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-10;
/// Entries of a probability vector must sum to one to this absolute tolerance.
pub const PROBABILITY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("coupling matrix must be square, got {rows} rows of length {cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("coupling matrix needs at least two indices, got {m}")]
    TooSmall { m: usize },
    #[error("coupling entry ({row},{col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("off-diagonal coupling entry ({row},{col}) = {value} must be nonpositive")]
    SignViolation { row: usize, col: usize, value: f64 },
    #[error("coupling row {row} sums to {sum:e}, must vanish")]
    RowSumViolation { row: usize, sum: f64 },
    #[error("coupling matrix is reducible: no transition leaves the index set {subset:?}")]
    Reducible { subset: Vec<usize> },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StochasticError {
    #[error("stochastic matrix must be square, got {rows} rows of length {cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("stochastic entry ({row},{col}) = {value} is negative or not finite")]
    BadEntry { row: usize, col: usize, value: f64 },
    #[error("stochastic row {row} sums to {sum}, expected 1")]
    RowSumViolation { row: usize, sum: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbabilityError {
    #[error("probability vector must be nonempty")]
    Empty,
    #[error("probability entry {index} = {value} is negative or not finite")]
    BadEntry { index: usize, value: f64 },
    #[error("probability vector sums to {sum}, expected 1")]
    SumViolation { sum: f64 },
}

/// Validated coupling matrix of a weakly coupled system.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    m: usize,
    entries: Array2<f64>,
}

impl CouplingMatrix {
    /// Validates and wraps a coupling matrix given as rows.
    ///
    /// Checks, in order: shape, finiteness, off-diagonal sign, vanishing row
    /// sums, and irreducibility of the graph with an edge `i -> j` whenever
    /// `a_ij < 0`. Error values name the offending row, entry, or trapped
    /// index subset.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, CouplingError> {
        let m = rows.len();
        for row in rows {
            if row.len() != m {
                return Err(CouplingError::NotSquare {
                    rows: m,
                    cols: row.len(),
                });
            }
        }
        if m < 2 {
            return Err(CouplingError::TooSmall { m });
        }
        let mut entries = Array2::<f64>::zeros((m, m));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(CouplingError::NonFinite { row: i, col: j });
                }
                if i != j && v > 0.0 {
                    return Err(CouplingError::SignViolation {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                entries[[i, j]] = v;
            }
        }
        for i in 0..m {
            let sum: f64 = (0..m).map(|j| entries[[i, j]]).sum();
            if sum.abs() > ROW_SUM_TOL {
                return Err(CouplingError::RowSumViolation { row: i, sum });
            }
        }
        // Irreducibility: every index reaches every other through edges with
        // a_ij < 0. A forward-closed proper subset is exactly a certificate of
        // failure, and so is the complement of a backward-closed one.
        let forward = reach(&entries, false);
        if forward.len() < m {
            return Err(CouplingError::Reducible {
                subset: sorted(forward),
            });
        }
        let backward = reach(&entries, true);
        if backward.len() < m {
            let subset: Vec<usize> = (0..m).filter(|i| !backward.contains(i)).collect();
            return Err(CouplingError::Reducible { subset });
        }
        Ok(CouplingMatrix { m, entries })
    }

    /// Number of indices.
    pub fn index_count(&self) -> usize {
        self.m
    }

    /// Raw entries.
    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Jump rate out of index `i`; strictly positive for a valid coupling.
    pub fn rate(&self, i: usize) -> f64 {
        self.entries[[i, i]]
    }

    /// Jump law out of `i`: probability of landing on `j != i` is
    /// `-a_ij / a_ii`.
    pub fn jump_probabilities(&self, i: usize) -> Vec<f64> {
        let rate = self.rate(i);
        (0..self.m)
            .map(|j| if j == i { 0.0 } else { -self.entries[[i, j]] / rate })
            .collect()
    }

    /// Stochastic semigroup matrix `e^{-At}`; the identity at `t = 0`.
    pub fn semigroup(&self, t: f64) -> StochasticMatrix {
        assert!(t >= 0.0 && t.is_finite(), "semigroup needs finite t >= 0");
        if t == 0.0 {
            return StochasticMatrix {
                entries: Array2::eye(self.m),
            };
        }
        let exponent = self.entries.mapv(|x| -x * t);
        StochasticMatrix::new(linalg::matrix_exp(&exponent))
            .expect("semigroup of a valid coupling is stochastic")
    }

    /// Law of the index at time `t` started from law `a`: the row `a e^{-At}`.
    pub fn marginal(&self, a: &ProbabilityVector, t: f64) -> ProbabilityVector {
        let e = self.semigroup(t);
        a.pushforward(&e)
    }

    /// Expected occupation integrals split by endpoint: entry `(i,j)` is
    /// `E_i[ integral_0^t f(omega(s)) ds ; omega(t) = j ]`, computed from the
    /// exponential of the block matrix `[[-A, diag(f)], [0, -A]]`.
    pub fn occupation_integral(&self, f: &[f64], t: f64) -> Array2<f64> {
        assert_eq!(f.len(), self.m, "weight vector length mismatch");
        assert!(t >= 0.0 && t.is_finite(), "occupation needs finite t >= 0");
        let m = self.m;
        let mut block = Array2::<f64>::zeros((2 * m, 2 * m));
        for i in 0..m {
            for j in 0..m {
                block[[i, j]] = -self.entries[[i, j]] * t;
                block[[m + i, m + j]] = -self.entries[[i, j]] * t;
            }
            block[[i, m + i]] = f[i] * t;
        }
        let e = linalg::matrix_exp(&block);
        let mut out = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                out[[i, j]] = e[[i, m + j]];
            }
        }
        out
    }
}

/// Set of indices reachable from index 0 along edges `i -> j` with `a_ij < 0`
/// (or along reversed edges when `reversed` is set).
fn reach(entries: &Array2<f64>, reversed: bool) -> Vec<usize> {
    let m = entries.dim().0;
    let mut seen = vec![false; m];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..m {
            let edge = if reversed {
                entries[[j, i]] < 0.0
            } else {
                entries[[i, j]] < 0.0
            };
            if edge && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    (0..m).filter(|&i| seen[i]).collect()
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Row stochastic matrix: nonnegative entries, rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    entries: Array2<f64>,
}

impl StochasticMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self, StochasticError> {
        let (rows, cols) = entries.dim();
        if rows != cols {
            return Err(StochasticError::NotSquare { rows, cols });
        }
        for i in 0..rows {
            let mut sum = 0.0;
            for j in 0..cols {
                let v = entries[[i, j]];
                // Tiny negative dust from the matrix exponential is rejected
                // only beyond the row-sum tolerance.
                if !v.is_finite() || v < -STOCHASTIC_TOL {
                    return Err(StochasticError::BadEntry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(StochasticError::RowSumViolation { row: i, sum });
            }
        }
        Ok(StochasticMatrix { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.dim().0
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.dim()).map(|j| self.entries[[i, j]]).collect()
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }

    pub fn max_entry(&self) -> f64 {
        self.entries.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }

    pub fn dot(&self, other: &StochasticMatrix) -> Array2<f64> {
        self.entries.dot(&other.entries)
    }
}

/// Probability row vector on the index set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    entries: Array1<f64>,
}

impl ProbabilityVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, ProbabilityError> {
        if entries.is_empty() {
            return Err(ProbabilityError::Empty);
        }
        let mut sum = 0.0;
        for (i, &v) in entries.iter().enumerate() {
            if !v.is_finite() || v < -PROBABILITY_TOL {
                return Err(ProbabilityError::BadEntry { index: i, value: v });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > PROBABILITY_TOL {
            return Err(ProbabilityError::SumViolation { sum });
        }
        Ok(ProbabilityVector {
            entries: Array1::from(entries),
        })
    }

    /// Point mass at index `i`.
    pub fn unit(i: usize, m: usize) -> Self {
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        ProbabilityVector {
            entries: Array1::from(v),
        }
    }

    /// Uniform law on `m` indices.
    pub fn uniform(m: usize) -> Self {
        ProbabilityVector {
            entries: Array1::from(vec![1.0 / m as f64; m]),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, i: usize) -> f64 {
        self.entries[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.entries.as_slice().expect("contiguous")
    }

    /// Row-vector pushforward `a B` under a stochastic matrix.
    pub fn pushforward(&self, b: &StochasticMatrix) -> ProbabilityVector {
        let raw = self.entries.dot(&b.entries);
        // Clamp arithmetic dust so the invariant constructor stays happy.
        let mut v: Vec<f64> = raw.to_vec();
        for x in v.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let sum: f64 = v.iter().sum();
        for x in v.iter_mut() {
            *x /= sum;
        }
        ProbabilityVector {
            entries: Array1::from(v),
        }
    }

    /// Expectation of `f` under this law.
    pub fn expect(&self, f: &[f64]) -> f64 {
        assert_eq!(f.len(), self.dim());
        self.entries
            .iter()
            .zip(f.iter())
            .map(|(&a, &v)| a * v)
            .sum()
    }
}

/// Fixed probability row of a stochastic matrix, with a uniqueness flag.
#[derive(Debug, Clone, PartialEq)]
pub struct PerronVector {
    pub vector: ProbabilityVector,
    /// False when the fixed-row space has dimension greater than one; the
    /// vector is then one representative.
    pub unique: bool,
    /// Max-norm residual of `a B - a` for the returned row.
    pub residual: f64,
}

/// Solver tolerance for the Perron fixed row.
const PERRON_TOL: f64 = 1e-12;
const PERRON_MAX_ITERS: usize = 100_000;

/// Fixed probability row `a = a B` of a row stochastic matrix.
///
/// Runs a damped power iteration `a <- a (B + I)/2` (damping keeps periodic
/// chains convergent without changing the fixed rows), falling back to a
/// direct null-space solve of `(B^T - I) a^T = 0` with simplex normalization
/// if the iteration stalls. Uniqueness is certified by the rank of
/// `B^T - I`; with zero entries in `B` the fixed row may be non-unique, in
/// which case one representative is returned and flagged.
pub fn perron_vector(b: &StochasticMatrix) -> PerronVector {
    let m = b.dim();
    let bt_minus_i = {
        let mut w = b.entries.t().to_owned();
        for i in 0..m {
            w[[i, i]] -= 1.0;
        }
        w
    };
    let unique = linalg::rank(&bt_minus_i, 1e-9) == m - 1;

    if unique {
        let mut a = ProbabilityVector::uniform(m);
        for _ in 0..PERRON_MAX_ITERS {
            let pushed = a.pushforward(b);
            let res = residual(&pushed, b);
            let half: Vec<f64> = (0..m)
                .map(|i| 0.5 * (a.entry(i) + pushed.entry(i)))
                .collect();
            a = ProbabilityVector {
                entries: Array1::from(half),
            };
            if res <= PERRON_TOL {
                return PerronVector {
                    residual: residual(&pushed, b),
                    vector: pushed,
                    unique: true,
                };
            }
        }
    }
    // Direct solve: first m-1 equations of (B^T - I) a = 0 plus sum a = 1.
    let mut lhs = Array2::<f64>::zeros((m, m));
    let mut rhs = Array2::<f64>::zeros((m, 1));
    for i in 0..m.saturating_sub(1) {
        for j in 0..m {
            lhs[[i, j]] = bt_minus_i[[i, j]];
        }
    }
    for j in 0..m {
        lhs[[m - 1, j]] = 1.0;
    }
    rhs[[m - 1, 0]] = 1.0;
    let direct = linalg::solve(&lhs, &rhs);
    let vector = match direct {
        Some(x) if (0..m).all(|i| x[[i, 0]] >= -1e-9) => {
            let mut v: Vec<f64> = (0..m).map(|i| x[[i, 0]].max(0.0)).collect();
            let s: f64 = v.iter().sum();
            for e in v.iter_mut() {
                *e /= s;
            }
            ProbabilityVector {
                entries: Array1::from(v),
            }
        }
        _ => null_space_representative(&bt_minus_i),
    };
    let res = residual(&vector, b);
    PerronVector {
        vector,
        unique,
        residual: res,
    }
}

/// Nonnegative representative of the fixed-row space when it is degenerate:
/// reduce `(B^T - I)` to echelon form, set the first free variable to one and
/// the rest to zero, back-substitute, and project onto the simplex.
fn null_space_representative(bt_minus_i: &Array2<f64>) -> ProbabilityVector {
    let m = bt_minus_i.dim().0;
    let mut work = bt_minus_i.clone();
    let tol = 1e-9 * linalg::one_norm(bt_minus_i).max(1.0);
    let mut pivot_col = vec![usize::MAX; m];
    let mut row = 0;
    for col in 0..m {
        let mut piv = row;
        for i in row..m {
            if work[[i, col]].abs() > work[[piv, col]].abs() {
                piv = i;
            }
        }
        if row >= m || work[[piv, col]].abs() <= tol {
            continue;
        }
        for j in 0..m {
            work.swap([row, j], [piv, j]);
        }
        for i in 0..m {
            if i == row {
                continue;
            }
            let f = work[[i, col]] / work[[row, col]];
            if f == 0.0 {
                continue;
            }
            for j in 0..m {
                work[[i, j]] -= f * work[[row, j]];
            }
        }
        pivot_col[row] = col;
        row += 1;
    }
    let pivots: Vec<usize> = pivot_col[..row].to_vec();
    let first_free = (0..m).find(|c| !pivots.contains(c)).unwrap_or(0);
    let mut sol = vec![0.0; m];
    sol[first_free] = 1.0;
    for (r, &pc) in pivots.iter().enumerate() {
        let mut s = 0.0;
        for c in 0..m {
            if c != pc {
                s += work[[r, c]] * sol[c];
            }
        }
        sol[pc] = -s / work[[r, pc]];
    }
    let mut v: Vec<f64> = sol.iter().map(|&x| x.max(0.0)).collect();
    let s: f64 = v.iter().sum();
    if s <= 0.0 {
        return ProbabilityVector::uniform(m);
    }
    for e in v.iter_mut() {
        *e /= s;
    }
    ProbabilityVector {
        entries: Array1::from(v),
    }
}

fn residual(a: &ProbabilityVector, b: &StochasticMatrix) -> f64 {
    let pushed = a.entries.dot(&b.entries);
    a.entries
        .iter()
        .zip(pushed.iter())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0f64, f64::max)
}
