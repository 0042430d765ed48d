//! Cadlag jump paths of the index process, cylinder events, and generative
//! sampling.
//!
//! Paths are recorded on a finite horizon as an initial index plus strictly
//! increasing jump times with the indices entered at each jump; evaluation is
//! right continuous. The sampler draws holding times from the exponential law
//! of the current rate by inverse transform and jump targets from the row of
//! the coupling matrix, which reproduces the cylinder law of the index
//! process started from a given initial law.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::markov::{CouplingMatrix, ProbabilityVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("horizon must be positive and finite, got {horizon}")]
    BadHorizon { horizon: f64 },
    #[error("initial index {index} out of range for {m} indices")]
    BadIndex { index: usize, m: usize },
    #[error("jump times must be strictly increasing, positive and at most the horizon")]
    BadJumpTimes,
    #[error("need one post-jump index per jump time")]
    JumpShapeMismatch,
    #[error("consecutive indices must differ at a jump")]
    NoActualJump,
    #[error("shift by {shift} exceeds the path horizon {horizon}")]
    ShiftBeyondHorizon { shift: f64, horizon: f64 },
    #[error("cylinder times must be nonnegative and strictly increasing")]
    BadCylinderTimes,
    #[error("evaluation time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
}

/// A cadlag path of the index process on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    horizon: f64,
    initial_index: usize,
    jump_times: Vec<f64>,
    post_jump_indices: Vec<usize>,
}

impl JumpPath {
    pub fn new(
        horizon: f64,
        initial_index: usize,
        jump_times: Vec<f64>,
        post_jump_indices: Vec<usize>,
        m: usize,
    ) -> Result<Self, PathError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(PathError::BadHorizon { horizon });
        }
        if initial_index >= m {
            return Err(PathError::BadIndex {
                index: initial_index,
                m,
            });
        }
        if jump_times.len() != post_jump_indices.len() {
            return Err(PathError::JumpShapeMismatch);
        }
        let mut prev = 0.0;
        for &t in &jump_times {
            if !(t.is_finite() && t > prev && t <= horizon) {
                return Err(PathError::BadJumpTimes);
            }
            prev = t;
        }
        let mut cur = initial_index;
        for &j in &post_jump_indices {
            if j >= m {
                return Err(PathError::BadIndex { index: j, m });
            }
            if j == cur {
                return Err(PathError::NoActualJump);
            }
            cur = j;
        }
        Ok(JumpPath {
            horizon,
            initial_index,
            jump_times,
            post_jump_indices,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_index(&self) -> usize {
        self.initial_index
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn post_jump_indices(&self) -> &[usize] {
        &self.post_jump_indices
    }

    /// Right-continuous evaluation of the index at time `t` in `[0, horizon]`.
    pub fn index_at(&self, t: f64) -> usize {
        debug_assert!((0.0..=self.horizon).contains(&t), "time out of range");
        // partition_point gives the number of jumps at or before t.
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            self.initial_index
        } else {
            self.post_jump_indices[k - 1]
        }
    }

    /// Indices observed at the grid times `0, step, 2 step, ..., k step`.
    pub fn grid_history(&self, step: f64, steps: usize) -> Vec<usize> {
        (0..=steps).map(|k| self.index_at(step * k as f64)).collect()
    }

    /// Maximal constant-index segments `(start, end, index)` covering
    /// `[t0, t1)`, split at the jump times inside the window.
    pub fn segments_in(&self, t0: f64, t1: f64) -> Vec<(f64, f64, usize)> {
        debug_assert!(t0 <= t1 && t1 <= self.horizon + 1e-12, "window out of range");
        let mut out = Vec::new();
        if t1 <= t0 {
            return out;
        }
        let mut cur = t0;
        let first = self.jump_times.partition_point(|&s| s <= t0);
        for k in first..self.jump_times.len() {
            let t = self.jump_times[k];
            if t >= t1 {
                break;
            }
            if t > cur {
                out.push((cur, t, self.index_at(cur)));
            }
            cur = t;
        }
        if t1 > cur {
            out.push((cur, t1, self.index_at(cur)));
        }
        out
    }

    /// First time the path sits on `target`, if any.
    pub fn first_hitting_time(&self, target: usize) -> Option<f64> {
        if self.initial_index == target {
            return Some(0.0);
        }
        for (k, &j) in self.post_jump_indices.iter().enumerate() {
            if j == target {
                return Some(self.jump_times[k]);
            }
        }
        None
    }

    /// The shifted path `omega(. + h)` on the horizon `horizon - h`.
    ///
    /// A jump exactly at `h` is absorbed into the new initial index by right
    /// continuity. Shifting by the full horizon is rejected because the
    /// result would have an empty time interval.
    pub fn shifted(&self, h: f64) -> Result<JumpPath, PathError> {
        if !(h.is_finite() && h >= 0.0) || h >= self.horizon {
            return Err(PathError::ShiftBeyondHorizon {
                shift: h,
                horizon: self.horizon,
            });
        }
        if h == 0.0 {
            return Ok(self.clone());
        }
        let initial = self.index_at(h);
        let mut times = Vec::new();
        let mut indices = Vec::new();
        for (k, &t) in self.jump_times.iter().enumerate() {
            if t > h {
                times.push(t - h);
                indices.push(self.post_jump_indices[k]);
            }
        }
        Ok(JumpPath {
            horizon: self.horizon - h,
            initial_index: initial,
            jump_times: times,
            post_jump_indices: indices,
        })
    }

    /// Whether the path passes through the cylinder's index pattern.
    pub fn matches(&self, cyl: &Cylinder) -> bool {
        cyl.times
            .iter()
            .zip(cyl.indices.iter())
            .all(|(&t, &j)| t <= self.horizon && self.index_at(t) == j)
    }
}

/// Finite-dimensional cylinder event: the index at each listed time equals
/// the listed value.
#[derive(Debug, Clone, PartialEq)]
pub struct Cylinder {
    times: Vec<f64>,
    indices: Vec<usize>,
}

impl Cylinder {
    pub fn new(times: Vec<f64>, indices: Vec<usize>) -> Result<Self, PathError> {
        if times.is_empty() || times.len() != indices.len() {
            return Err(PathError::BadCylinderTimes);
        }
        let mut prev = -1.0;
        for &t in &times {
            if !(t.is_finite() && t >= 0.0 && t > prev) {
                return Err(PathError::BadCylinderTimes);
            }
            prev = t;
        }
        Ok(Cylinder { times, indices })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Probability of a cylinder under the path law started from `a`:
/// the chain of semigroup factors
/// `(a e^{-A t_1})_{j_1} * prod_l (e^{-A (t_l - t_{l-1})})_{j_{l-1} j_l}`.
pub fn cylinder_probability(a: &CouplingMatrix, start: &ProbabilityVector, cyl: &Cylinder) -> f64 {
    assert_eq!(start.dim(), a.index_count());
    let times = cyl.times();
    let indices = cyl.indices();
    let first = a.marginal(start, times[0]);
    let mut p = first.entry(indices[0]);
    for l in 1..times.len() {
        let step = a.semigroup(times[l] - times[l - 1]);
        p *= step.entry(indices[l - 1], indices[l]);
    }
    p
}

/// Seedable generative sampler of index paths.
///
/// Determinism contract: the same seed and stream produce the same sequence
/// of paths; parallel drivers give each worker its own stream id.
#[derive(Debug, Clone)]
pub struct PathSampler {
    coupling: CouplingMatrix,
    rng: ChaCha8Rng,
}

impl PathSampler {
    pub fn new(coupling: CouplingMatrix, seed: u64) -> Self {
        PathSampler {
            coupling,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Sampler on an independent stream of the same seed, for one worker of a
    /// parallel driver.
    pub fn with_stream(coupling: CouplingMatrix, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        PathSampler { coupling, rng }
    }

    pub fn coupling(&self) -> &CouplingMatrix {
        &self.coupling
    }

    /// Draws one path on `[0, horizon]` started from the law `start`.
    pub fn sample(&mut self, start: &ProbabilityVector, horizon: f64) -> JumpPath {
        assert!(horizon.is_finite() && horizon > 0.0, "bad horizon");
        let m = self.coupling.index_count();
        assert_eq!(start.dim(), m);
        let mut current = self.draw_discrete(start.as_slice());
        let initial = current;
        let mut t = 0.0;
        let mut jump_times = Vec::new();
        let mut post_jump = Vec::new();
        loop {
            let rate = self.coupling.rate(current);
            // Inverse transform on (0, 1]: u in [0,1) gives 1-u in (0,1].
            let u: f64 = self.rng.gen();
            let hold = -((1.0 - u).ln()) / rate;
            t += hold;
            if t > horizon {
                break;
            }
            let probs = self.coupling.jump_probabilities(current);
            let next = self.draw_discrete(&probs);
            jump_times.push(t);
            post_jump.push(next);
            current = next;
        }
        JumpPath {
            horizon,
            initial_index: initial,
            jump_times,
            post_jump_indices: post_jump,
        }
    }

    fn draw_discrete(&mut self, weights: &[f64]) -> usize {
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    }
}
