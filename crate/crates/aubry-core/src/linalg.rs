//! Dense linear algebra for small matrices: matrix exponential by
//! scaling-and-squaring with a degree-13 Pade approximant, and Gaussian
//! elimination with partial pivoting.
//!
//! Everything here targets matrices of side at most a few dozen, which is all
//! the index dimension of a weakly coupled system ever needs; no attempt is
//! made at large-scale performance.

use ndarray::Array2;

/// Pade(13) numerator coefficients for exp, highest degree last.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Scaling threshold for the Pade(13) scheme (Higham's theta_13).
const THETA13: f64 = 5.371920351148152;

/// Maximum column sum norm.
pub fn one_norm(a: &Array2<f64>) -> f64 {
    let (n, _) = a.dim();
    let mut best = 0.0f64;
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            s += a[[i, j]].abs();
        }
        best = best.max(s);
    }
    best
}

/// Matrix exponential `exp(a)` by scaling-and-squaring.
///
/// The argument is scaled by `2^-s` until its 1-norm is below the Pade(13)
/// threshold, the rational approximant is evaluated with a single linear
/// solve, and the result is squared `s` times.
pub fn matrix_exp(a: &Array2<f64>) -> Array2<f64> {
    let (n, m) = a.dim();
    assert_eq!(n, m, "matrix_exp needs a square matrix");
    let norm = one_norm(a);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a.mapv(|x| x / f64::powi(2.0, s));

    let ident = Array2::<f64>::eye(n);
    let a2 = scaled.dot(&scaled);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    // u = A (b13 A6 + b11 A4 + b9 A2) A6 + A (b7 A6 + b5 A4 + b3 A2 + b1 I)
    let w1 = &a6 * PADE13[13] + &a4 * PADE13[11] + &a2 * PADE13[9];
    let w2 = &a6 * PADE13[7] + &a4 * PADE13[5] + &a2 * PADE13[3] + &ident * PADE13[1];
    let u = scaled.dot(&(w1.dot(&a6) + w2));
    // v = (b12 A6 + b10 A4 + b8 A2) A6 + b6 A6 + b4 A4 + b2 A2 + b0 I
    let z1 = &a6 * PADE13[12] + &a4 * PADE13[10] + &a2 * PADE13[8];
    let v = z1.dot(&a6) + &a6 * PADE13[6] + &a4 * PADE13[4] + &a2 * PADE13[2] + &ident * PADE13[0];

    // exp(scaled) ~ (v - u)^-1 (v + u)
    let mut r = solve(&(&v - &u), &(&v + &u)).expect("Pade denominator is singular");
    for _ in 0..s {
        r = r.dot(&r);
    }
    r
}

/// Solves `a x = b` for the matrix `x` by Gaussian elimination with partial
/// pivoting. Returns `None` when a pivot falls below an absolute threshold
/// scaled by the matrix norm.
pub fn solve(a: &Array2<f64>, b: &Array2<f64>) -> Option<Array2<f64>> {
    let (n, m) = a.dim();
    assert_eq!(n, m, "solve needs a square matrix");
    assert_eq!(n, b.dim().0, "dimension mismatch");
    let cols = b.dim().1;
    let mut lhs = a.clone();
    let mut rhs = b.clone();
    let tiny = 1e-13 * one_norm(a).max(1.0);

    for k in 0..n {
        let mut piv = k;
        for i in (k + 1)..n {
            if lhs[[i, k]].abs() > lhs[[piv, k]].abs() {
                piv = i;
            }
        }
        if lhs[[piv, k]].abs() < tiny {
            return None;
        }
        if piv != k {
            for j in 0..n {
                lhs.swap([k, j], [piv, j]);
            }
            for j in 0..cols {
                rhs.swap([k, j], [piv, j]);
            }
        }
        for i in (k + 1)..n {
            let f = lhs[[i, k]] / lhs[[k, k]];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                lhs[[i, j]] -= f * lhs[[k, j]];
            }
            for j in 0..cols {
                rhs[[i, j]] -= f * rhs[[k, j]];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..cols {
            let mut s = rhs[[k, j]];
            for l in (k + 1)..n {
                s -= lhs[[k, l]] * rhs[[l, j]];
            }
            rhs[[k, j]] = s / lhs[[k, k]];
        }
    }
    Some(rhs)
}

/// Rank of a matrix by row echelon reduction with a relative pivot threshold.
pub fn rank(a: &Array2<f64>, rel_tol: f64) -> usize {
    let (rows, cols) = a.dim();
    let mut work = a.clone();
    let scale = one_norm(a).max(1.0);
    let tol = rel_tol * scale;
    let mut rank = 0;
    let mut row = 0;
    for col in 0..cols {
        let mut piv = row;
        for i in row..rows {
            if work[[i, col]].abs() > work[[piv, col]].abs() {
                piv = i;
            }
        }
        if row >= rows || work[[piv, col]].abs() <= tol {
            continue;
        }
        if piv != row {
            for j in 0..cols {
                work.swap([row, j], [piv, j]);
            }
        }
        for i in (row + 1)..rows {
            let f = work[[i, col]] / work[[row, col]];
            if f == 0.0 {
                continue;
            }
            for j in col..cols {
                work[[i, j]] -= f * work[[row, j]];
            }
        }
        rank += 1;
        row += 1;
    }
    rank
}
