//! Dominant-eigenvalue estimation for symmetric matrices.
//!
//! Power iteration with a seeded start vector and a Rayleigh-quotient
//! estimate. For symmetric matrices the Rayleigh quotient converges
//! quadratically in the eigenvector residual, so the returned eigenvalue is
//! far more accurate than the residual tolerance itself.

use crate::error::{ensure, Result};
use crate::numcore::matrix::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed internal seed for the start vector; a random direction is almost
/// surely not orthogonal to the dominant eigenspace, and fixing the seed
/// keeps every run bit-identical.
const START_SEED: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterationResult {
    pub lambda: f64,
    pub iterations: u32,
    pub converged: bool,
}

/// Estimate the eigenvalue of largest magnitude of a symmetric matrix.
///
/// Convergence is declared when `||A v - lambda v|| < tol` with `v` unit
/// norm. A zero (or numerically zero) matrix converges immediately to
/// `lambda = 0`. When `max_iter` runs out the best estimate is returned with
/// `converged = false`.
pub fn power_iteration(a: &DenseMatrix, max_iter: u32, tol: f64) -> Result<PowerIterationResult> {
    ensure!(
        a.rows() == a.cols(),
        "power_iteration: matrix is {}x{}, expected square",
        a.rows(),
        a.cols()
    );
    ensure!(a.rows() > 0, "power_iteration: empty matrix");
    ensure!(tol > 0.0, "power_iteration: tolerance {tol} must be positive");
    let n = a.rows();

    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);

    let mut lambda = 0.0;
    for it in 1..=max_iter {
        let w = mat_vec(a, &v);
        lambda = dot(&v, &w);
        let mut residual = 0.0;
        for i in 0..n {
            let r = w[i] - lambda * v[i];
            residual += r * r;
        }
        if residual.sqrt() < tol {
            return Ok(PowerIterationResult {
                lambda,
                iterations: it,
                converged: true,
            });
        }
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            // v is in the null space; the matrix acts as zero on it.
            return Ok(PowerIterationResult {
                lambda: 0.0,
                iterations: it,
                converged: true,
            });
        }
        v = w;
        for x in &mut v {
            *x /= norm;
        }
    }
    Ok(PowerIterationResult {
        lambda,
        iterations: max_iter,
        converged: false,
    })
}

fn mat_vec(a: &DenseMatrix, v: &[f64]) -> Vec<f64> {
    let n = a.rows();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let row = a.row(i);
        let mut s = 0.0;
        for j in 0..n {
            s += row[j] * v[j];
        }
        out[i] = s;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}
