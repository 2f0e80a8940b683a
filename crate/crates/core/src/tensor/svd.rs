//! Leading singular triplet by power iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dense::{dot, l2};
use super::DenseMatrix;
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletStatus {
    Converged {
        iterations: usize,
    },
    /// Zero matrix; the triplet is `(0, e₁, e₁)`.
    Degenerate,
    /// `max_iter` reached; the last iterate is returned.
    MaxIterReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub status: TripletStatus,
}

impl SingularTriplet {
    pub fn is_degenerate(&self) -> bool {
        self.status == TripletStatus::Degenerate
    }

    pub fn converged(&self) -> bool {
        matches!(self.status, TripletStatus::Converged { .. })
    }

    fn degenerate(m: usize, n: usize) -> Self {
        let mut u = vec![0.0; m];
        let mut v = vec![0.0; n];
        if m > 0 {
            u[0] = 1.0;
        }
        if n > 0 {
            v[0] = 1.0;
        }
        Self {
            sigma: 0.0,
            u,
            v,
            status: TripletStatus::Degenerate,
        }
    }
}

/// `M · v`.
fn mat_vec(m: &DenseMatrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|row| dot(row, v)).collect()
}

/// `Mᵀ · u`.
fn mat_t_vec(m: &DenseMatrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (row, &ui) in m.iter_rows().zip(u) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += ui * x;
        }
    }
    out
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = l2(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Leading singular triplet of a nonnegative matrix.
///
/// Alternates `v ← normalize(Mᵀu)`, `u ← normalize(Mv)` starting from the
/// all-ones vector and stops once successive σ estimates differ by less than
/// `tol · max(1, σ)` and the singular vectors have moved by less than
/// `100 · tol` (σ settles quadratically faster than the vectors). The returned
/// `u`, `v` are oriented to be nonnegative.
pub fn top_singular_triplet(m: &DenseMatrix, tol: f64, max_iter: usize) -> Result<SingularTriplet> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::invalid(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if m.as_slice().iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::invalid(
            "top_singular_triplet expects a finite nonnegative matrix",
        ));
    }
    let (rows, cols) = m.shape();
    if m.as_slice().iter().all(|&x| x == 0.0) {
        return Ok(SingularTriplet::degenerate(rows, cols));
    }

    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut u = mat_vec(m, &v);
    let mut sigma = normalize(&mut u);
    let mut status = TripletStatus::MaxIterReached;
    for it in 1..=max_iter {
        let mut v_next = mat_t_vec(m, &u);
        normalize(&mut v_next);
        let mut u_next = mat_vec(m, &v_next);
        let next = normalize(&mut u_next);
        let moved = distance(&u, &u_next) + distance(&v, &v_next);
        let delta = (next - sigma).abs();
        (u, v, sigma) = (u_next, v_next, next);
        if delta < tol * sigma.max(1.0) && moved < 100.0 * tol {
            status = TripletStatus::Converged { iterations: it };
            break;
        }
    }
    if u.iter().sum::<f64>() < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(SingularTriplet {
        sigma,
        u,
        v,
        status,
    })
}

/// Leading singular triplet of an arbitrary real matrix.
///
/// Runs power iteration on the Gram matrix `MᵀM` from a seeded Gaussian
/// start. The Gram matrix is first squared repeatedly to widen the spectral
/// gap, then plain iteration on `MᵀM` refines the vector. The sign is fixed
/// so that the largest-magnitude entry of `v` is positive.
pub fn leading_triplet_general(
    m: &DenseMatrix,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<SingularTriplet> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::invalid(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let (rows, cols) = m.shape();
    if m.as_slice().iter().all(|&x| x == 0.0) {
        return Ok(SingularTriplet::degenerate(rows, cols));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);

    let gram = super::matmul_tn(m, m)?;
    let mut sq = gram.clone();
    for _ in 0..8 {
        let s = super::norms(&sq).0;
        if s == 0.0 {
            break;
        }
        sq = sq.scale(1.0 / s);
        sq = super::matmul_nn(&sq, &sq)?;
        let v_try = mat_vec(&sq, &v);
        if l2(&v_try) == 0.0 {
            break;
        }
        v = v_try;
        normalize(&mut v);
    }

    let mut lambda = dot(&v, &mat_vec(&gram, &v));
    let mut status = TripletStatus::MaxIterReached;
    for it in 1..=max_iter {
        let mut w = mat_vec(&gram, &v);
        let next = normalize(&mut w);
        let dv = distance(&w, &v);
        v = w;
        let delta = (next - lambda).abs();
        lambda = next;
        if delta < tol * lambda.max(1.0) && dv < tol.sqrt() {
            status = TripletStatus::Converged { iterations: it };
            break;
        }
    }
    let (pos, _) = v.iter().enumerate().fold((0, 0.0f64), |acc, (i, &x)| {
        if x.abs() > acc.1 {
            (i, x.abs())
        } else {
            acc
        }
    });
    if v[pos] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let mut u = mat_vec(m, &v);
    let sigma = normalize(&mut u);
    Ok(SingularTriplet {
        sigma,
        u,
        v,
        status,
    })
}
