//! Weight importance by projection-weighted canonical correlation, and
//! kernel-count allocation under an expansion-ratio budget.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::tensor::DenseMatrix;
use crate::zoo::{BatchInput, Network};
use crate::{Error, Result};

/// Eigenvalues of the covariance below this fraction of the largest are
/// floored to it before whitening.
pub const WHITENING_FLOOR: f64 = 1e-8;
/// Slack allowed when comparing an expansion ratio against the budget.
pub const BUDGET_EPS: f64 = 1e-12;
/// Largest search space `allocate_bruteforce` accepts.
pub const BRUTEFORCE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PwccaResult {
    /// Canonical correlations in descending order, `min(n, m)` of them.
    pub rho: Vec<f64>,
    pub weighted_mean: f64,
    /// Set when either input needed eigenvalue flooring.
    pub degraded_rank: bool,
}

fn to_nalgebra(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn centered(m: &DenseMatrix) -> DMatrix<f64> {
    let mut a = to_nalgebra(m);
    for mut col in a.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    a
}

/// Orthonormal basis of the column space of centered data by symmetric
/// whitening `Q = X (XᵀX)^{-1/2}`. Returns the basis and whether any
/// eigenvalue was floored.
fn whiten(x: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let gram = x.transpose() * x;
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.max();
    if max <= 0.0 {
        return (DMatrix::zeros(x.nrows(), x.ncols()), true);
    }
    let floor = WHITENING_FLOOR * max;
    let mut degraded = false;
    let inv_sqrt = eig.eigenvalues.map(|l| {
        if l < floor {
            degraded = true;
        }
        1.0 / l.max(floor).sqrt()
    });
    let v = &eig.eigenvectors;
    let w = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose();
    (x * w, degraded)
}

/// Projection-weighted canonical correlation between the columns of `x`
/// (`d×n`) and `y` (`d×m`), with `d` samples as rows.
pub fn pwcca(x: &DenseMatrix, y: &DenseMatrix) -> Result<PwccaResult> {
    if x.rows() != y.rows() {
        return Err(Error::shape("pwcca", x.rows(), y.rows()));
    }
    let (d, n, m) = (x.rows(), x.cols(), y.cols());
    if d <= n.max(m) {
        return Err(Error::invalid(format!(
            "pwcca needs more samples than features: d={d}, n={n}, m={m}"
        )));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("pwcca"));
    }
    let xc = centered(x);
    let (qx, dx) = whiten(&xc);
    let (qy, dy) = whiten(&centered(y));
    let c = n.min(m);
    let svd = (qx.transpose() * &qy).svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut rho = Vec::with_capacity(c);
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in order.iter().take(c) {
        let r = svd.singular_values[i].clamp(0.0, 1.0);
        let h = &qx * u.column(i);
        let alpha: f64 = xc.column_iter().map(|col| h.dot(&col).abs()).sum();
        num += alpha * r;
        den += alpha;
        rho.push(r);
    }
    let weighted_mean = if den > 0.0 {
        (num / den).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(PwccaResult {
        rho,
        weighted_mean,
        degraded_rank: dx || dy,
    })
}

/// Importance `h = 1 − PWCCA(input, output)` of every designated weight,
/// probed with one inference pass over `probe`.
pub fn importance<N: Network>(model: &N, probe: &BatchInput) -> Result<Vec<(String, f64)>> {
    let mut captured: BTreeMap<String, Result<f64>> = BTreeMap::new();
    model.infer_capture(probe, &mut |name, input, output| {
        let h = pwcca(input, output).map(|r| (1.0 - r.weighted_mean).clamp(0.0, 1.0));
        captured.insert(name.to_string(), h);
    })?;
    let mut out = Vec::new();
    let mut failed = Vec::new();
    for (name, _) in model.linears() {
        match captured.remove(&name) {
            Some(Ok(h)) => out.push((name, h)),
            Some(Err(e)) => failed.push(format!("{name}: {e}")),
            None => failed.push(format!("{name}: no activations captured")),
        }
    }
    if !failed.is_empty() {
        return Err(Error::invalid(format!(
            "importance probing failed for {}",
            failed.join("; ")
        )));
    }
    Ok(out)
}

/// `ρ(k) = Σ k_l p_l`.
pub fn expansion_ratio(k: &[usize], p: &[f64]) -> Result<f64> {
    if k.len() != p.len() {
        return Err(Error::shape("expansion_ratio", p.len(), k.len()));
    }
    Ok(k.iter().zip(p).map(|(&k, &p)| k as f64 * p).sum())
}

/// Size weighting `f(p) = (1/p) ln(1/p)`.
pub fn size_weight(p: f64) -> f64 {
    if p == 1.0 {
        0.0
    } else {
        (1.0 / p) * (1.0 / p).ln()
    }
}

/// Kernel-allocation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    /// `e[l][k-1]`: residual error of weight `l` with `k` kernels.
    pub e: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub p: Vec<f64>,
    pub budget: f64,
    pub k_max: usize,
}

impl AllocationProblem {
    pub fn new(
        e: Vec<Vec<f64>>,
        h: Vec<f64>,
        p: Vec<f64>,
        budget: f64,
        k_max: usize,
    ) -> Result<Self> {
        let n = e.len();
        if n == 0 || h.len() != n || p.len() != n {
            return Err(Error::invalid(format!(
                "allocation needs matching nonempty E ({n}), h ({}), p ({})",
                h.len(),
                p.len()
            )));
        }
        if k_max == 0 {
            return Err(Error::invalid("k_max must be positive"));
        }
        if !(budget >= 1.0) || !budget.is_finite() {
            return Err(Error::invalid(format!("budget must be >= 1, got {budget}")));
        }
        for (l, row) in e.iter().enumerate() {
            if row.len() < k_max {
                return Err(Error::invalid(format!(
                    "E row {l} has {} entries, need {k_max}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid(format!(
                    "E row {l} has negative or non-finite entries"
                )));
            }
            if row.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::invalid(format!("E row {l} is not non-increasing")));
            }
        }
        if h.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("importance scores must be finite and >= 0"));
        }
        if p.iter().any(|v| !(*v > 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("size ratios must be positive and sum to 1"));
        }
        Ok(Self {
            e,
            h,
            p,
            budget,
            k_max,
        })
    }

    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    fn cost(&self, l: usize, k: usize) -> f64 {
        size_weight(self.p[l]) * self.h[l] * self.e[l][k - 1]
    }

    fn fits(&self, k: &[usize]) -> bool {
        expansion_ratio(k, &self.p).expect("lengths match") <= self.budget + BUDGET_EPS
    }
}

/// `E(k) = Σ h_l e_l[k_l] f(p_l)`.
pub fn energy(k: &[usize], problem: &AllocationProblem) -> Result<f64> {
    if k.len() != problem.len() {
        return Err(Error::shape("energy", problem.len(), k.len()));
    }
    if let Some(bad) = k.iter().find(|&&k| k == 0 || k > problem.k_max) {
        return Err(Error::invalid(format!(
            "kernel count {bad} outside 1..={}",
            problem.k_max
        )));
    }
    Ok(k.iter()
        .enumerate()
        .map(|(l, &kl)| problem.cost(l, kl))
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub k: Vec<usize>,
    pub achieved_ratio: f64,
    pub energy: f64,
}

impl Allocation {
    fn of(k: Vec<usize>, problem: &AllocationProblem) -> Result<Self> {
        Ok(Self {
            achieved_ratio: expansion_ratio(&k, &problem.p)?,
            energy: energy(&k, problem)?,
            k,
        })
    }

    /// Text manifest: one `name=k` line per weight, then the achieved ratio
    /// and energy.
    pub fn to_manifest(&self, names: &[String]) -> Result<String> {
        if names.len() != self.k.len() {
            return Err(Error::shape(
                "Allocation::to_manifest",
                self.k.len(),
                names.len(),
            ));
        }
        let mut s = String::new();
        for (n, k) in names.iter().zip(&self.k) {
            writeln!(s, "{n}={k}").expect("writing to a String");
        }
        writeln!(s, "achieved_ratio={}", self.achieved_ratio).expect("writing to a String");
        writeln!(s, "energy={}", self.energy).expect("writing to a String");
        Ok(s)
    }
}

/// Parsed allocation manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationManifest {
    pub kernels: BTreeMap<String, usize>,
    pub achieved_ratio: f64,
    pub energy: f64,
}

pub fn parse_manifest(text: &str) -> Result<AllocationManifest> {
    let mut kernels = BTreeMap::new();
    let (mut ratio, mut energy) = (None, None);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::invalid(format!("manifest line {}: expected key=value", i + 1))
        })?;
        let bad = || Error::invalid(format!("manifest line {}: bad value '{value}'", i + 1));
        match key {
            "achieved_ratio" => ratio = Some(value.parse::<f64>().map_err(|_| bad())?),
            "energy" => energy = Some(value.parse::<f64>().map_err(|_| bad())?),
            name => {
                kernels.insert(name.to_string(), value.parse::<usize>().map_err(|_| bad())?);
            }
        }
    }
    Ok(AllocationManifest {
        kernels,
        achieved_ratio: ratio.ok_or_else(|| Error::invalid("manifest lacks achieved_ratio"))?,
        energy: energy.ok_or_else(|| Error::invalid("manifest lacks energy"))?,
    })
}

/// Greedy allocation: from `k = 1`, repeatedly sort the gains of adding one
/// kernel to each weight (largest first, lowest index on ties) and apply the
/// first increment that stays within budget. Candidates that would exceed
/// the budget are dropped for good.
pub fn allocate_greedy(problem: &AllocationProblem) -> Result<Allocation> {
    let n = problem.len();
    let mut k = vec![1; n];
    let mut dropped = vec![false; n];
    loop {
        let mut cand: Vec<(usize, f64)> = (0..n)
            .filter(|&l| !dropped[l] && k[l] < problem.k_max)
            .map(|l| (l, problem.cost(l, k[l]) - problem.cost(l, k[l] + 1)))
            .collect();
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut applied = false;
        for (l, _) in cand {
            k[l] += 1;
            if problem.fits(&k) {
                applied = true;
                break;
            }
            k[l] -= 1;
            dropped[l] = true;
        }
        if !applied {
            return Allocation::of(k, problem);
        }
    }
}

/// Exact minimizer of the energy within budget by enumeration; ties go to
/// the lexicographically smallest `k`.
pub fn allocate_bruteforce(problem: &AllocationProblem) -> Result<Allocation> {
    let n = problem.len();
    let space = (problem.k_max as u64)
        .checked_pow(n as u32)
        .filter(|&s| s <= BRUTEFORCE_LIMIT);
    if space.is_none() {
        return Err(Error::invalid(format!(
            "search space {}^{n} exceeds {BRUTEFORCE_LIMIT}",
            problem.k_max
        )));
    }
    let mut k = vec![1; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if problem.fits(&k) {
            let e = energy(&k, problem)?;
            if best.as_ref().is_none_or(|(b, _)| e < *b) {
                best = Some((e, k.clone()));
            }
        }
        // Odometer increment with the last position fastest.
        let mut pos = n;
        loop {
            if pos == 0 {
                let (_, k) = best.expect("k = 1 always fits a budget >= 1");
                return Allocation::of(k, problem);
            }
            pos -= 1;
            if k[pos] < problem.k_max {
                k[pos] += 1;
                break;
            }
            k[pos] = 1;
        }
    }
}
