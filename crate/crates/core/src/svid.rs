//! Sign-value independent decomposition (SVID) and successive kernel
//! extraction.
//!
//! One SVID step splits `W` into its sign pattern `B = sign(W)` and a rank-1
//! approximation of `|W|`:
//!
//! ```text
//! |W| ≈ σ₁ u vᵀ,   s_out = √σ₁ u,   s_in = √σ₁ v,   W ≈ B ⊙ (s_out s_inᵀ)
//! ```
//!
//! Because `B ⊙ W = |W|` and `B ⊙ B = 1`, the error `‖W − B ⊙ c dᵀ‖_F` equals
//! `‖|W| − c dᵀ‖_F` for any `(c, d)`, so the leading singular pair of `|W|` is
//! the optimal envelope for the fixed sign pattern. Successive extraction
//! repeats the step on the residual.

use crate::tensor::{
    matmul_bool, norms, top_singular_triplet, BitMatrix, DenseMatrix, TripletStatus,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::{Error, Result};

/// One Boolean kernel: a sign matrix with output and input scaling vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvidKernel {
    pub bits: BitMatrix,
    pub s_out: Vec<f64>,
    pub s_in: Vec<f64>,
}

impl SvidKernel {
    pub fn new(bits: BitMatrix, s_out: Vec<f64>, s_in: Vec<f64>) -> Result<Self> {
        if s_out.len() != bits.rows() || s_in.len() != bits.cols() {
            return Err(Error::shape(
                "SvidKernel::new",
                format!("({}, {})", bits.rows(), bits.cols()),
                format!("({}, {})", s_out.len(), s_in.len()),
            ));
        }
        if s_out.iter().chain(&s_in).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("SvidKernel::new"));
        }
        Ok(Self { bits, s_out, s_in })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bits.shape()
    }

    /// `bits ⊙ (s_out s_inᵀ)`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, n) = self.shape();
        DenseMatrix::from_fn(m, n, |r, c| {
            self.bits.get(r, c).embed() * self.s_out[r] * self.s_in[c]
        })
    }

    /// `[(X ⊙ s_inᵀ) · e(bits)ᵀ] ⊙ s_outᵀ`.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let scaled = x.scale_cols(&self.s_in)?;
        matmul_bool(&scaled, &self.bits)?.scale_cols(&self.s_out)
    }
}

/// Result of one SVID step.
#[derive(Debug, Clone)]
pub struct SvidStep {
    pub kernel: SvidKernel,
    pub residual: DenseMatrix,
    /// Set when the input was the zero matrix.
    pub degenerate: bool,
    /// Set when power iteration stopped at its iteration cap.
    pub unconverged: bool,
}

/// One SVID step: kernel for `W` and the residual `W − bits ⊙ (s_out s_inᵀ)`.
pub fn svid_extract(w: &DenseMatrix) -> Result<SvidStep> {
    if w.is_empty() {
        return Err(Error::invalid("svid_extract needs a nonempty matrix"));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("svid_extract"));
    }
    let bits = BitMatrix::from_signs(w);
    let triplet = top_singular_triplet(&w.abs(), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let root = triplet.sigma.sqrt();
    let s_out: Vec<f64> = triplet.u.iter().map(|x| (root * x).max(0.0)).collect();
    let s_in: Vec<f64> = triplet.v.iter().map(|x| (root * x).max(0.0)).collect();
    let degenerate = triplet.is_degenerate();
    let kernel = if degenerate {
        SvidKernel::new(bits, vec![0.0; w.rows()], vec![0.0; w.cols()])?
    } else {
        SvidKernel::new(bits, s_out, s_in)?
    };
    let residual = w.sub(&kernel.reconstruct())?;
    Ok(SvidStep {
        kernel,
        residual,
        degenerate,
        unconverged: triplet.status == TripletStatus::MaxIterReached,
    })
}

#[derive(Debug, Clone)]
pub struct ExtractionReport {
    pub kernels: Vec<SvidKernel>,
    /// `‖W_res^[k]‖_F` after each step.
    pub residual_frobenius: Vec<f64>,
    /// `‖W_res^[k]‖₁ / ‖W‖₁` after each step (`NaN`-free: zero when `W = 0`).
    pub residual_l1_normalized: Vec<f64>,
    pub final_residual: DenseMatrix,
    /// Steps whose power iteration hit its iteration cap.
    pub unconverged_steps: Vec<usize>,
}

/// Applies SVID `k` times, each step to the residual of the previous one.
pub fn successive_extract(w: &DenseMatrix, k: usize) -> Result<ExtractionReport> {
    if k == 0 {
        return Err(Error::invalid("successive_extract needs K >= 1"));
    }
    let l1_total = norms(w).1;
    let mut kernels = Vec::with_capacity(k);
    let mut fro = Vec::with_capacity(k);
    let mut l1 = Vec::with_capacity(k);
    let mut unconverged = Vec::new();
    let mut residual = w.clone();
    for step in 0..k {
        let out = svid_extract(&residual)?;
        residual = out.residual;
        let (f, r1) = norms(&residual);
        fro.push(f);
        l1.push(if l1_total > 0.0 { r1 / l1_total } else { 0.0 });
        if out.unconverged {
            unconverged.push(step);
        }
        kernels.push(out.kernel);
    }
    Ok(ExtractionReport {
        kernels,
        residual_frobenius: fro,
        residual_l1_normalized: l1,
        final_residual: residual,
        unconverged_steps: unconverged,
    })
}

/// `Σ_k bits_k ⊙ (s_out_k s_in_kᵀ)`; an empty list gives zeros of `shape`.
pub fn reconstruct(kernels: &[SvidKernel], shape: (usize, usize)) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(shape.0, shape.1);
    for k in kernels {
        if k.shape() != shape {
            return Err(Error::shape(
                "reconstruct",
                format!("{shape:?}"),
                format!("{:?}", k.shape()),
            ));
        }
        out.add_assign(&k.reconstruct())?;
    }
    Ok(out)
}

/// `(‖W − Ŵ‖_F, ‖W − Ŵ‖₁ / ‖W‖₁)` where `Ŵ` is the kernel reconstruction.
pub fn approx_error(w: &DenseMatrix, kernels: &[SvidKernel]) -> Result<(f64, f64)> {
    let l1_total = norms(w).1;
    if l1_total == 0.0 {
        return Err(Error::invalid(
            "normalized L1 error is undefined for a zero matrix",
        ));
    }
    let diff = w.sub(&reconstruct(kernels, w.shape())?)?;
    let (f, l1) = norms(&diff);
    Ok((f, l1 / l1_total))
}
