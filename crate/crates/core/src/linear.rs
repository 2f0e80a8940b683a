//! Linear layers: the full-precision reference layer and the multi-kernel
//! Boolean layer.
//!
//! Both use the `m out × n in` weight orientation with `Y = X Wᵀ + b`.

use std::collections::BTreeSet;

use crate::svid::{successive_extract, SvidKernel};
use crate::tensor::{matmul_bool, matmul_bool_t, matmul_dense, matmul_nn, matmul_tn, DenseMatrix};
use crate::{Error, Result};

/// Common interface the model code is written against.
pub trait LinearOp {
    fn in_features(&self) -> usize;
    fn out_features(&self) -> usize;

    /// Training forward pass; caches what `backward_input` needs.
    fn forward(&mut self, x: &DenseMatrix) -> Result<DenseMatrix>;

    /// Inference forward pass without caching.
    fn infer(&self, x: &DenseMatrix) -> Result<DenseMatrix>;

    /// Consumes the forward cache, stores parameter gradients, and returns
    /// `∂L/∂X`.
    fn backward_input(&mut self, dy: &DenseMatrix) -> Result<DenseMatrix>;

    /// Visits every full-precision trainable parameter with its gradient from
    /// the last backward pass, in a fixed order. Parameters without a pending
    /// gradient are skipped.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64]));

    /// Number of full-precision trainable parameter tensors `visit_params`
    /// can yield.
    fn param_slots(&self) -> usize;
}

/// Full-precision linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLinear {
    pub weight: DenseMatrix,
    pub bias: Option<Vec<f64>>,
    grad_weight: Option<DenseMatrix>,
    grad_bias: Option<Vec<f64>>,
    cache: Option<DenseMatrix>,
}

impl DenseLinear {
    pub fn new(weight: DenseMatrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::shape("DenseLinear::new", weight.rows(), b.len()));
            }
        }
        Ok(Self {
            weight,
            bias,
            grad_weight: None,
            grad_bias: None,
            cache: None,
        })
    }

    pub fn grad_weight(&self) -> Option<&DenseMatrix> {
        self.grad_weight.as_ref()
    }
}

impl LinearOp for DenseLinear {
    fn in_features(&self) -> usize {
        self.weight.cols()
    }

    fn out_features(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&mut self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut y = matmul_dense(x, &self.weight)?;
        if let Some(b) = &self.bias {
            y.add_row_vector(b)?;
        }
        Ok(y)
    }

    fn backward_input(&mut self, dy: &DenseMatrix) -> Result<DenseMatrix> {
        let x = self.cache.take().ok_or(Error::MissingCache)?;
        if dy.shape() != (x.rows(), self.out_features()) {
            return Err(Error::shape(
                "DenseLinear::backward",
                format!("({}, {})", x.rows(), self.out_features()),
                format!("{:?}", dy.shape()),
            ));
        }
        self.grad_weight = Some(matmul_tn(dy, &x)?);
        self.grad_bias = self.bias.as_ref().map(|_| dy.column_sums());
        matmul_nn(dy, &self.weight)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        if let Some(g) = &self.grad_weight {
            f(self.weight.as_mut_slice(), g.as_slice());
        }
        if let (Some(b), Some(g)) = (self.bias.as_mut(), self.grad_bias.as_ref()) {
            f(b, g);
        }
    }

    fn param_slots(&self) -> usize {
        1 + usize::from(self.bias.is_some())
    }
}

/// Which kernels' Boolean weights receive flip updates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TrainPolicy {
    /// Only the last (highest-order) kernel.
    #[default]
    LastOnly,
    All,
    /// Explicit zero-based kernel indices.
    Set(BTreeSet<usize>),
}

impl TrainPolicy {
    pub fn resolve(&self, num_kernels: usize) -> Result<BTreeSet<usize>> {
        match self {
            TrainPolicy::LastOnly => Ok(num_kernels.checked_sub(1).into_iter().collect()),
            TrainPolicy::All => Ok((0..num_kernels).collect()),
            TrainPolicy::Set(s) => {
                if let Some(&bad) = s.iter().find(|&&k| k >= num_kernels) {
                    return Err(Error::invalid(format!(
                        "trainable kernel {bad} out of range for {num_kernels} kernels"
                    )));
                }
                Ok(s.clone())
            }
        }
    }
}

/// Signals produced by one backward pass of a [`BooleanLinear`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSignals {
    /// Weight variation `Q` (m×n) for each trainable kernel, keyed by kernel
    /// index.
    pub q: Vec<(usize, DenseMatrix)>,
    /// Upstream signal `∂L/∂X` (b×n), summed over all kernels.
    pub p: DenseMatrix,
    pub grad_s_out: Vec<Vec<f64>>,
    pub grad_s_in: Vec<Vec<f64>>,
    pub grad_bias: Option<Vec<f64>>,
}

impl BackwardSignals {
    pub fn q_for(&self, kernel: usize) -> Option<&DenseMatrix> {
        self.q.iter().find(|(k, _)| *k == kernel).map(|(_, q)| q)
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    x: DenseMatrix,
    /// `X ⊙ s_inᵀ` per kernel.
    scaled_in: Vec<DenseMatrix>,
    /// `(X ⊙ s_inᵀ) · e(bits)ᵀ` per kernel, before output scaling.
    unscaled_out: Vec<DenseMatrix>,
}

/// Multi-kernel Boolean linear layer:
/// `Y = Σ_k [(X ⊙ s_in_kᵀ) · e(B_k)ᵀ] ⊙ s_out_kᵀ + b`.
#[derive(Debug, Clone)]
pub struct BooleanLinear {
    kernels: Vec<SvidKernel>,
    pub bias: Option<Vec<f64>>,
    trainable: BTreeSet<usize>,
    /// Whether the scaling vectors are exposed to the full-precision
    /// optimizer.
    pub train_scales: bool,
    cache: Option<ForwardCache>,
    pending: Option<BackwardSignals>,
    flips: Vec<u64>,
}

impl PartialEq for BooleanLinear {
    fn eq(&self, other: &Self) -> bool {
        self.kernels == other.kernels
            && self.bias == other.bias
            && self.trainable == other.trainable
            && self.train_scales == other.train_scales
    }
}

impl BooleanLinear {
    pub fn new(
        kernels: Vec<SvidKernel>,
        bias: Option<Vec<f64>>,
        policy: &TrainPolicy,
    ) -> Result<Self> {
        let first = kernels
            .first()
            .ok_or_else(|| Error::invalid("a Boolean layer needs at least one kernel"))?;
        let shape = first.shape();
        if let Some(k) = kernels.iter().find(|k| k.shape() != shape) {
            return Err(Error::shape(
                "BooleanLinear::new",
                format!("{shape:?}"),
                format!("{:?}", k.shape()),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != shape.0 {
                return Err(Error::shape("BooleanLinear::new bias", shape.0, b.len()));
            }
        }
        let trainable = policy.resolve(kernels.len())?;
        let flips = vec![0; kernels.len()];
        Ok(Self {
            kernels,
            bias,
            trainable,
            train_scales: true,
            cache: None,
            pending: None,
            flips,
        })
    }

    /// Successively extracts `k` kernels from `w`.
    pub fn from_dense(w: &DenseMatrix, k: usize, policy: &TrainPolicy) -> Result<Self> {
        let report = successive_extract(w, k)?;
        Self::new(report.kernels, None, policy)
    }

    pub fn with_bias(mut self, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != self.out_features() {
                return Err(Error::shape(
                    "BooleanLinear::with_bias",
                    self.out_features(),
                    b.len(),
                ));
            }
        }
        self.bias = bias;
        Ok(self)
    }

    pub fn kernels(&self) -> &[SvidKernel] {
        &self.kernels
    }

    /// Mutable kernel access; clears any pending forward cache.
    pub fn kernels_mut(&mut self) -> &mut [SvidKernel] {
        self.cache = None;
        &mut self.kernels
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.kernels[0].shape()
    }

    pub fn trainable_kernels(&self) -> &BTreeSet<usize> {
        &self.trainable
    }

    pub fn set_policy(&mut self, policy: &TrainPolicy) -> Result<()> {
        self.trainable = policy.resolve(self.kernels.len())?;
        Ok(())
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Dense equivalent `Σ_k bits_k ⊙ (s_out_k s_in_kᵀ)`.
    pub fn effective_weight(&self) -> DenseMatrix {
        crate::svid::reconstruct(&self.kernels, self.shape()).expect("kernels share a shape")
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.in_features() {
            return Err(Error::shape(
                "BooleanLinear::forward",
                self.in_features(),
                x.cols(),
            ));
        }
        Ok(())
    }

    fn forward_parts(&self, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        self.check_input(x)?;
        let mut y = DenseMatrix::zeros(x.rows(), self.out_features());
        let mut scaled_in = Vec::with_capacity(self.kernels.len());
        let mut unscaled_out = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            let xs = x.scale_cols(&k.s_in)?;
            let u = matmul_bool(&xs, &k.bits)?;
            y.add_assign(&u.scale_cols(&k.s_out)?)?;
            scaled_in.push(xs);
            unscaled_out.push(u);
        }
        if let Some(b) = &self.bias {
            y.add_row_vector(b)?;
        }
        Ok((
            y,
            ForwardCache {
                x: x.clone(),
                scaled_in,
                unscaled_out,
            },
        ))
    }

    /// Boolean backward pass for the upstream gradient `z = ∂L/∂Y`.
    ///
    /// For every trainable kernel `Q_k = (Z ⊙ s_out_kᵀ)ᵀ (X ⊙ s_in_kᵀ)`, which is
    /// the batch aggregation of the atomic signals `xnor(Z, X̃)`. `P` sums the
    /// contributions of all kernels. Clears the forward cache.
    pub fn backward(&mut self, z: &DenseMatrix) -> Result<BackwardSignals> {
        let cache = self.cache.take().ok_or(Error::MissingCache)?;
        if z.shape() != (cache.x.rows(), self.out_features()) {
            return Err(Error::shape(
                "BooleanLinear::backward",
                format!("({}, {})", cache.x.rows(), self.out_features()),
                format!("{:?}", z.shape()),
            ));
        }
        let n = self.in_features();
        let mut p = DenseMatrix::zeros(z.rows(), n);
        let mut q = Vec::with_capacity(self.trainable.len());
        let mut grad_s_out = Vec::with_capacity(self.kernels.len());
        let mut grad_s_in = Vec::with_capacity(self.kernels.len());
        for (idx, k) in self.kernels.iter().enumerate() {
            let zs = z.scale_cols(&k.s_out)?;
            if self.trainable.contains(&idx) {
                q.push((idx, matmul_tn(&zs, &cache.scaled_in[idx])?));
            }
            let g = matmul_bool_t(&zs, &k.bits)?;
            let mut gs_in = vec![0.0; n];
            for (gr, xr) in g.iter_rows().zip(cache.x.iter_rows()) {
                for ((acc, gv), xv) in gs_in.iter_mut().zip(gr).zip(xr) {
                    *acc += gv * xv;
                }
            }
            let mut gs_out = vec![0.0; self.out_features()];
            for (zr, ur) in z.iter_rows().zip(cache.unscaled_out[idx].iter_rows()) {
                for ((acc, zv), uv) in gs_out.iter_mut().zip(zr).zip(ur) {
                    *acc += zv * uv;
                }
            }
            p.add_assign(&g.scale_cols(&k.s_in)?)?;
            grad_s_in.push(gs_in);
            grad_s_out.push(gs_out);
        }
        Ok(BackwardSignals {
            q,
            p,
            grad_s_out,
            grad_s_in,
            grad_bias: self.bias.as_ref().map(|_| z.column_sums()),
        })
    }

    /// Signals stored by the last [`LinearOp::backward_input`] call.
    pub fn pending_signals(&self) -> Option<&BackwardSignals> {
        self.pending.as_ref()
    }

    pub fn take_signals(&mut self) -> Option<BackwardSignals> {
        self.pending.take()
    }

    /// Per-kernel flip counters since the last reset, and the total number of
    /// Boolean weights in the layer.
    pub fn flip_stats(&self) -> (Vec<u64>, usize) {
        let (m, n) = self.shape();
        (self.flips.clone(), m * n * self.kernels.len())
    }

    pub fn reset_flip_stats(&mut self) {
        self.flips.iter_mut().for_each(|f| *f = 0);
    }

    pub(crate) fn record_flips(&mut self, kernel: usize, count: u64) {
        self.flips[kernel] += count;
    }

    pub(crate) fn kernel_bits_mut(&mut self, kernel: usize) -> &mut crate::tensor::BitMatrix {
        &mut self.kernels[kernel].bits
    }
}

impl LinearOp for BooleanLinear {
    fn in_features(&self) -> usize {
        self.shape().1
    }

    fn out_features(&self) -> usize {
        self.shape().0
    }

    fn forward(&mut self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let (y, cache) = self.forward_parts(x)?;
        self.cache = Some(cache);
        Ok(y)
    }

    fn infer(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(x)?;
        let mut y = DenseMatrix::zeros(x.rows(), self.out_features());
        for k in &self.kernels {
            y.add_assign(&k.apply(x)?)?;
        }
        if let Some(b) = &self.bias {
            y.add_row_vector(b)?;
        }
        Ok(y)
    }

    fn backward_input(&mut self, dy: &DenseMatrix) -> Result<DenseMatrix> {
        let signals = self.backward(dy)?;
        let p = signals.p.clone();
        self.pending = Some(signals);
        Ok(p)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &[f64])) {
        let Some(sig) = self.pending.as_ref() else {
            return;
        };
        if self.train_scales {
            for (k, kernel) in self.kernels.iter_mut().enumerate() {
                f(&mut kernel.s_out, &sig.grad_s_out[k]);
                f(&mut kernel.s_in, &sig.grad_s_in[k]);
            }
        }
        if let (Some(b), Some(g)) = (self.bias.as_mut(), sig.grad_bias.as_ref()) {
            f(b, g);
        }
    }

    fn param_slots(&self) -> usize {
        2 * self.kernels.len() + usize::from(self.bias.is_some())
    }
}
