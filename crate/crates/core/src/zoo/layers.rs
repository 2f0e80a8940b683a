//! Full-precision building blocks shared by the zoo models.

use crate::tensor::DenseMatrix;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// A full-precision parameter tensor with the gradient from the last
/// backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: DenseMatrix,
    pub(crate) grad: Option<DenseMatrix>,
}

impl Param {
    pub fn new(value: DenseMatrix) -> Self {
        Self { value, grad: None }
    }

    pub fn grad(&self) -> Option<&DenseMatrix> {
        self.grad.as_ref()
    }

    pub(crate) fn visit(&mut self, slot: usize, f: &mut dyn FnMut(usize, &mut [f64], &[f64])) {
        if let Some(g) = &self.grad {
            f(slot, self.value.as_mut_slice(), g.as_slice());
        }
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: DenseMatrix,
    rstd: Vec<f64>,
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    cache: Option<LnCache>,
}

impl PartialEq for LayerNorm {
    fn eq(&self, other: &Self) -> bool {
        self.gamma.value == other.gamma.value && self.beta.value == other.beta.value
    }
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(DenseMatrix::filled(1, dim, 1.0)),
            beta: Param::new(DenseMatrix::zeros(1, dim)),
            cache: None,
        }
    }

    /// Copy of the parameters without gradients or cached activations.
    pub(crate) fn detached(&self) -> Self {
        Self {
            gamma: Param::new(self.gamma.value.clone()),
            beta: Param::new(self.beta.value.clone()),
            cache: None,
        }
    }

    fn normalize(x: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
        let d = x.cols() as f64;
        let mut xhat = DenseMatrix::zeros(x.rows(), x.cols());
        let mut rstd = Vec::with_capacity(x.rows());
        for (r, row) in x.iter_rows().enumerate() {
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        (xhat, rstd)
    }

    fn affine(&self, xhat: &DenseMatrix) -> DenseMatrix {
        let g = self.gamma.value.row(0);
        let b = self.beta.value.row(0);
        let mut y = xhat.clone();
        for r in 0..y.rows() {
            for ((v, gi), bi) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        y
    }

    pub fn infer(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.gamma.value.cols() {
            return Err(Error::shape("LayerNorm", self.gamma.value.cols(), x.cols()));
        }
        Ok(self.affine(&Self::normalize(x).0))
    }

    pub fn forward(&mut self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.gamma.value.cols() {
            return Err(Error::shape("LayerNorm", self.gamma.value.cols(), x.cols()));
        }
        let (xhat, rstd) = Self::normalize(x);
        let y = self.affine(&xhat);
        self.cache = Some(LnCache { xhat, rstd });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &DenseMatrix) -> Result<DenseMatrix> {
        let LnCache { xhat, rstd } = self.cache.take().ok_or(Error::MissingCache)?;
        let d = xhat.cols();
        let g = self.gamma.value.row(0).to_vec();
        let mut dgamma = vec![0.0; d];
        let mut dx = DenseMatrix::zeros(xhat.rows(), d);
        let mut dxhat = vec![0.0; d];
        for r in 0..xhat.rows() {
            let (dyr, xr) = (dy.row(r), xhat.row(r));
            for j in 0..d {
                dgamma[j] += dyr[j] * xr[j];
                dxhat[j] = dyr[j] * g[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
            }
        }
        self.gamma.grad = Some(DenseMatrix::from_vec(1, d, dgamma));
        self.beta.grad = Some(DenseMatrix::from_vec(1, d, dy.column_sums()));
        Ok(dx)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Mean cross-entropy of `logits` against class `targets`, with its gradient.
pub fn cross_entropy(logits: &DenseMatrix, targets: &[usize]) -> Result<(f64, DenseMatrix)> {
    if logits.rows() != targets.len() {
        return Err(Error::shape("cross_entropy", logits.rows(), targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::invalid(format!("target class {t} out of range")));
    }
    let n = targets.len().max(1) as f64;
    let lp = log_softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = lp.map(f64::exp);
    for (r, &t) in targets.iter().enumerate() {
        loss -= lp.get(r, t);
        grad.set(r, t, grad.get(r, t) - 1.0);
    }
    Ok((loss / n, grad.scale(1.0 / n)))
}

/// Mean squared error over all entries, with its gradient.
pub fn mse(pred: &DenseMatrix, target: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let diff = pred.sub(target)?;
    let n = diff.len().max(1) as f64;
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_output_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::from_fn(3, 5, |_, _| rng.random_range(-2.0..2.0));
        let mut ln = LayerNorm::new(5);
        ln.gamma.value = DenseMatrix::from_fn(1, 5, |_, c| 0.5 + c as f64 * 0.3);
        ln.beta.value = DenseMatrix::from_fn(1, 5, |_, c| c as f64 * 0.1);
        let w = DenseMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let objective = |ln: &LayerNorm, x: &DenseMatrix| -> f64 {
            ln.infer(x).unwrap().hadamard(&w).unwrap().sum()
        };
        ln.forward(&x).unwrap();
        let dx = ln.backward(&w).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..5 {
                let mut xp = x.clone();
                xp.set(r, c, x.get(r, c) + h);
                let mut xm = x.clone();
                xm.set(r, c, x.get(r, c) - h);
                let fd = (objective(&ln, &xp) - objective(&ln, &xm)) / (2.0 * h);
                assert!((fd - dx.get(r, c)).abs() < 1e-6, "{fd} vs {}", dx.get(r, c));
            }
        }
        for c in 0..5 {
            let mut lp = ln.clone();
            lp.gamma.value.set(0, c, ln.gamma.value.get(0, c) + h);
            let mut lm = ln.clone();
            lm.gamma.value.set(0, c, ln.gamma.value.get(0, c) - h);
            let fd = (objective(&lp, &x) - objective(&lm, &x)) / (2.0 * h);
            assert!((fd - ln.gamma.grad().unwrap().get(0, c)).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, grad) = cross_entropy(&DenseMatrix::zeros(2, 4), &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((grad.get(0, 0) + 0.375).abs() < 1e-15);
        assert!(cross_entropy(&DenseMatrix::zeros(1, 4), &[4]).is_err());
    }

    #[test]
    fn mse_value_and_gradient() {
        let p = DenseMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let t = DenseMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let (l, g) = mse(&p, &t).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
    }
}
