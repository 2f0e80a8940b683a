//! Optimizers: the flip-based Boolean optimizer, AdamW for full-precision
//! parameters, and the warmup-cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::linear::{BackwardSignals, BooleanLinear};
use crate::logic::flip_decision;
use crate::tensor::DenseMatrix;
use crate::{Error, Result};

/// Default accumulation factor for Boolean weights.
pub const DEFAULT_BOOL_LR: f64 = 1.0;
/// Default minimum accumulator magnitude required for a flip.
pub const DEFAULT_FLIP_THRESHOLD: f64 = 1.0;

/// Per-layer accumulator state of the Boolean optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipAccumulator {
    /// One accumulator matrix per trainable kernel, keyed by kernel index.
    pub m: Vec<(usize, DenseMatrix)>,
    pub beta: f64,
    pub eta: f64,
    /// A weight flips only when `|M| >= threshold` and the signs agree.
    /// Zero gives the bare sign-agreement rule.
    pub threshold: f64,
}

impl FlipAccumulator {
    pub fn for_layer(layer: &BooleanLinear, eta: f64) -> Self {
        let (rows, cols) = layer.shape();
        Self {
            m: layer
                .trainable_kernels()
                .iter()
                .map(|&k| (k, DenseMatrix::zeros(rows, cols)))
                .collect(),
            beta: 1.0,
            eta,
            threshold: DEFAULT_FLIP_THRESHOLD,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn accumulator(&self, kernel: usize) -> Option<&DenseMatrix> {
        self.m.iter().find(|(k, _)| *k == kernel).map(|(_, m)| m)
    }

    /// Number of real values held as optimizer state.
    pub fn state_len(&self) -> usize {
        self.m.iter().map(|(_, m)| m.len()).sum()
    }
}

/// Outcome of one Boolean optimizer step on a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipReport {
    /// Flips per trainable kernel, keyed by kernel index.
    pub per_kernel: Vec<(usize, usize)>,
    pub flipped: usize,
    pub total: usize,
    /// `β` for the next step.
    pub beta: f64,
}

/// Accumulates `M ← βM + ηQ` for every trainable weight, flips weights whose
/// accumulator agrees in sign with them (and reaches the threshold), resets
/// the accumulator of flipped weights, then sets `β = N_unchanged / N_total`.
pub fn bool_step(
    layer: &mut BooleanLinear,
    signals: &BackwardSignals,
    state: &mut FlipAccumulator,
) -> Result<FlipReport> {
    for (k, q) in &signals.q {
        let m = state
            .accumulator(*k)
            .ok_or_else(|| Error::invalid(format!("no accumulator for kernel {k}")))?;
        if q.shape() != m.shape() {
            return Err(Error::shape(
                "bool_step",
                format!("{:?}", m.shape()),
                format!("{:?}", q.shape()),
            ));
        }
        if !q.is_finite() {
            return Err(Error::NonFinite("bool_step: Q"));
        }
    }
    if !state.eta.is_finite() || !state.beta.is_finite() {
        return Err(Error::NonFinite("bool_step: eta or beta"));
    }

    let (beta, eta, threshold) = (state.beta, state.eta, state.threshold);
    let mut per_kernel = Vec::with_capacity(signals.q.len());
    let mut total = 0;
    for (k, q) in &signals.q {
        let m = &mut state
            .m
            .iter_mut()
            .find(|(idx, _)| idx == k)
            .expect("checked above")
            .1;
        let cols = m.cols();
        let bits = layer.kernel_bits_mut(*k);
        let mut flipped = 0;
        for (idx, (acc, &qv)) in m.as_mut_slice().iter_mut().zip(q.as_slice()).enumerate() {
            let (r, c) = (idx / cols, idx % cols);
            *acc = beta * *acc + eta * qv;
            if acc.abs() >= threshold && flip_decision(*acc, bits.get(r, c)) {
                bits.flip(r, c);
                *acc = 0.0;
                flipped += 1;
            }
        }
        total += q.len();
        layer.record_flips(*k, flipped as u64);
        per_kernel.push((*k, flipped));
    }
    let flipped: usize = per_kernel.iter().map(|(_, f)| f).sum();
    if total > 0 {
        state.beta = (total - flipped) as f64 / total as f64;
    }
    Ok(FlipReport {
        per_kernel,
        flipped,
        total,
        beta: state.beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW state over an ordered list of parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Number of real values held as optimizer state.
    pub fn state_len(&self) -> usize {
        self.first.iter().chain(&self.second).map(Vec::len).sum()
    }

    /// Advances the step counter; call once before the slot updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter slot with learning rate `lr`. Moments are created
    /// on first use of a slot.
    pub fn update(
        &mut self,
        slot: usize,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam_step", params.len(), grads.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adam_step: gradient"));
        }
        if self.step == 0 {
            return Err(Error::invalid("AdamW::update called before begin_step"));
        }
        while self.first.len() <= slot {
            self.first.push(Vec::new());
            self.second.push(Vec::new());
        }
        if self.first[slot].is_empty() {
            self.first[slot] = vec![0.0; params.len()];
            self.second[slot] = vec![0.0; params.len()];
        }
        if self.first[slot].len() != params.len() {
            return Err(Error::shape(
                "adam_step moments",
                self.first[slot].len(),
                params.len(),
            ));
        }
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            params[i] -= lr * c.weight_decay * params[i];
            params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
        }
        Ok(())
    }
}

/// One AdamW step over all slots at the configured learning rate.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamW) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("adam_step slots", params.len(), grads.len()));
    }
    if grads.iter().flat_map(|g| g.iter()).any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam_step: gradient"));
    }
    state.begin_step();
    let lr = state.config.lr;
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(slot, p, g, lr)?;
    }
    Ok(())
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Result<Self> {
        Self::with_warmup(max_lr, 0.03, total_steps)
    }

    pub fn with_warmup(max_lr: f64, warmup_fraction: f64, total_steps: usize) -> Result<Self> {
        if !max_lr.is_finite() || max_lr < 0.0 {
            return Err(Error::invalid(format!(
                "max_lr must be finite and >= 0, got {max_lr}"
            )));
        }
        if !(0.0..=1.0).contains(&warmup_fraction) {
            return Err(Error::invalid(format!(
                "warmup_fraction must lie in [0, 1], got {warmup_fraction}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::invalid("total_steps must be positive"));
        }
        Ok(Self {
            max_lr,
            warmup_fraction,
            total_steps,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        let w = (self.warmup_fraction * self.total_steps as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize;
        w.min(self.total_steps)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps();
        if step < warmup {
            return Ok(self.max_lr * step as f64 / warmup as f64);
        }
        let decay = self.total_steps - warmup;
        if decay == 0 {
            return Ok(0.0);
        }
        let progress = (step - warmup) as f64 / decay as f64;
        Ok(self.max_lr * (1.0 + (PI * progress).cos()) / 2.0)
    }
}
