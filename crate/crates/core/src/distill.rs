//! Knowledge distillation from a full-precision teacher into a Boolean
//! student: logit divergences, the intermediate-state loss, and the
//! finetuning loop.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::linear::BooleanLinear;
use crate::optim::{
    bool_step, AdamConfig, AdamW, FlipAccumulator, LrSchedule, DEFAULT_BOOL_LR,
    DEFAULT_FLIP_THRESHOLD,
};
use crate::tensor::DenseMatrix;
use crate::zoo::{evaluate, log_softmax_rows, Dataset, EvalResult, Network, Outputs, Part};
use crate::{Error, Result};

/// Divergence between teacher and student output distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Divergence {
    /// `D(p_T ‖ p_S)`.
    #[default]
    ForwardKL,
    /// `D(p_S ‖ p_T)`.
    ReverseKL,
    /// Sum of the forward and reverse divergences.
    SymmetricKL,
    /// Jensen-Shannon divergence.
    JS,
    /// Total variation distance.
    TV,
}

impl Divergence {
    pub const ALL: [Divergence; 5] = [
        Divergence::ForwardKL,
        Divergence::ReverseKL,
        Divergence::SymmetricKL,
        Divergence::JS,
        Divergence::TV,
    ];
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Divergence::ForwardKL => "forward_kl",
            Divergence::ReverseKL => "reverse_kl",
            Divergence::SymmetricKL => "symmetric_kl",
            Divergence::JS => "js",
            Divergence::TV => "tv",
        })
    }
}

impl FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Divergence::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown divergence '{s}'")))
    }
}

/// Which intermediate states enter the hidden-state loss.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum HiddenSet {
    /// The output of every block.
    #[default]
    PerBlock,
    None,
    Indices(Vec<usize>),
}

impl HiddenSet {
    fn indices(&self, available: usize) -> Result<Vec<usize>> {
        match self {
            HiddenSet::PerBlock => Ok((0..available).collect()),
            HiddenSet::None => Ok(Vec::new()),
            HiddenSet::Indices(ix) => {
                if let Some(&bad) = ix.iter().find(|&&i| i >= available) {
                    return Err(Error::invalid(format!(
                        "hidden state {bad} not present (model has {available})"
                    )));
                }
                Ok(ix.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdConfig {
    pub tau: f64,
    pub gamma: f64,
    pub hidden_set: HiddenSet,
    pub divergence: Divergence,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            gamma: 10.0,
            hidden_set: HiddenSet::PerBlock,
            divergence: Divergence::ForwardKL,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Temperature softmax with the maximum subtracted before exponentiation.
pub fn softmax_tau(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax_tau"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| ((x - max) / tau).exp()).collect();
    let sum: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / sum).collect())
}

/// `ln((1 + eᵈ) / 2)`, exact zero at `d = 0`.
fn log_mean_exp1(d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else if d > 0.0 {
        d + (-d).exp().ln_1p() - std::f64::consts::LN_2
    } else {
        d.exp().ln_1p() - std::f64::consts::LN_2
    }
}

/// Divergence of one position and its gradient with respect to the tempered
/// student logits `z = s / τ`.
fn position_divergence(div: Divergence, lp: &[f64], lq: &[f64], grad: &mut [f64]) -> f64 {
    let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
    // Gradient of Σ qᵢ aᵢ-type terms: qⱼ (aⱼ − Σ q a).
    let centered = |a: &[f64], scale: f64, grad: &mut [f64]| {
        let mean: f64 = q.iter().zip(a).map(|(qi, ai)| qi * ai).sum();
        for ((g, qi), ai) in grad.iter_mut().zip(&q).zip(a) {
            *g += scale * qi * (ai - mean);
        }
    };
    let forward = |grad: &mut [f64]| -> f64 {
        let mut loss = 0.0;
        for ((g, &lpi), (&lqi, qi)) in grad.iter_mut().zip(lp).zip(lq.iter().zip(&q)) {
            let pi = lpi.exp();
            if pi > 0.0 {
                loss += pi * (lpi - lqi);
            }
            *g += qi - pi;
        }
        loss
    };
    let reverse = |grad: &mut [f64]| -> f64 {
        let a: Vec<f64> = lq.iter().zip(lp).map(|(x, y)| x - y).collect();
        centered(&a, 1.0, grad);
        q.iter().zip(&a).map(|(qi, ai)| qi * ai).sum()
    };
    match div {
        Divergence::ForwardKL => forward(grad),
        Divergence::ReverseKL => reverse(grad),
        Divergence::SymmetricKL => forward(grad) + reverse(grad),
        Divergence::JS => {
            let d: Vec<f64> = lp.iter().zip(lq).map(|(p, q)| p - q).collect();
            // log(q/m) = −L(d), log(p/m) = −L(−d).
            let log_q_m: Vec<f64> = d.iter().map(|&x| -log_mean_exp1(x)).collect();
            let mut loss = 0.0;
            for ((&lpi, qi), (&di, lqm)) in lp.iter().zip(&q).zip(d.iter().zip(&log_q_m)) {
                let pi = lpi.exp();
                if pi > 0.0 {
                    loss -= 0.5 * pi * log_mean_exp1(-di);
                }
                loss += 0.5 * qi * lqm;
            }
            centered(&log_q_m, 0.5, grad);
            loss
        }
        Divergence::TV => {
            let mut loss = 0.0;
            let s: Vec<f64> = lp
                .iter()
                .zip(&q)
                .map(|(&lpi, qi)| {
                    let diff = qi - lpi.exp();
                    loss += 0.5 * diff.abs();
                    if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            centered(&s, 0.5, grad);
            loss
        }
    }
}

/// Per-position divergences, their mean, and the gradient of the mean with
/// respect to the student logits.
pub fn kd_logits_detail(
    teacher: &DenseMatrix,
    student: &DenseMatrix,
    cfg: &KdConfig,
) -> Result<(f64, DenseMatrix, Vec<f64>)> {
    cfg.validate()?;
    if teacher.shape() != student.shape() {
        return Err(Error::shape(
            "kd_logits_loss",
            format!("{:?}", teacher.shape()),
            format!("{:?}", student.shape()),
        ));
    }
    if !teacher.is_finite() || !student.is_finite() {
        return Err(Error::NonFinite("kd_logits_loss"));
    }
    let lp = log_softmax_rows(&teacher.scale(1.0 / cfg.tau));
    let lq = log_softmax_rows(&student.scale(1.0 / cfg.tau));
    let n = teacher.rows().max(1) as f64;
    let mut grad = DenseMatrix::zeros(student.rows(), student.cols());
    let mut per = Vec::with_capacity(teacher.rows());
    for r in 0..teacher.rows() {
        // Divergences are nonnegative; rounding can leave a tiny negative sum.
        per.push(
            position_divergence(cfg.divergence, lp.row(r), lq.row(r), grad.row_mut(r)).max(0.0),
        );
    }
    let loss = per.iter().sum::<f64>() / n;
    Ok((loss, grad.scale(1.0 / (cfg.tau * n)), per))
}

/// Mean divergence over positions and its gradient with respect to the
/// student logits.
pub fn kd_logits_loss(
    teacher: &DenseMatrix,
    student: &DenseMatrix,
    cfg: &KdConfig,
) -> Result<(f64, DenseMatrix)> {
    kd_logits_detail(teacher, student, cfg).map(|(l, g, _)| (l, g))
}

/// `(1/N) Σ_{h∈H} Σ_j ‖T_h[j] − S_h[j]‖²` over the `N` positions, with its
/// gradient for every student state (`None` for unselected states).
pub fn kd_hidden_loss(
    teacher: &[DenseMatrix],
    student: &[DenseMatrix],
    hidden_set: &HiddenSet,
) -> Result<(f64, Vec<Option<DenseMatrix>>)> {
    let idx = hidden_set.indices(teacher.len().min(student.len()))?;
    let mut grads = vec![None; student.len()];
    let mut loss = 0.0;
    for &i in &idx {
        let (t, s) = (&teacher[i], &student[i]);
        let diff = s.sub(t)?;
        let n = diff.rows().max(1) as f64;
        loss += diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
        grads[i] = Some(diff.scale(2.0 / n));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KdBatchResult {
    pub loss_logits: f64,
    pub loss_is: f64,
    /// `loss_logits + γ · loss_is`.
    pub total: f64,
    /// Logit divergence at every position.
    pub per_position: Vec<f64>,
}

/// Combined distillation loss for one batch, with gradients for the student
/// logits and (already weighted by `γ`) for its intermediate states.
pub fn kd_batch(
    teacher: &Outputs,
    student: &Outputs,
    cfg: &KdConfig,
) -> Result<(KdBatchResult, DenseMatrix, Vec<Option<DenseMatrix>>)> {
    let (loss_logits, g_out, per_position) = kd_logits_detail(&teacher.out, &student.out, cfg)?;
    let (loss_is, g_hidden) = if cfg.gamma == 0.0 {
        (0.0, vec![None; student.hidden.len()])
    } else {
        kd_hidden_loss(&teacher.hidden, &student.hidden, &cfg.hidden_set)?
    };
    let g_hidden = g_hidden
        .into_iter()
        .map(|g| g.map(|g| g.scale(cfg.gamma)))
        .collect();
    Ok((
        KdBatchResult {
            loss_logits,
            loss_is,
            total: loss_logits + cfg.gamma * loss_is,
            per_position,
        },
        g_out,
        g_hidden,
    ))
}

/// Finetuning settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub kd: KdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub context: usize,
    /// Peak learning rate for full-precision parameters.
    pub lr: f64,
    /// Peak accumulation factor for Boolean weights.
    pub bool_lr: f64,
    pub weight_decay: f64,
    pub flip_threshold: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            kd: KdConfig::default(),
            epochs: 3,
            batch_size: 8,
            context: 32,
            lr: 1e-3,
            bool_lr: DEFAULT_BOOL_LR,
            weight_decay: 0.0,
            flip_threshold: DEFAULT_FLIP_THRESHOLD,
            seed: 0,
        }
    }
}

/// Optimizer state for a student: AdamW for full-precision parameters and
/// one flip accumulator per Boolean layer, both on warmup-cosine schedules.
#[derive(Debug, Clone)]
pub struct DistillOptimizer {
    pub adam: AdamW,
    pub accumulators: Vec<FlipAccumulator>,
    pub lr: LrSchedule,
    pub eta: LrSchedule,
    pub step: usize,
}

impl DistillOptimizer {
    pub fn new<S: Network<Linear = BooleanLinear>>(
        student: &S,
        cfg: &DistillConfig,
        total_steps: usize,
    ) -> Result<Self> {
        let accumulators = student
            .linears()
            .into_iter()
            .map(|(_, l)| FlipAccumulator::for_layer(l, 0.0).with_threshold(cfg.flip_threshold))
            .collect();
        Ok(Self {
            adam: AdamW::new(AdamConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            }),
            accumulators,
            lr: LrSchedule::new(cfg.lr, total_steps.max(1))?,
            eta: LrSchedule::new(cfg.bool_lr, total_steps.max(1))?,
            step: 0,
        })
    }

    /// Real values held as optimizer state: `(flip accumulators, AdamW moments)`.
    pub fn state_len(&self) -> (usize, usize) {
        (
            self.accumulators
                .iter()
                .map(FlipAccumulator::state_len)
                .sum(),
            self.adam.state_len(),
        )
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_logits: f64,
    pub loss_is: f64,
    pub flips: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_logits: f64,
    pub loss_is: f64,
    pub total: f64,
    pub flips: u64,
    pub val: EvalResult,
}

/// One student update on a batch. Returns the batch losses and the number
/// of flipped weights.
pub fn distill_step<T: Network, S: Network<Linear = BooleanLinear>>(
    teacher: &T,
    student: &mut S,
    input: &crate::zoo::BatchInput,
    opt: &mut DistillOptimizer,
    cfg: &KdConfig,
) -> Result<(KdBatchResult, u64, f64)> {
    let t = teacher.infer(input)?;
    let s = student.forward(input)?;
    let (res, g_out, g_hidden) = kd_batch(&t, &s, cfg)?;
    if !res.total.is_finite() {
        return Err(Error::Diverged {
            step: opt.step,
            detail: format!("loss_logits {} loss_is {}", res.loss_logits, res.loss_is),
        });
    }
    student.backward(&g_out, &g_hidden)?;

    let step_at = opt.step.min(opt.lr.total_steps);
    let lr = opt.lr.lr_at(step_at)?;
    let eta = opt.eta.lr_at(step_at)?;
    opt.adam.begin_step();
    let mut err = None;
    let adam = &mut opt.adam;
    student.visit_params(&mut |slot, p, g| {
        if err.is_none() {
            err = adam.update(slot, p, g, lr).err();
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    let mut flips = 0;
    for ((_, layer), acc) in student.linears_mut().into_iter().zip(&mut opt.accumulators) {
        let signals = layer.take_signals().ok_or(Error::MissingCache)?;
        acc.eta = eta;
        flips += bool_step(layer, &signals, acc)?.flipped as u64;
    }
    opt.step += 1;
    Ok((res, flips, lr))
}

/// One pass over the shuffled training split followed by validation.
pub fn distill_epoch<T: Network, S: Network<Linear = BooleanLinear>>(
    teacher: &T,
    student: &mut S,
    data: &Dataset,
    opt: &mut DistillOptimizer,
    cfg: &DistillConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    sink: &mut dyn FnMut(&StepMetrics),
) -> Result<EpochMetrics> {
    let batches = data.batches(Part::Train, cfg.batch_size, cfg.context, Some(rng))?;
    let (mut ll, mut li, mut tot, mut flips) = (0.0, 0.0, 0.0, 0);
    for b in &batches {
        let (res, f, lr) = distill_step(teacher, student, &b.input, opt, &cfg.kd)?;
        sink(&StepMetrics {
            step: opt.step,
            loss_logits: res.loss_logits,
            loss_is: res.loss_is,
            flips: f,
            lr,
        });
        ll += res.loss_logits;
        li += res.loss_is;
        tot += res.total;
        flips += f;
    }
    let n = batches.len().max(1) as f64;
    let val = evaluate(
        student,
        &data.batches(Part::Val, cfg.batch_size, cfg.context, None)?,
    )?;
    Ok(EpochMetrics {
        epoch,
        loss_logits: ll / n,
        loss_is: li / n,
        total: tot / n,
        flips,
        val,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillReport {
    pub initial_val: EvalResult,
    pub epochs: Vec<EpochMetrics>,
}

impl DistillReport {
    pub fn final_val(&self) -> EvalResult {
        self.epochs.last().map_or(self.initial_val, |e| e.val)
    }

    pub fn total_flips(&self) -> u64 {
        self.epochs.iter().map(|e| e.flips).sum()
    }
}

/// Runs `cfg.epochs` distillation epochs with freshly initialized optimizers.
pub fn distill<T: Network, S: Network<Linear = BooleanLinear>>(
    teacher: &T,
    student: &mut S,
    data: &Dataset,
    cfg: &DistillConfig,
    sink: &mut dyn FnMut(&StepMetrics),
) -> Result<DistillReport> {
    cfg.kd.validate()?;
    let val_batches = data.batches(Part::Val, cfg.batch_size, cfg.context, None)?;
    let initial_val = evaluate(student, &val_batches)?;
    let per_epoch = data
        .batches(Part::Train, cfg.batch_size, cfg.context, None)?
        .len();
    let mut opt = DistillOptimizer::new(student, cfg, cfg.epochs * per_epoch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        epochs.push(distill_epoch(
            teacher, student, data, &mut opt, cfg, e, &mut rng, sink,
        )?);
    }
    Ok(DistillReport {
        initial_val,
        epochs,
    })
}
