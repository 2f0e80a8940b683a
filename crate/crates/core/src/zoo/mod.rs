//! Desk-scale teacher models, their Boolean students, datasets and
//! evaluation.

mod data;
mod layers;
mod mlp;
mod transformer;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linear::{BooleanLinear, DenseLinear, LinearOp, TrainPolicy};
use crate::optim::{AdamConfig, AdamW, LrSchedule};
use crate::tensor::DenseMatrix;
use crate::{Error, Result};

pub use data::{
    make_data, Batch, BatchInput, DataKind, Dataset, Part, Split, Target, CORPUS, FEATURE_DIM,
    REGRESSION_NOISE, TARGET_DIM,
};
pub use layers::{cross_entropy, gelu, gelu_grad, log_softmax_rows, mse, LayerNorm, Param};
pub use mlp::Mlp;
pub use transformer::{Block, Transformer, TransformerConfig};

/// Output of a forward pass: the final outputs (logits or regression values,
/// one row per position) and the intermediate states (one per block).
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub out: DenseMatrix,
    pub hidden: Vec<DenseMatrix>,
}

/// Callback receiving `(weight name, input, output)` of every designated
/// linear weight during inference.
pub type Capture<'a> = dyn FnMut(&str, &DenseMatrix, &DenseMatrix) + 'a;

/// Callback receiving `(slot, values, gradient)` for each full-precision
/// parameter.
pub type ParamVisitor<'a> = dyn FnMut(usize, &mut [f64], &[f64]) + 'a;

/// A trainable model built from designated linear weights of type `Linear`.
pub trait Network {
    type Linear: LinearOp;

    fn forward(&mut self, input: &BatchInput) -> Result<Outputs>;

    fn infer_capture(&self, input: &BatchInput, capture: &mut Capture<'_>) -> Result<Outputs>;

    fn infer(&self, input: &BatchInput) -> Result<Outputs> {
        self.infer_capture(input, &mut |_, _, _| {})
    }

    /// Backpropagates `d_out` plus optional gradients on the intermediate
    /// states, storing parameter gradients.
    fn backward(&mut self, d_out: &DenseMatrix, d_hidden: &[Option<DenseMatrix>]) -> Result<()>;

    /// Visits every full-precision parameter that has a gradient. Slots are
    /// stable for a given model.
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>);

    fn linears(&self) -> Vec<(String, &Self::Linear)>;

    fn linears_mut(&mut self) -> Vec<(String, &mut Self::Linear)>;

    /// Full-precision tensors other than the designated linear weights.
    fn fp_params(&self) -> Vec<(String, &Param)>;

    fn fp_params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn num_hidden(&self) -> usize;
}

pub(crate) fn visit_linear<L: LinearOp>(lin: &mut L, slot: &mut usize, f: &mut ParamVisitor<'_>) {
    let base = *slot;
    let mut local = 0;
    lin.visit_params(&mut |p, g| {
        f(base + local, p, g);
        local += 1;
    });
    *slot += lin.param_slots();
}

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Descriptor {
    Mlp { sizes: Vec<usize> },
    Transformer(TransformerConfig),
}

impl Descriptor {
    pub fn validate(&self) -> Result<()> {
        match self {
            Descriptor::Mlp { sizes } => {
                if sizes.len() < 2 || sizes.contains(&0) {
                    return Err(Error::invalid(
                        "an MLP needs at least two positive layer sizes",
                    ));
                }
                Ok(())
            }
            Descriptor::Transformer(c) => c.validate(),
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        match self {
            Descriptor::Mlp { sizes } => sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
            Descriptor::Transformer(c) => {
                let (d, v) = (c.d_model, c.vocab);
                let block = 4 * (d * d + d) + 2 * (4 * d * d) + 4 * d + d + 4 * d;
                v * d + c.context * d + c.n_blocks * block + 2 * d + v * d
            }
        }
    }
}

/// A model of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum Model<L> {
    Mlp(Mlp<L>),
    Transformer(Transformer<L>),
}

pub type Teacher = Model<DenseLinear>;
pub type Student = Model<BooleanLinear>;

impl<L: LinearOp> Model<L> {
    pub fn descriptor(&self) -> Descriptor {
        match self {
            Model::Mlp(m) => Descriptor::Mlp {
                sizes: m.sizes.clone(),
            },
            Model::Transformer(t) => Descriptor::Transformer(t.config),
        }
    }

    /// Rebuilds the model with every designated linear weight mapped through
    /// `f`; all other parameters are copied.
    pub fn map_linears<M: LinearOp>(
        &self,
        f: impl FnMut(&str, &L) -> Result<M>,
    ) -> Result<Model<M>> {
        Ok(match self {
            Model::Mlp(m) => Model::Mlp(m.map_linears(f)?),
            Model::Transformer(t) => Model::Transformer(t.map_linears(f)?),
        })
    }

    /// Parameter count of the source architecture: every designated weight
    /// counts as one `m×n` matrix plus its bias.
    pub fn param_count(&self) -> usize
    where
        Self: Network,
    {
        let fp: usize = self.fp_params().iter().map(|(_, p)| p.value.len()).sum();
        let lin: usize = self
            .linears()
            .iter()
            .map(|(_, l)| l.in_features() * l.out_features() + l.out_features())
            .sum();
        fp + lin
    }
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Model::Mlp($m) => $e,
            Model::Transformer($m) => $e,
        }
    };
}

impl<L: LinearOp> Network for Model<L> {
    type Linear = L;

    fn forward(&mut self, input: &BatchInput) -> Result<Outputs> {
        delegate!(self, m => m.forward(input))
    }

    fn infer_capture(&self, input: &BatchInput, capture: &mut Capture<'_>) -> Result<Outputs> {
        delegate!(self, m => m.infer_capture(input, capture))
    }

    fn backward(&mut self, d_out: &DenseMatrix, d_hidden: &[Option<DenseMatrix>]) -> Result<()> {
        delegate!(self, m => m.backward(d_out, d_hidden))
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        delegate!(self, m => m.visit_params(f))
    }

    fn linears(&self) -> Vec<(String, &L)> {
        delegate!(self, m => m.linears())
    }

    fn linears_mut(&mut self) -> Vec<(String, &mut L)> {
        delegate!(self, m => m.linears_mut())
    }

    fn fp_params(&self) -> Vec<(String, &Param)> {
        delegate!(self, m => m.fp_params())
    }

    fn fp_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        delegate!(self, m => m.fp_params_mut())
    }

    fn num_hidden(&self) -> usize {
        delegate!(self, m => m.num_hidden())
    }
}

/// Deterministically initializes a full-precision model.
pub fn build_teacher(descriptor: &Descriptor, seed: u64) -> Result<Teacher> {
    descriptor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match descriptor {
        Descriptor::Mlp { sizes } => Model::Mlp(Mlp::init(sizes, &mut rng)),
        Descriptor::Transformer(c) => Model::Transformer(Transformer::init(*c, &mut rng)),
    })
}

/// Number of kernels per designated weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KernelPlan {
    Uniform(usize),
    PerWeight(BTreeMap<String, usize>),
}

impl KernelPlan {
    pub fn kernels_for(&self, name: &str) -> Result<usize> {
        match self {
            KernelPlan::Uniform(k) => Ok(*k),
            KernelPlan::PerWeight(m) => m
                .get(name)
                .copied()
                .ok_or_else(|| Error::invalid(format!("kernel plan has no entry for '{name}'"))),
        }
    }
}

/// Replaces every designated weight by a multi-kernel Boolean layer extracted
/// from it; biases move into the Boolean layer, everything else is copied.
pub fn booleanize(teacher: &Teacher, plan: &KernelPlan, policy: &TrainPolicy) -> Result<Student> {
    if let KernelPlan::PerWeight(m) = plan {
        let names: Vec<String> = teacher.linears().into_iter().map(|(n, _)| n).collect();
        if let Some(extra) = m.keys().find(|k| !names.contains(k)) {
            return Err(Error::invalid(format!(
                "kernel plan names unknown weight '{extra}'"
            )));
        }
    }
    teacher.map_linears(|name, lin| {
        let k = plan.kernels_for(name)?;
        BooleanLinear::from_dense(&lin.weight, k, policy)?.with_bias(lin.bias.clone())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean loss per position: cross-entropy for class targets, squared
    /// error for value targets.
    pub loss: f64,
    /// `exp(loss)`.
    pub perplexity: f64,
    pub tokens: usize,
}

/// Loss and gradient of the task objective for a batch.
pub fn task_loss(out: &DenseMatrix, target: &Target) -> Result<(f64, DenseMatrix)> {
    match target {
        Target::Classes(c) => cross_entropy(out, c),
        Target::Values(y) => mse(out, y),
    }
}

/// Teacher-forced evaluation over `batches`.
pub fn evaluate<N: Network>(model: &N, batches: &[Batch]) -> Result<EvalResult> {
    let mut total = 0.0;
    let mut count = 0;
    for b in batches {
        let out = model.infer(&b.input)?.out;
        let (loss, _) = task_loss(&out, &b.target)?;
        let rows = b.input.rows();
        total += loss * rows as f64;
        count += rows;
    }
    if count == 0 {
        return Err(Error::invalid("evaluation data is empty"));
    }
    let loss = total / count as f64;
    Ok(EvalResult {
        loss,
        perplexity: loss.exp(),
        tokens: count,
    })
}

/// Teacher training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub context: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            context: 32,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains all full-precision parameters with AdamW under the warmup-cosine
/// schedule, minimizing cross-entropy or squared error.
pub fn train_teacher<N: Network>(
    model: &mut N,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let train_eval = data.batches(Part::Train, cfg.batch_size, cfg.context, None)?;
    let initial_loss = evaluate(model, &train_eval)?.loss;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = train_eval.len();
    let total = cfg.epochs * steps_per_epoch;
    let mut report = TrainReport {
        initial_loss,
        final_loss: initial_loss,
        steps: 0,
        epoch_losses: Vec::new(),
    };
    if total == 0 {
        return Ok(report);
    }
    let schedule = LrSchedule::new(cfg.lr, total)?;
    let mut adam = AdamW::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = data.batches(Part::Train, cfg.batch_size, cfg.context, Some(&mut rng))?;
        for b in &batches {
            let out = model.forward(&b.input)?.out;
            let (loss, grad) = task_loss(&out, &b.target)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: report.steps,
                    detail: format!("teacher loss {loss}"),
                });
            }
            sum += loss;
            model.backward(&grad, &[])?;
            let lr = schedule.lr_at(report.steps)?;
            adam.begin_step();
            let mut err = None;
            model.visit_params(&mut |slot, p, g| {
                if err.is_none() {
                    err = adam.update(slot, p, g, lr).err();
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            report.steps += 1;
        }
        report.epoch_losses.push(sum / batches.len() as f64);
    }
    report.final_loss = evaluate(model, &train_eval)?.loss;
    Ok(report)
}
