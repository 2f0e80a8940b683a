//! Flat `key = value` run configuration.
//!
//! Blank lines and text after `#` are ignored. Unknown keys are rejected.
//! Relative paths are resolved against `out`.
//!
//! | key                  | default        | meaning                                               |
//! |----------------------|----------------|-------------------------------------------------------|
//! | `seed`               | `0`            | seeds data, initialization, shuffling and probes      |
//! | `out`                | `.`            | working directory for every path below                |
//! | `data`               | `char_lm`      | `regression`, `classification` or `char_lm`           |
//! | `data_size`          | `9529`         | samples, or corpus bytes for `char_lm`                |
//! | `arch`               | `transformer`  | `mlp` or `transformer`                                |
//! | `mlp_hidden`         | `32`           | comma-separated hidden widths of the MLP              |
//! | `d_model`            | `32`           | transformer width                                     |
//! | `n_blocks`           | `2`            | transformer blocks                                    |
//! | `n_heads`            | `4`            | attention heads                                       |
//! | `context`            | `32`           | sequence length for batching and position embeddings  |
//! | `teacher_epochs`     | `8`            | teacher training epochs                               |
//! | `teacher_batch_size` | `16`           |                                                       |
//! | `teacher_lr`         | `0.003`        | peak AdamW learning rate for the teacher              |
//! | `kernels`            | `2`            | uniform kernel count per weight                       |
//! | `plan`               | `uniform`      | `uniform` or `allocation` (read the allocation file)  |
//! | `budget`             | `2`            | expansion-ratio budget `T` for `allocate`             |
//! | `k_max`              | `8`            | columns of the residual table, cap for allocation     |
//! | `probe_samples`      | `128`          | examples in the importance probe                      |
//! | `normalize_residuals`| `true`         | divide residual norms by `‖W‖_F`                      |
//! | `tau`                | `1`            | distillation temperature                              |
//! | `gamma`              | `10`           | intermediate-state loss weight                        |
//! | `divergence`         | `forward_kl`   | `forward_kl`, `reverse_kl`, `symmetric_kl`, `js`, `tv`|
//! | `hidden`             | `per_block`    | `per_block` or `none`                                 |
//! | `train_policy`       | `last`         | `last`, `all`, or comma-separated kernel indices      |
//! | `train_scales`       | `true`         | train the scale vectors alongside the bits            |
//! | `epochs`             | `3`            | distillation epochs                                   |
//! | `batch_size`         | `8`            | distillation and evaluation batch size                |
//! | `lr`                 | `0.001`        | peak AdamW learning rate during distillation          |
//! | `bool_lr`            | `1`            | peak accumulation factor for Boolean weights          |
//! | `weight_decay`       | `0`            |                                                       |
//! | `flip_threshold`     | `1`            | accumulator magnitude needed for a flip               |
//! | `teacher`            | `teacher`      | teacher checkpoint directory                          |
//! | `student`            | `student`      | extracted student checkpoint directory                |
//! | `distilled`          | `distilled`    | finetuned checkpoint directory                        |
//! | `model`              | `distilled`    | checkpoint evaluated by `eval`                        |
//! | `residuals`          | `residuals.tsv`| residual table                                        |
//! | `allocation`         | `allocation.txt`| allocation manifest                                  |
//! | `metrics`            | `metrics.jsonl`| distillation log                                      |
//! | `bench_sizes`        | `64,128,256`   | square weight sizes timed by `bench`                  |
//! | `bench_batch`        | `32`           | input rows per timed product                          |
//! | `bench_repeats`      | `7`            | timings per size; the median is reported              |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use mbk_core::distill::{DistillConfig, Divergence, HiddenSet, KdConfig};
use mbk_core::linear::TrainPolicy;
use mbk_core::zoo::{
    DataKind, Dataset, Descriptor, TrainConfig, TransformerConfig, FEATURE_DIM, TARGET_DIM,
};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanSource {
    Uniform,
    Allocation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataKind,
    pub data_size: usize,
    pub arch: Arch,
    pub mlp_hidden: Vec<usize>,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub context: usize,
    pub teacher_epochs: usize,
    pub teacher_batch_size: usize,
    pub teacher_lr: f64,
    pub kernels: usize,
    pub plan: PlanSource,
    pub budget: f64,
    pub k_max: usize,
    pub probe_samples: usize,
    pub normalize_residuals: bool,
    pub tau: f64,
    pub gamma: f64,
    pub divergence: Divergence,
    pub hidden: HiddenSet,
    pub train_policy: TrainPolicy,
    pub train_scales: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub bool_lr: f64,
    pub weight_decay: f64,
    pub flip_threshold: f64,
    pub teacher: PathBuf,
    pub student: PathBuf,
    pub distilled: PathBuf,
    pub model: PathBuf,
    pub residuals: PathBuf,
    pub allocation: PathBuf,
    pub metrics: PathBuf,
    pub bench_sizes: Vec<usize>,
    pub bench_batch: usize,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("."),
            data: DataKind::CharLm,
            data_size: 9529,
            arch: Arch::Transformer,
            mlp_hidden: vec![32],
            d_model: 32,
            n_blocks: 2,
            n_heads: 4,
            context: 32,
            teacher_epochs: 8,
            teacher_batch_size: 16,
            teacher_lr: 3e-3,
            kernels: 2,
            plan: PlanSource::Uniform,
            budget: 2.0,
            k_max: 8,
            probe_samples: 128,
            normalize_residuals: true,
            tau: d.kd.tau,
            gamma: d.kd.gamma,
            divergence: d.kd.divergence,
            hidden: HiddenSet::PerBlock,
            train_policy: TrainPolicy::LastOnly,
            train_scales: true,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            bool_lr: d.bool_lr,
            weight_decay: d.weight_decay,
            flip_threshold: d.flip_threshold,
            teacher: PathBuf::from("teacher"),
            student: PathBuf::from("student"),
            distilled: PathBuf::from("distilled"),
            model: PathBuf::from("distilled"),
            residuals: PathBuf::from("residuals.tsv"),
            allocation: PathBuf::from("allocation.txt"),
            metrics: PathBuf::from("metrics.jsonl"),
            bench_sizes: vec![64, 128, 256],
            bench_batch: 32,
            bench_repeats: 7,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::validation(format!("bad value for '{key}': '{value}'")))
}

fn parse_list(key: &str, value: &str) -> CliResult<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::validation(format!(
            "bad value for '{key}': '{value}'"
        ))),
    }
}

fn parse_policy(value: &str) -> CliResult<TrainPolicy> {
    match value {
        "last" => Ok(TrainPolicy::LastOnly),
        "all" => Ok(TrainPolicy::All),
        list => Ok(TrainPolicy::Set(
            parse_list("train_policy", list)?.into_iter().collect(),
        )),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::validation(format!("line {}: expected key = value", i + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = DataKind::from_str(v)?,
            "data_size" => self.data_size = parse(key, v)?,
            "arch" => {
                self.arch = match v {
                    "mlp" => Arch::Mlp,
                    "transformer" => Arch::Transformer,
                    _ => return Err(CliError::validation(format!("unknown arch '{v}'"))),
                }
            }
            "mlp_hidden" => self.mlp_hidden = parse_list(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_blocks" => self.n_blocks = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "context" => self.context = parse(key, v)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, v)?,
            "teacher_batch_size" => self.teacher_batch_size = parse(key, v)?,
            "teacher_lr" => self.teacher_lr = parse(key, v)?,
            "kernels" => self.kernels = parse(key, v)?,
            "plan" => {
                self.plan = match v {
                    "uniform" => PlanSource::Uniform,
                    "allocation" => PlanSource::Allocation,
                    _ => return Err(CliError::validation(format!("unknown plan '{v}'"))),
                }
            }
            "budget" => self.budget = parse(key, v)?,
            "k_max" => self.k_max = parse(key, v)?,
            "probe_samples" => self.probe_samples = parse(key, v)?,
            "normalize_residuals" => self.normalize_residuals = parse_bool(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "divergence" => self.divergence = Divergence::from_str(v)?,
            "hidden" => {
                self.hidden = match v {
                    "per_block" => HiddenSet::PerBlock,
                    "none" => HiddenSet::None,
                    _ => return Err(CliError::validation(format!("unknown hidden set '{v}'"))),
                }
            }
            "train_policy" => self.train_policy = parse_policy(v)?,
            "train_scales" => self.train_scales = parse_bool(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "bool_lr" => self.bool_lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "flip_threshold" => self.flip_threshold = parse(key, v)?,
            "teacher" => self.teacher = PathBuf::from(v),
            "student" => self.student = PathBuf::from(v),
            "distilled" => self.distilled = PathBuf::from(v),
            "model" => self.model = PathBuf::from(v),
            "residuals" => self.residuals = PathBuf::from(v),
            "allocation" => self.allocation = PathBuf::from(v),
            "metrics" => self.metrics = PathBuf::from(v),
            "bench_sizes" => self.bench_sizes = parse_list(key, v)?,
            "bench_batch" => self.bench_batch = parse(key, v)?,
            "bench_repeats" => self.bench_repeats = parse(key, v)?,
            _ => return Err(CliError::validation(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let positive = [
            ("data_size", self.data_size),
            ("context", self.context),
            ("teacher_batch_size", self.teacher_batch_size),
            ("kernels", self.kernels),
            ("k_max", self.k_max),
            ("probe_samples", self.probe_samples),
            ("batch_size", self.batch_size),
            ("bench_batch", self.bench_batch),
            ("bench_repeats", self.bench_repeats),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::validation(format!("'{key}' must be positive")));
        }
        let reals = [
            ("teacher_lr", self.teacher_lr),
            ("budget", self.budget),
            ("lr", self.lr),
            ("bool_lr", self.bool_lr),
            ("weight_decay", self.weight_decay),
            ("flip_threshold", self.flip_threshold),
            ("gamma", self.gamma),
        ];
        if let Some((key, _)) = reals.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(CliError::validation(format!(
                "'{key}' must be finite and non-negative"
            )));
        }
        if self.bench_sizes.contains(&0) {
            return Err(CliError::validation(
                "'bench_sizes' entries must be positive",
            ));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(CliError::validation(
                "'mlp_hidden' entries must be positive",
            ));
        }
        self.kd().validate()?;
        Ok(())
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.out.join(p)
    }

    /// Model descriptor implied by the configuration and the dataset.
    pub fn descriptor(&self, data: &Dataset) -> CliResult<Descriptor> {
        let desc = match (self.arch, data.kind) {
            (Arch::Mlp, DataKind::CharLm) => {
                return Err(CliError::validation(
                    "the MLP needs regression or classification data",
                ))
            }
            (Arch::Transformer, DataKind::Regression | DataKind::Classification) => {
                return Err(CliError::validation("the transformer needs char_lm data"))
            }
            (Arch::Mlp, _) => {
                let mut sizes = vec![FEATURE_DIM];
                sizes.extend(&self.mlp_hidden);
                sizes.push(TARGET_DIM);
                Descriptor::Mlp { sizes }
            }
            (Arch::Transformer, DataKind::CharLm) => Descriptor::Transformer(TransformerConfig {
                vocab: data.vocab_size(),
                d_model: self.d_model,
                n_blocks: self.n_blocks,
                n_heads: self.n_heads,
                context: self.context,
            }),
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn teacher_training(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher_epochs,
            batch_size: self.teacher_batch_size,
            context: self.context,
            lr: self.teacher_lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn kd(&self) -> KdConfig {
        KdConfig {
            tau: self.tau,
            gamma: self.gamma,
            hidden_set: self.hidden.clone(),
            divergence: self.divergence,
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            kd: self.kd(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            context: self.context,
            lr: self.lr,
            bool_lr: self.bool_lr,
            weight_decay: self.weight_decay,
            flip_threshold: self.flip_threshold,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(
            RunConfig::parse("# only a comment\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn keys_and_comments() {
        let cfg = RunConfig::parse(
            "seed = 7  # trailing\narch=mlp\ndata = regression\nmlp_hidden = 16, 8\n\
             divergence = js\ntrain_policy = 0,1\nbench_sizes = 8\nnormalize_residuals = false\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.arch, Arch::Mlp);
        assert_eq!(cfg.mlp_hidden, vec![16, 8]);
        assert_eq!(cfg.divergence, Divergence::JS);
        assert_eq!(cfg.train_policy, TrainPolicy::Set([0, 1].into()));
        assert_eq!(cfg.bench_sizes, vec![8]);
        assert!(!cfg.normalize_residuals);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            "sed = 1",
            "seed = -1",
            "seed",
            "arch = cnn",
            "divergence = l2",
            "kernels = 0",
            "bool_lr = -1",
            "tau = 0",
            "normalize_residuals = maybe",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{text}");
        }
    }

    #[test]
    fn descriptor_follows_data() {
        let data = mbk_core::zoo::make_data(DataKind::CharLm, 0, 500).unwrap();
        let cfg = RunConfig::default();
        match cfg.descriptor(&data).unwrap() {
            Descriptor::Transformer(c) => assert_eq!(c.vocab, data.vocab_size()),
            d => panic!("unexpected {d:?}"),
        }
        let mlp = RunConfig::parse("arch = mlp").unwrap();
        assert!(mlp.descriptor(&data).is_err());
    }
}
