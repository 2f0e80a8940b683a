//! The subcommands. Each writes its human or JSON-lines output to `out`
//! and its files under the configured output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use mbk_core::allocation::{allocate_greedy, importance, parse_manifest, AllocationProblem};
use mbk_core::distill::{distill_epoch, DistillOptimizer, EpochMetrics, StepMetrics};
use mbk_core::linear::{BooleanLinear, LinearOp, TrainPolicy};
use mbk_core::svid::{approx_error, successive_extract};
use mbk_core::tensor::norms;
use mbk_core::zoo::{
    build_teacher, evaluate, make_data, train_teacher, BatchInput, Dataset, EvalResult, KernelPlan,
    Network, Part,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Loaded};
use crate::config::{PlanSource, RunConfig};
use crate::error::{CliError, CliResult};

fn emit(out: &mut dyn Write, line: &str) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::runtime(format!("writing output: {e}")))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("metrics serialize to JSON")
}

fn dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    Ok(make_data(cfg.data, cfg.seed, cfg.data_size)?)
}

fn check_descriptor(
    cfg: &RunConfig,
    data: &Dataset,
    actual: &mbk_core::zoo::Descriptor,
    what: &Path,
) -> CliResult<()> {
    let expected = cfg.descriptor(data)?;
    if &expected != actual {
        return Err(CliError::validation(format!(
            "{} was built for {actual:?}, the configuration describes {expected:?}",
            what.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TeacherSummary {
    params: usize,
    initial_loss: f64,
    final_loss: f64,
    steps: usize,
    val: EvalResult,
}

/// Builds, trains and saves the full-precision teacher.
pub fn teacher(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let data = dataset(cfg)?;
    let desc = cfg.descriptor(&data)?;
    let mut model = build_teacher(&desc, cfg.seed)?;
    let report = train_teacher(&mut model, &data, &cfg.teacher_training())?;
    let val = evaluate(
        &model,
        &data.batches(Part::Val, cfg.batch_size, cfg.context, None)?,
    )?;
    checkpoint::save_teacher(&cfg.path(&cfg.teacher), &model)?;
    emit(
        out,
        &json(&TeacherSummary {
            params: desc.param_count(),
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            steps: report.steps,
            val,
        }),
    )
}

/// One row of the residual table: `e[k-1]` is the residual norm of the
/// weight after `k` kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub e: Vec<f64>,
}

pub fn format_residuals(table: &[ResidualRow]) -> String {
    let width = table.first().map_or(0, |r| r.e.len());
    let mut s = String::from("weight\trows\tcols");
    for k in 1..=width {
        write!(s, "\te{k}").expect("writing to a String");
    }
    s.push('\n');
    for r in table {
        write!(s, "{}\t{}\t{}", r.name, r.rows, r.cols).expect("writing to a String");
        for v in &r.e {
            write!(s, "\t{v}").expect("writing to a String");
        }
        s.push('\n');
    }
    s
}

pub fn parse_residuals(text: &str) -> CliResult<Vec<ResidualRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::validation("residual table is empty"))?;
    let width = header.split('\t').count().saturating_sub(3);
    let bad = |i: usize| CliError::validation(format!("residual table line {}: malformed", i + 2));
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != width + 3 {
                return Err(bad(i));
            }
            let e = fields[3..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad(i)))
                .collect::<CliResult<Vec<f64>>>()?;
            Ok(ResidualRow {
                name: fields[0].to_string(),
                rows: fields[1].parse().map_err(|_| bad(i))?,
                cols: fields[2].parse().map_err(|_| bad(i))?,
                e,
            })
        })
        .collect()
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExtractLine {
    pub weight: String,
    pub kernels: usize,
    pub frobenius: f64,
    pub l1: f64,
}

/// Extracts the Boolean student from the teacher checkpoint and records the
/// residual table up to `k_max` kernels.
pub fn extract(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let teacher = checkpoint::load_teacher(&cfg.path(&cfg.teacher))?;
    let plan = match cfg.plan {
        PlanSource::Uniform => KernelPlan::Uniform(cfg.kernels),
        PlanSource::Allocation => {
            KernelPlan::PerWeight(parse_manifest(&read_text(&cfg.path(&cfg.allocation))?)?.kernels)
        }
    };
    if let KernelPlan::PerWeight(m) = &plan {
        let names: Vec<String> = teacher.linears().into_iter().map(|(n, _)| n).collect();
        if let Some(extra) = m.keys().find(|k| !names.contains(k)) {
            return Err(CliError::validation(format!(
                "allocation names unknown weight '{extra}'"
            )));
        }
    }
    let mut table = Vec::new();
    let student = teacher.map_linears(|name, lin| {
        let k = plan.kernels_for(name)?;
        let report = successive_extract(&lin.weight, k.max(cfg.k_max))?;
        let scale = match norms(&lin.weight).0 {
            f if cfg.normalize_residuals && f > 0.0 => f,
            _ => 1.0,
        };
        table.push(ResidualRow {
            name: name.to_string(),
            rows: lin.out_features(),
            cols: lin.in_features(),
            e: report.residual_frobenius[..cfg.k_max]
                .iter()
                .map(|v| v / scale)
                .collect(),
        });
        BooleanLinear::new(
            report.kernels[..k].to_vec(),
            lin.bias.clone(),
            &TrainPolicy::LastOnly,
        )
    })?;
    let dir = cfg.path(&cfg.student);
    checkpoint::save_student(&dir, &student)?;
    write_text(&cfg.path(&cfg.residuals), &format_residuals(&table))?;
    // Report errors of the stored (f32) kernels.
    let stored = checkpoint::load_student(&dir)?;
    for ((name, t), (_, s)) in teacher.linears().into_iter().zip(stored.linears()) {
        let (frobenius, l1) = approx_error(&t.weight, s.kernels())?;
        emit(
            out,
            &json(&ExtractLine {
                weight: name,
                kernels: s.num_kernels(),
                frobenius,
                l1,
            }),
        )?;
    }
    Ok(())
}

/// The importance probe: `probe_samples` seeded examples from the training
/// split.
pub fn probe_input(cfg: &RunConfig, data: &Dataset) -> CliResult<BatchInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches = data.batches(Part::Train, cfg.probe_samples, cfg.context, Some(&mut rng))?;
    batches
        .into_iter()
        .next()
        .map(|b| b.input)
        .ok_or_else(|| CliError::validation("training split is empty"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AllocateSummary {
    pub budget: f64,
    pub achieved_ratio: f64,
    pub energy: f64,
    pub kernels: BTreeMap<String, usize>,
    pub importance: BTreeMap<String, f64>,
}

/// Scores every weight, allocates kernels greedily under `budget` and writes
/// the allocation manifest.
pub fn allocate(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let teacher = checkpoint::load_teacher(&cfg.path(&cfg.teacher))?;
    let table = parse_residuals(&read_text(&cfg.path(&cfg.residuals))?)?;
    let data = dataset(cfg)?;
    check_descriptor(cfg, &data, &teacher.descriptor(), &cfg.path(&cfg.teacher))?;
    let h = importance(&teacher, &probe_input(cfg, &data)?)?;
    let linears = teacher.linears();
    let total: usize = linears
        .iter()
        .map(|(_, l)| l.in_features() * l.out_features())
        .sum();
    let (mut e, mut p, mut names) = (Vec::new(), Vec::new(), Vec::new());
    for (name, lin) in &linears {
        let row = table
            .iter()
            .find(|r| &r.name == name)
            .ok_or_else(|| CliError::validation(format!("residual table lacks '{name}'")))?;
        if (row.rows, row.cols) != (lin.out_features(), lin.in_features()) {
            return Err(CliError::validation(format!(
                "residual table shape for '{name}' does not match the teacher"
            )));
        }
        e.push(row.e.clone());
        p.push((lin.in_features() * lin.out_features()) as f64 / total as f64);
        names.push(name.clone());
    }
    let problem = AllocationProblem::new(
        e,
        h.iter().map(|(_, v)| *v).collect(),
        p,
        cfg.budget,
        cfg.k_max,
    )?;
    let alloc = allocate_greedy(&problem)?;
    write_text(&cfg.path(&cfg.allocation), &alloc.to_manifest(&names)?)?;
    emit(
        out,
        &json(&AllocateSummary {
            budget: cfg.budget,
            achieved_ratio: alloc.achieved_ratio,
            energy: alloc.energy,
            kernels: names.iter().cloned().zip(alloc.k.iter().copied()).collect(),
            importance: h.into_iter().collect(),
        }),
    )
}

/// A line of the distillation log.
#[derive(Debug, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record<'a> {
    Step(&'a StepMetrics),
    Epoch(&'a EpochMetrics),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DistillSummary {
    pub initial_val: EvalResult,
    pub final_val: EvalResult,
    pub flips: u64,
    pub steps: usize,
}

/// Finetunes the extracted student against the teacher and writes the final
/// checkpoint and the metrics log.
pub fn distill(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let teacher = checkpoint::load_teacher(&cfg.path(&cfg.teacher))?;
    let student_dir = cfg.path(&cfg.student);
    let mut student = checkpoint::load_student(&student_dir)?;
    let data = dataset(cfg)?;
    check_descriptor(cfg, &data, &teacher.descriptor(), &cfg.path(&cfg.teacher))?;
    check_descriptor(cfg, &data, &student.descriptor(), &student_dir)?;
    for (_, lin) in student.linears_mut() {
        lin.set_policy(&cfg.train_policy)?;
        lin.train_scales = cfg.train_scales;
    }
    let dcfg = cfg.distill();
    let val_batches = data.batches(Part::Val, dcfg.batch_size, dcfg.context, None)?;
    let initial_val = evaluate(&student, &val_batches)?;
    let per_epoch = data
        .batches(Part::Train, dcfg.batch_size, dcfg.context, None)?
        .len();
    let mut opt = DistillOptimizer::new(&student, &dcfg, dcfg.epochs * per_epoch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed);
    let mut log = String::new();
    let mut final_val = initial_val;
    let mut flips = 0;
    for epoch in 0..dcfg.epochs {
        let mut sink = |m: &StepMetrics| {
            log.push_str(&json(&Record::Step(m)));
            log.push('\n');
        };
        let metrics = distill_epoch(
            &teacher,
            &mut student,
            &data,
            &mut opt,
            &dcfg,
            epoch,
            &mut rng,
            &mut sink,
        )?;
        log.push_str(&json(&Record::Epoch(&metrics)));
        log.push('\n');
        final_val = metrics.val;
        flips += metrics.flips;
    }
    write_text(&cfg.path(&cfg.metrics), &log)?;
    checkpoint::save_student(&cfg.path(&cfg.distilled), &student)?;
    emit(
        out,
        &json(&DistillSummary {
            initial_val,
            final_val,
            flips,
            steps: opt.step,
        }),
    )
}

/// Evaluates the `model` checkpoint on the validation split and prints one
/// JSON line.
pub fn eval(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let dir = cfg.path(&cfg.model);
    let model = checkpoint::load(&dir)?;
    let data = dataset(cfg)?;
    let batches = data.batches(Part::Val, cfg.batch_size, cfg.context, None)?;
    let result = match &model {
        Loaded::Teacher(t) => {
            check_descriptor(cfg, &data, &t.descriptor(), &dir)?;
            evaluate(t, &batches)?
        }
        Loaded::Student(s) => {
            check_descriptor(cfg, &data, &s.descriptor(), &dir)?;
            evaluate(s, &batches)?
        }
    };
    emit(out, &json(&result))
}

/// Times dense and Boolean products at every configured size.
pub fn bench(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let rows = crate::bench::run(
        &cfg.bench_sizes,
        cfg.bench_batch,
        cfg.bench_repeats,
        cfg.seed,
    )?;
    out.write_all(crate::bench::table(&rows).as_bytes())
        .map_err(|e| CliError::runtime(format!("writing output: {e}")))
}
