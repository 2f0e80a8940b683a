//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use mbk_cli::checkpoint::{self, BITS_BLOB};
use mbk_cli::commands::probe_input;
use mbk_cli::RunConfig;
use mbk_core::allocation::{allocate_greedy, importance, pwcca, AllocationProblem};
use mbk_core::distill::{
    distill, kd_batch, kd_logits_loss, DistillConfig, DistillOptimizer, Divergence, KdConfig,
};
use mbk_core::linear::{BackwardSignals, BooleanLinear, LinearOp, TrainPolicy};
use mbk_core::optim::{bool_step, FlipAccumulator};
use mbk_core::svid::{successive_extract, svid_extract, SvidKernel};
use mbk_core::tensor::{matmul_bool, matmul_dense, BitMatrix, DenseMatrix};
use mbk_core::zoo::{
    booleanize, build_teacher, evaluate, make_data, train_teacher, Batch, DataKind, Dataset,
    Descriptor, KernelPlan, Network, Part, Student, Teacher, TrainConfig, TransformerConfig,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn frobenius(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `bits ⊙ (c dᵀ)` computed entry by entry.
fn signed_outer(bits: &BitMatrix, c: &[f64], d: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(c.len(), d.len(), |i, j| {
        bits.get(i, j).embed() * c[i] * d[j]
    })
}

fn c1_svid_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let heavy = StudentT::new(2.0).expect("valid degrees of freedom");
    let (mut violations, mut checks, mut min_slack) = (0, 0, f64::INFINITY);
    for trial in 0..1000 {
        let (m, n) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let w = if trial % 2 == 0 {
            gaussian(m, n, &mut rng)
        } else {
            DenseMatrix::from_fn(m, n, |_, _| heavy.sample(&mut rng))
        };
        let step = svid_extract(&w).map_err(|e| e.to_string())?;
        let k = &step.kernel;
        let own = frobenius(&w, &signed_outer(&k.bits, &k.s_out, &k.s_in));
        for comp in 0..100 {
            let (c, d): (Vec<f64>, Vec<f64>) = if comp % 2 == 0 {
                (
                    (0..m)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    (0..n)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            } else {
                let eps = 10f64.powi(-rng.random_range(1..6));
                (
                    k.s_out
                        .iter()
                        .map(|v| v + eps * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    k.s_in
                        .iter()
                        .map(|v| v + eps * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            };
            let other = frobenius(&w, &signed_outer(&k.bits, &c, &d));
            checks += 1;
            min_slack = min_slack.min(other - own);
            if own > other + 1e-8 {
                violations += 1;
            }
        }
    }
    ensure!(
        violations == 0,
        "{violations} violations in {checks} comparisons"
    );
    Ok(format!(
        "1000 matrices, {checks} competitors, 0 violations, min slack {min_slack:.3e}"
    ))
}

/// Best rank-1 approximation `a bᵀ` from a full SVD.
fn rank1_svd(w: &DenseMatrix) -> DenseMatrix {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice());
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u computed"), svd.v_t.expect("v_t computed"));
    let (i, s) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |b, (i, &s)| if s > b.1 { (i, s) } else { b },
            );
    DenseMatrix::from_fn(w.rows(), w.cols(), |r, c| s * u[(r, i)] * vt[(i, c)])
}

fn c2_rank1_inequality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let heavy = StudentT::new(3.0).expect("valid degrees of freedom");
    let (mut violations, mut mean_ratio) = (0, 0.0);
    for trial in 0..500 {
        let (m, n) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let w = if trial % 2 == 0 {
            gaussian(m, n, &mut rng)
        } else {
            DenseMatrix::from_fn(m, n, |_, _| heavy.sample(&mut rng))
        };
        let k = svid_extract(&w).map_err(|e| e.to_string())?.kernel;
        let own = frobenius(&w, &signed_outer(&k.bits, &k.s_out, &k.s_in));
        let plain = frobenius(&w, &rank1_svd(&w));
        if own > plain + 1e-8 {
            violations += 1;
        }
        if plain > 0.0 {
            mean_ratio += own / plain / 500.0;
        }
    }
    ensure!(violations == 0, "{violations} violations in 500 matrices");
    Ok(format!(
        "500 matrices, 0 violations, mean error ratio svid/rank-1 {mean_ratio:.3}"
    ))
}

fn c3_bool_dense_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut ragged = 0;
    for case in 0..10_000 {
        let b = rng.random_range(1..=6);
        let n = if case % 3 == 0 {
            64 * rng.random_range(1..=3)
        } else {
            rng.random_range(1..=150)
        };
        let m = rng.random_range(1..=40);
        if n % 64 != 0 {
            ragged += 1;
        }
        let x = DenseMatrix::from_fn(b, n, |_, _| rng.random_range(-10.0..10.0));
        let bits = BitMatrix::from_fn(m, n, |_, _| rng.random_bool(0.5));
        let signs = DenseMatrix::from_fn(m, n, |i, j| if bits.get(i, j).0 { 1.0 } else { -1.0 });
        let a = matmul_bool(&x, &bits).map_err(|e| e.to_string())?;
        let d = matmul_dense(&x, &signs).map_err(|e| e.to_string())?;
        let same = a.shape() == d.shape()
            && a.as_slice()
                .iter()
                .zip(d.as_slice())
                .all(|(p, q)| p.to_bits() == q.to_bits());
        ensure!(same, "case {case} ({b}x{n} by {m}x{n}) differs");
    }
    Ok(format!(
        "10000 cases ({ragged} with ragged rows), all bit-identical"
    ))
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn c4_backprop_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_q, mut worst_p, mut worst_s) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (k, m, n, b) = (
            rng.random_range(1..=4),
            rng.random_range(1..=20),
            rng.random_range(1..=20),
            rng.random_range(1..=6),
        );
        let kernels: Vec<SvidKernel> = (0..k)
            .map(|_| {
                SvidKernel::new(
                    BitMatrix::from_fn(m, n, |_, _| rng.random_bool(0.5)),
                    (0..m).map(|_| rng.random_range(0.1..2.0)).collect(),
                    (0..n).map(|_| rng.random_range(0.1..2.0)).collect(),
                )
                .expect("consistent kernel")
            })
            .collect();
        let mut layer = BooleanLinear::new(kernels.clone(), None, &TrainPolicy::All)
            .map_err(|e| e.to_string())?;
        let x = gaussian(b, n, &mut rng);
        let z = gaussian(b, m, &mut rng);
        layer.forward(&x).map_err(|e| e.to_string())?;
        let sig = layer.backward(&z).map_err(|e| e.to_string())?;

        // Dense reference: L = Σ Z ⊙ Y with Y = X Wᵀ, W = Σ_k e(B_k) ⊙ s_out s_inᵀ.
        let mut g = vec![vec![0.0; n]; m];
        for r in 0..b {
            for i in 0..m {
                for j in 0..n {
                    g[i][j] += z.get(r, i) * x.get(r, j);
                }
            }
        }
        let mut w = vec![vec![0.0; n]; m];
        for (idx, kern) in kernels.iter().enumerate() {
            let mut max_q = 0.0f64;
            let mut max_diff = 0.0f64;
            let q = sig.q_for(idx).ok_or("missing Q")?;
            for i in 0..m {
                for j in 0..n {
                    let scale = kern.s_out[i] * kern.s_in[j];
                    let want = g[i][j] * scale;
                    max_q = max_q.max(want.abs());
                    max_diff = max_diff.max((q.get(i, j) - want).abs());
                    w[i][j] += kern.bits.get(i, j).embed() * scale;
                }
            }
            worst_q = worst_q.max(max_diff / max_q.max(f64::MIN_POSITIVE));
        }
        let mut max_p = 0.0f64;
        let mut p_diff = 0.0f64;
        for r in 0..b {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| z.get(r, i) * w[i][j]).sum();
                max_p = max_p.max(want.abs());
                p_diff = p_diff.max((sig.p.get(r, j) - want).abs());
            }
        }
        worst_p = worst_p.max(p_diff / max_p.max(f64::MIN_POSITIVE));

        // Central differences on the scales of every kernel.
        let loss = |ks: &[SvidKernel]| -> f64 {
            let l = BooleanLinear::new(ks.to_vec(), None, &TrainPolicy::All)
                .expect("consistent kernels");
            let y = l.infer(&x).expect("shapes match");
            y.as_slice()
                .iter()
                .zip(z.as_slice())
                .map(|(a, c)| a * c)
                .sum()
        };
        let h = 1e-5;
        for kk in 0..k {
            for (is_out, len) in [(true, m), (false, n)] {
                for idx in 0..len {
                    let mut plus = kernels.clone();
                    let mut minus = kernels.clone();
                    let (vp, vm) = if is_out {
                        (&mut plus[kk].s_out[idx], &mut minus[kk].s_out[idx])
                    } else {
                        (&mut plus[kk].s_in[idx], &mut minus[kk].s_in[idx])
                    };
                    *vp += h;
                    *vm -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let got = if is_out {
                        sig.grad_s_out[kk][idx]
                    } else {
                        sig.grad_s_in[kk][idx]
                    };
                    worst_s = worst_s.max(rel(got, fd, 1e-3));
                }
            }
        }
    }
    ensure!(worst_q <= 1e-8, "Q relative error {worst_q:.3e}");
    ensure!(worst_p <= 1e-8, "P relative error {worst_p:.3e}");
    ensure!(
        worst_s <= 1e-5,
        "scale gradient relative error {worst_s:.3e}"
    );
    Ok(format!(
        "200 layers, max rel err Q {worst_q:.1e}, P {worst_p:.1e}, scales vs FD {worst_s:.1e}"
    ))
}

fn c5_extraction_trend() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let w = gaussian(64, 64, &mut rng);
    let report = successive_extract(&w, 8).map_err(|e| e.to_string())?;
    let l1_total: f64 = w.as_slice().iter().map(|v| v.abs()).sum();
    let e: Vec<f64> = (1..=8)
        .map(|k| {
            let rec =
                mbk_core::svid::reconstruct(&report.kernels[..k], (64, 64)).expect("shapes match");
            w.as_slice()
                .iter()
                .zip(rec.as_slice())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / l1_total
        })
        .collect();
    for (k, (mine, theirs)) in e.iter().zip(&report.residual_l1_normalized).enumerate() {
        ensure!(
            (mine - theirs).abs() <= 1e-12,
            "K={} report {theirs} recomputed {mine}",
            k + 1
        );
    }
    ensure!(
        e.windows(2).all(|p| p[1] < p[0]),
        "not strictly decreasing: {e:?}"
    );
    let (early, late) = (e[0] - e[3], e[3] - e[7]);
    ensure!(
        late < early,
        "K4->K8 gain {late} not below K1->K4 gain {early}"
    );
    let shown: Vec<String> = e.iter().map(|v| format!("{v:.3}")).collect();
    Ok(format!(
        "L1 K=1..8 [{}], gains {early:.3} then {late:.3}",
        shown.join(", ")
    ))
}

fn c6_optimizer_semantics() -> Outcome {
    // Every (M, Q, w) sign combination, with and without the unit threshold.
    let m_vals = [-0.8, 0.0, 0.8];
    let q_vals = [-1.0, 0.0, 1.0];
    let combos: Vec<(f64, f64, bool)> = m_vals
        .iter()
        .flat_map(|&m| {
            q_vals
                .iter()
                .flat_map(move |&q| [true, false].map(|w| (m, q, w)))
        })
        .collect();
    let cols = combos.len();
    let eta = 0.5;
    for threshold in [1.0, 0.0] {
        let bits = BitMatrix::from_fn(1, cols, |_, j| combos[j].2);
        let kernel =
            SvidKernel::new(bits, vec![1.0], vec![1.0; cols]).map_err(|e| e.to_string())?;
        let mut layer = BooleanLinear::new(vec![kernel], None, &TrainPolicy::LastOnly)
            .map_err(|e| e.to_string())?;
        let mut state = FlipAccumulator::for_layer(&layer, eta).with_threshold(threshold);
        state.m[0].1 = DenseMatrix::from_fn(1, cols, |_, j| combos[j].0);
        let q = DenseMatrix::from_fn(1, cols, |_, j| combos[j].1);
        let signals = BackwardSignals {
            q: vec![(0, q.clone())],
            p: DenseMatrix::zeros(1, cols),
            grad_s_out: vec![vec![0.0]],
            grad_s_in: vec![vec![0.0; cols]],
            grad_bias: None,
        };
        let report = bool_step(&mut layer, &signals, &mut state).map_err(|e| e.to_string())?;
        let mut unchanged = 0;
        for (j, &(m0, q0, w0)) in combos.iter().enumerate() {
            let acc = m0 + eta * q0;
            let agree = (acc > 0.0 && w0) || (acc < 0.0 && !w0);
            let flip = agree && acc.abs() >= threshold;
            let w1 = layer.kernels()[0].bits.get(0, j).0;
            let m1 = state.m[0].1.get(0, j);
            ensure!(
                w1 == (w0 != flip),
                "threshold {threshold}: (M={m0}, Q={q0}, w={w0}) bit {w1}"
            );
            ensure!(
                m1 == if flip { 0.0 } else { acc },
                "threshold {threshold}: (M={m0}, Q={q0}, w={w0}) accumulator {m1}"
            );
            unchanged += usize::from(!flip);
        }
        ensure!(
            report.beta == unchanged as f64 / cols as f64,
            "beta {} for {unchanged}/{cols}",
            report.beta
        );
        ensure!(state.beta == report.beta, "state beta not updated");
        // The next step decays the old accumulator by the new beta.
        let before = state.m[0].1.clone();
        bool_step(&mut layer, &signals, &mut state).map_err(|e| e.to_string())?;
        for j in 0..cols {
            let acc = report.beta * before.get(0, j) + eta * q.get(0, j);
            let now = state.m[0].1.get(0, j);
            ensure!(
                now == acc || now == 0.0,
                "second step accumulator {now}, expected {acc} or reset"
            );
        }
    }

    // One accumulator per trainable Boolean weight and nothing else.
    let t = build_teacher(&tiny_transformer(7, 2), 0).map_err(|e| e.to_string())?;
    for (policy, per_layer) in [
        (TrainPolicy::LastOnly, 1),
        (TrainPolicy::All, 3),
        (TrainPolicy::Set([0, 2].into()), 2),
    ] {
        let s = booleanize(&t, &KernelPlan::Uniform(3), &policy).map_err(|e| e.to_string())?;
        let opt =
            DistillOptimizer::new(&s, &DistillConfig::default(), 10).map_err(|e| e.to_string())?;
        let weights: usize = s
            .linears()
            .iter()
            .map(|(_, l)| l.in_features() * l.out_features())
            .sum();
        let (acc, adam) = opt.state_len();
        ensure!(
            acc == per_layer * weights,
            "{policy:?}: {acc} accumulators for {weights} weights"
        );
        ensure!(adam == 0, "AdamW holds state before the first step");
    }
    Ok(format!(
        "{cols} sign combinations x 2 thresholds, beta exact, state = 1 real per trainable bit"
    ))
}

fn tiny_transformer(vocab: usize, n_blocks: usize) -> Descriptor {
    Descriptor::Transformer(TransformerConfig {
        vocab,
        d_model: 16,
        n_blocks,
        n_heads: 2,
        context: 8,
    })
}

fn energy_of(k: &[usize], p: &AllocationProblem) -> f64 {
    k.iter()
        .enumerate()
        .map(|(l, &kl)| {
            let f = if p.p[l] == 1.0 {
                0.0
            } else {
                (1.0 / p.p[l]) * (1.0 / p.p[l]).ln()
            };
            p.h[l] * p.e[l][kl - 1] * f
        })
        .sum()
}

fn ratio_of(k: &[usize], p: &[f64]) -> f64 {
    k.iter().zip(p).map(|(&a, b)| a as f64 * b).sum()
}

fn exhaustive(p: &AllocationProblem) -> f64 {
    let n = p.e.len();
    let mut best = f64::INFINITY;
    let mut k = vec![1; n];
    loop {
        if ratio_of(&k, &p.p) <= p.budget + 1e-12 {
            best = best.min(energy_of(&k, p));
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            if k[i] < p.k_max {
                k[i] += 1;
                break;
            }
            k[i] = 1;
            i += 1;
        }
    }
}

fn c7_allocation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut gap_sum, mut worst_gap, mut optimal) = (0.0, 0.0f64, 0);
    let mut above_uniform = Vec::new();
    for case in 0..200 {
        let n = rng.random_range(1..=4);
        let k_max = rng.random_range(1..=4);
        let e: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut v = rng.random_range(0.5..2.0);
                (0..k_max)
                    .map(|_| {
                        let cur = v;
                        v *= rng.random_range(0.2..1.0);
                        cur
                    })
                    .collect()
            })
            .collect();
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let drift: f64 = 1.0 - p.iter().sum::<f64>();
        p[0] += drift;
        let budget = rng.random_range(1.0..=k_max as f64);
        let problem = AllocationProblem::new(e, h, p, budget, k_max)
            .map_err(|err| format!("case {case}: {err}"))?;
        let greedy = allocate_greedy(&problem).map_err(|err| err.to_string())?;
        let rho = ratio_of(&greedy.k, &problem.p);
        ensure!(
            rho <= budget + 1e-12,
            "case {case}: ratio {rho} over budget {budget}"
        );
        let mine = energy_of(&greedy.k, &problem);
        let uniform = vec![(budget.floor() as usize).clamp(1, k_max); n];
        let base = energy_of(&uniform, &problem);
        if mine > base + 1e-12 {
            above_uniform.push(format!("case {case}: greedy k {:?} energy {mine:.4} > uniform k {uniform:?} energy {base:.4}", greedy.k));
        }
        let best = exhaustive(&problem);
        ensure!(
            mine + 1e-12 >= best,
            "case {case}: greedy {mine} below exhaustive optimum {best}"
        );
        let gap = if best > 0.0 {
            (mine - best) / best
        } else {
            mine - best
        };
        gap_sum += gap;
        worst_gap = worst_gap.max(gap);
        optimal += usize::from(gap <= 1e-12);
    }
    let gaps = format!(
        "mean gap vs exhaustive {:.4}, worst {worst_gap:.4}, optimal in {optimal}/200",
        gap_sum / 200.0
    );
    ensure!(
        above_uniform.is_empty(),
        "all within budget, but greedy exceeds the uniform allocation's energy in {}/200 ({}); {gaps}",
        above_uniform.len(),
        above_uniform.join("; ")
    );
    Ok(format!(
        "200 instances, within budget and <= uniform; {gaps}"
    ))
}

fn c8_pwcca() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=12);
        let x = gaussian(200, n, &mut rng);
        let a = gaussian(n, n, &mut rng);
        let y = mbk_core::tensor::matmul_nn(&x, &a).map_err(|e| e.to_string())?;
        let r = pwcca(&x, &y).map_err(|e| e.to_string())?;
        for rho in &r.rho {
            worst = worst.max((rho - 1.0).abs());
        }
        worst = worst.max((r.weighted_mean - 1.0).abs());
    }
    ensure!(
        worst <= 1e-6,
        "invertible-map correlations off by {worst:.3e}"
    );

    let mut teacher = build_teacher(
        &Descriptor::Mlp {
            sizes: vec![8, 8, 4],
        },
        1,
    )
    .map_err(|e| e.to_string())?;
    if let Some((_, fc0)) = teacher.linears_mut().into_iter().next() {
        fc0.weight = DenseMatrix::from_fn(8, 8, |i, j| if i == j { 1.0 } else { 0.0 });
        fc0.bias = Some(vec![0.0; 8]);
    }
    let probe = mbk_core::zoo::BatchInput::Features(gaussian(128, 8, &mut rng));
    let h = importance(&teacher, &probe).map_err(|e| e.to_string())?;
    ensure!(h[0].1.abs() <= 1e-9, "identity layer has h = {}", h[0].1);

    let cfg = RunConfig::default();
    let data = &shared().data;
    let t = &shared().teacher;
    let p1 = probe_input(&cfg, data).map_err(|e| e.to_string())?;
    let p2 = probe_input(&cfg, data).map_err(|e| e.to_string())?;
    let samples = match &p1 {
        mbk_core::zoo::BatchInput::Tokens { batch, .. } => *batch,
        mbk_core::zoo::BatchInput::Features(x) => x.rows(),
    };
    ensure!(samples == 128, "probe holds {samples} samples");
    let h1 = importance(t, &p1).map_err(|e| e.to_string())?;
    let h2 = importance(t, &p2).map_err(|e| e.to_string())?;
    let same = p1 == p2
        && h1
            .iter()
            .zip(&h2)
            .all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits());
    ensure!(same, "importance differs between seeded runs");
    Ok(format!(
        "invertible maps rho within {worst:.1e}, identity h = {:.1e}, 128-sample probe bit-reproducible",
        h[0].1
    ))
}

struct Shared {
    data: Dataset,
    teacher: Teacher,
    val: Vec<Batch>,
}

fn desk_descriptor(data: &Dataset) -> Descriptor {
    Descriptor::Transformer(TransformerConfig {
        vocab: data.vocab_size(),
        d_model: 32,
        n_blocks: 2,
        n_heads: 4,
        context: 32,
    })
}

fn desk_teacher(data: &Dataset, seed: u64) -> Teacher {
    let mut t = build_teacher(&desk_descriptor(data), seed).expect("valid descriptor");
    let cfg = TrainConfig {
        epochs: 8,
        seed,
        ..TrainConfig::default()
    };
    train_teacher(&mut t, data, &cfg).expect("teacher training");
    t
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let data = make_data(DataKind::CharLm, 0, usize::MAX).expect("corpus");
        let teacher = desk_teacher(&data, 0);
        let val = data
            .batches(Part::Val, 8, 32, None)
            .expect("validation batches");
        Shared { data, teacher, val }
    })
}

fn student(t: &Teacher, k: usize, policy: &TrainPolicy) -> Student {
    booleanize(t, &KernelPlan::Uniform(k), policy).expect("extraction")
}

fn c9_desk_pipeline() -> Outcome {
    let sh = shared();
    let params = desk_descriptor(&sh.data).param_count();
    ensure!(params <= 500_000, "teacher has {params} parameters");
    let teacher_ppl = evaluate(&sh.teacher, &sh.val)
        .map_err(|e| e.to_string())?
        .perplexity;
    let init: Vec<f64> = (1..=4)
        .map(|k| {
            evaluate(&student(&sh.teacher, k, &TrainPolicy::LastOnly), &sh.val)
                .map(|r| r.perplexity)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(
        init.windows(2).all(|w| w[1] <= w[0]),
        "init perplexity not non-increasing in K: {init:?}"
    );
    let mut s = student(&sh.teacher, 2, &TrainPolicy::LastOnly);
    let report = distill(
        &sh.teacher,
        &mut s,
        &sh.data,
        &DistillConfig::default(),
        &mut |_| {},
    )
    .map_err(|e| e.to_string())?;
    let (before, after) = (report.initial_val.perplexity, report.final_val().perplexity);
    ensure!(
        (before - init[1]).abs() < 1e-9,
        "post-extraction perplexity {before} vs {}",
        init[1]
    );
    ensure!(
        after < before,
        "final perplexity {after} not below post-extraction {before}"
    );
    let shown: Vec<String> = init.iter().map(|v| format!("{v:.2}")).collect();
    Ok(format!(
        "{params} params, teacher ppl {teacher_ppl:.2}, init ppl K=1..4 [{}], K=2 after 3 epochs {after:.2}",
        shown.join(", ")
    ))
}

fn c10_strategy() -> Outcome {
    let sh = shared();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..4u64 {
        let teacher = if seed == 0 {
            sh.teacher.clone()
        } else {
            desk_teacher(&sh.data, seed)
        };
        let cfg = DistillConfig {
            seed,
            ..DistillConfig::default()
        };
        let run = |policy: TrainPolicy| -> Result<(u64, f64), String> {
            let mut s = student(&teacher, 2, &policy);
            let r = distill(&teacher, &mut s, &sh.data, &cfg, &mut |_| {})
                .map_err(|e| e.to_string())?;
            Ok((r.total_flips(), r.final_val().loss))
        };
        let (last_flips, last_loss) = run(TrainPolicy::LastOnly)?;
        let (first_flips, first_loss) = run(TrainPolicy::Set(BTreeSet::from([0])))?;
        let win = last_flips < first_flips && last_loss <= first_loss;
        wins += usize::from(win);
        rows.push(format!(
            "seed {seed}: flips {last_flips}/{first_flips} loss {last_loss:.4}/{first_loss:.4}"
        ));
    }
    ensure!(
        wins >= 3,
        "last-kernel-only won on {wins}/4 seeds ({})",
        rows.join("; ")
    );
    Ok(format!("last/first wins {wins}/4 ({})", rows.join("; ")))
}

fn c11_divergences() -> Outcome {
    let sh = shared();
    let out = sh
        .teacher
        .infer(&sh.val[0].input)
        .map_err(|e| e.to_string())?;
    let mut finals = Vec::new();
    for div in Divergence::ALL {
        let kd = KdConfig {
            divergence: div,
            ..KdConfig::default()
        };
        let (loss, grad) = kd_logits_loss(&out.out, &out.out, &kd).map_err(|e| e.to_string())?;
        ensure!(loss == 0.0, "{div}: self-divergence {loss}");
        ensure!(
            grad.as_slice().iter().all(|g| *g == 0.0),
            "{div}: nonzero self-gradient"
        );
        let (res, _, _) = kd_batch(&out, &out, &kd).map_err(|e| e.to_string())?;
        ensure!(res.total == 0.0, "{div}: combined self-loss {}", res.total);
        let mut s = student(&sh.teacher, 2, &TrainPolicy::LastOnly);
        let cfg = DistillConfig {
            kd,
            ..DistillConfig::default()
        };
        let r = distill(&sh.teacher, &mut s, &sh.data, &cfg, &mut |_| {})
            .map_err(|e| format!("{div}: {e}"))?;
        ensure!(r.epochs.len() == 3, "{div}: ran {} epochs", r.epochs.len());
        let ppl = r.final_val().perplexity;
        ensure!(ppl.is_finite(), "{div}: final perplexity {ppl}");
        finals.push(format!("{div} {ppl:.2}"));
    }
    Ok(format!(
        "all zero at teacher = student; final ppl {}",
        finals.join(", ")
    ))
}

fn round_student(s: &Student) -> Student {
    let r = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| f64::from(x as f32)).collect() };
    let mut out = s
        .map_linears(|_, l| {
            let kernels = l
                .kernels()
                .iter()
                .map(|k| {
                    SvidKernel::new(k.bits.clone(), r(&k.s_out), r(&k.s_in)).expect("same shape")
                })
                .collect();
            BooleanLinear::new(kernels, l.bias.as_deref().map(r), &TrainPolicy::LastOnly)
        })
        .expect("rebuild");
    for (_, p) in out.fp_params_mut() {
        let (rows, cols) = p.value.shape();
        p.value = DenseMatrix::new(rows, cols, r(p.value.as_slice())).expect("same shape");
    }
    out
}

fn c12_checkpoint() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    // The 0x8D row.
    let pattern = [true, false, true, true, false, false, false, true];
    let mut t =
        build_teacher(&Descriptor::Mlp { sizes: vec![8, 1] }, 0).map_err(|e| e.to_string())?;
    if let Some((_, fc0)) = t.linears_mut().into_iter().next() {
        fc0.weight = DenseMatrix::from_fn(1, 8, |_, j| if pattern[j] { 0.5 } else { -0.5 });
    }
    let s = student(&t, 1, &TrainPolicy::LastOnly);
    let path = dir.path().join("row");
    checkpoint::save_student(&path, &s).map_err(|e| e.to_string())?;
    let bits = std::fs::read(path.join(BITS_BLOB)).map_err(|e| e.to_string())?;
    ensure!(
        bits == [0x8D, 0, 0, 0, 0, 0, 0, 0],
        "packed row is {bits:02x?}"
    );
    let back = checkpoint::load_student(&path).map_err(|e| e.to_string())?;
    ensure!(
        back == round_student(&s),
        "0x8D student does not round-trip"
    );

    // A trained transformer student.
    let sh = shared();
    let s = student(&sh.teacher, 3, &TrainPolicy::LastOnly);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    checkpoint::save_student(&a, &s).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load_student(&a).map_err(|e| e.to_string())?;
    ensure!(
        loaded == round_student(&s),
        "student does not round-trip to its f32 rounding"
    );
    checkpoint::save_student(&b, &loaded).map_err(|e| e.to_string())?;
    for f in ["manifest.json", "f32.bin", "bits.bin"] {
        let same = std::fs::read(a.join(f)).ok() == std::fs::read(b.join(f)).ok();
        ensure!(same, "{f} differs after a second save");
    }
    let tdir = dir.path().join("teacher");
    checkpoint::save_teacher(&tdir, &sh.teacher).map_err(|e| e.to_string())?;
    let t2 = checkpoint::load_teacher(&tdir).map_err(|e| e.to_string())?;
    let t3 = checkpoint::load_teacher(&{
        let p = dir.path().join("teacher2");
        checkpoint::save_teacher(&p, &t2).map_err(|e| e.to_string())?;
        p
    })
    .map_err(|e| e.to_string())?;
    ensure!(t2 == t3, "teacher does not round-trip");

    // Payload size on word-aligned weights.
    let data = &sh.data;
    let wide = Descriptor::Transformer(TransformerConfig {
        vocab: data.vocab_size(),
        d_model: 64,
        n_blocks: 1,
        n_heads: 4,
        context: 16,
    });
    let k = 2;
    let wt = build_teacher(&wide, 9).map_err(|e| e.to_string())?;
    let ws = student(&wt, k, &TrainPolicy::LastOnly);
    let wdir = dir.path().join("wide");
    let manifest = checkpoint::save_student(&wdir, &ws).map_err(|e| e.to_string())?;
    let ideal_bits: usize = ws
        .linears()
        .iter()
        .map(|(_, l)| k * l.in_features() * l.out_features() / 8)
        .sum();
    let ideal_scales: usize = ws
        .linears()
        .iter()
        .map(|(_, l)| k * (l.in_features() + l.out_features()) * 4)
        .sum();
    let (bits_bytes, scale_bytes) = checkpoint::payload_bytes(&manifest);
    let file = std::fs::metadata(wdir.join(BITS_BLOB))
        .map_err(|e| e.to_string())?
        .len();
    ensure!(
        file == bits_bytes,
        "bits.bin has {file} bytes, index says {bits_bytes}"
    );
    let ideal = (ideal_bits + ideal_scales) as f64;
    let actual = (bits_bytes + scale_bytes) as f64;
    let dev = (actual - ideal).abs() / ideal;
    ensure!(
        dev <= 0.01,
        "payload {actual} bytes vs {ideal} ideal ({:.2}%)",
        dev * 100.0
    );
    Ok(format!(
        "0x8D row, bit-exact reload and re-save; payload {actual} B vs K*m*n/8 + scales {ideal} B ({:.3}%)",
        dev * 100.0
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        (
            "SVID optimality against random scale pairs",
            c1_svid_optimality,
        ),
        (
            "SVID beats the plain rank-1 approximation",
            c2_rank1_inequality,
        ),
        (
            "Boolean and +-1 dense products agree bit for bit",
            c3_bool_dense_equivalence,
        ),
        (
            "Boolean backprop signals match dense and FD oracles",
            c4_backprop_oracle,
        ),
        (
            "successive extraction error decreases with diminishing returns",
            c5_extraction_trend,
        ),
        ("flip, reset and beta semantics", c6_optimizer_semantics),
        ("greedy kernel allocation", c7_allocation),
        ("PWCCA invariance, identity layers, seeded probe", c8_pwcca),
        (
            "desk pipeline: extraction then distillation",
            c9_desk_pipeline,
        ),
        (
            "last-kernel-only against first-kernel-only finetuning",
            c10_strategy,
        ),
        ("all five divergences", c11_divergences),
        ("checkpoint format", c12_checkpoint),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
