//! Dense versus Boolean matrix-product microbenchmark.

use std::fmt::Write as _;
use std::time::Instant;

use mbk_core::tensor::{matmul_bool, matmul_dense, BitMatrix, DenseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// Weight is `size × size`.
    pub size: usize,
    pub batch: usize,
    pub repeats: usize,
    /// Median wall time in seconds.
    pub dense_secs: f64,
    pub bool_secs: f64,
    /// Storage of the weight as `f32` values and as packed bits.
    pub dense_bytes: usize,
    pub bool_bytes: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time(repeats: usize, mut f: impl FnMut() -> DenseMatrix) -> f64 {
    let samples = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(f());
            start.elapsed().as_secs_f64().max(1e-9)
        })
        .collect();
    median(samples)
}

/// Checks that both products agree bit for bit, then times each.
pub fn run(sizes: &[usize], batch: usize, repeats: usize, seed: u64) -> CliResult<Vec<BenchRow>> {
    if batch == 0 || repeats == 0 {
        return Err(CliError::validation(
            "bench batch and repeats must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 {
            return Err(CliError::validation("bench sizes must be positive"));
        }
        let x = DenseMatrix::from_fn(batch, size, |_, _| rng.random_range(-1.0..1.0));
        let bits = BitMatrix::from_fn(size, size, |_, _| rng.random_bool(0.5));
        let dense = bits.unpack();
        let a = matmul_dense(&x, &dense)?;
        let b = matmul_bool(&x, &bits)?;
        if a.as_slice()
            .iter()
            .zip(b.as_slice())
            .any(|(p, q)| p.to_bits() != q.to_bits())
        {
            return Err(CliError::runtime(format!(
                "Boolean product disagrees with the dense product at size {size}"
            )));
        }
        let dense_secs = time(repeats, || {
            matmul_dense(&x, &dense).expect("shapes checked")
        });
        let bool_secs = time(repeats, || matmul_bool(&x, &bits).expect("shapes checked"));
        rows.push(BenchRow {
            size,
            batch,
            repeats,
            dense_secs,
            bool_secs,
            dense_bytes: size * size * 4,
            bool_bytes: bits.payload_bytes(),
        });
    }
    Ok(rows)
}

pub fn table(rows: &[BenchRow]) -> String {
    let header = [
        "size",
        "batch",
        "repeats",
        "dense_ms",
        "bool_ms",
        "bool/dense",
        "dense_bytes",
        "bool_bytes",
    ];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.size.to_string(),
                r.batch.to_string(),
                r.repeats.to_string(),
                format!("{:.4}", r.dense_secs * 1e3),
                format!("{:.4}", r.bool_secs * 1e3),
                format!("{:.3}", r.bool_secs / r.dense_secs),
                r.dense_bytes.to_string(),
                r.bool_bytes.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut s = String::new();
    let line = |s: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        writeln!(s, "{}", parts.join("  ")).expect("writing to a String");
    };
    line(&mut s, &header);
    for r in &body {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        line(&mut s, &cells);
    }
    s
}
