use mbk_core::linear::{BooleanLinear, LinearOp, TrainPolicy};
use mbk_core::optim::{bool_step, FlipAccumulator};
use mbk_core::svid::{reconstruct, successive_extract, SvidKernel};
use mbk_core::tensor::{matmul_dense, BitMatrix, DenseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_like(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0)
    })
}

fn mse(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.rows() as f64
}

#[test]
fn layer_output_equals_dense_product_with_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = gaussian_like(&mut rng, 24, 70);
    let mut layer = BooleanLinear::from_dense(&w, 3, &TrainPolicy::All).unwrap();
    let report = successive_extract(&w, 3).unwrap();
    let expected = reconstruct(&report.kernels, (24, 70)).unwrap();
    assert_eq!(layer.effective_weight(), expected);

    let x = gaussian_like(&mut rng, 9, 70);
    let y = layer.infer(&x).unwrap();
    let dense = matmul_dense(&x, &expected).unwrap();
    for (a, b) in y.as_slice().iter().zip(dense.as_slice()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
    assert_eq!(layer.forward(&x).unwrap(), y);
}

#[test]
fn flip_training_recovers_corrupted_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m, n) = (16, 48);
    let target_bits = BitMatrix::from_fn(m, n, |_, _| rng.random_bool(0.5));
    let s_out: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
    let s_in: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let target = BooleanLinear::new(
        vec![SvidKernel::new(target_bits.clone(), s_out.clone(), s_in.clone()).unwrap()],
        None,
        &TrainPolicy::All,
    )
    .unwrap();

    let mut corrupted = target_bits.clone();
    for r in 0..m {
        for c in 0..n {
            if rng.random_bool(0.2) {
                corrupted.flip(r, c);
            }
        }
    }
    let mismatches = |b: &BitMatrix| {
        (0..m)
            .flat_map(|r| (0..n).map(move |c| (r, c)))
            .filter(|&(r, c)| b.get(r, c) != target_bits.get(r, c))
            .count()
    };
    let initial_mismatch = mismatches(&corrupted);
    let mut student = BooleanLinear::new(
        vec![SvidKernel::new(corrupted, s_out, s_in).unwrap()],
        None,
        &TrainPolicy::All,
    )
    .unwrap();
    let mut state = FlipAccumulator::for_layer(&student, 0.05);

    let probe = gaussian_like(&mut rng, 256, n);
    let probe_target = target.infer(&probe).unwrap();
    let initial_loss = mse(&student.infer(&probe).unwrap(), &probe_target);
    for _ in 0..300 {
        let x = gaussian_like(&mut rng, 32, n);
        let y = student.forward(&x).unwrap();
        let t = target.infer(&x).unwrap();
        let z = DenseMatrix::from_fn(32, m, |i, j| 2.0 * (y.get(i, j) - t.get(i, j)) / 32.0);
        let signals = student.backward(&z).unwrap();
        let report = bool_step(&mut student, &signals, &mut state).unwrap();
        assert_eq!(report.total, m * n);
        assert_eq!(
            report.beta,
            (report.total - report.flipped) as f64 / report.total as f64
        );
    }
    let final_mismatch = mismatches(&student.kernels()[0].bits);
    let final_loss = mse(&student.infer(&probe).unwrap(), &probe_target);
    assert!(
        final_mismatch * 4 < initial_mismatch,
        "{initial_mismatch} -> {final_mismatch}"
    );
    assert!(
        final_loss < 0.25 * initial_loss,
        "{initial_loss} -> {final_loss}"
    );
}

#[test]
fn frozen_kernels_never_flip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = gaussian_like(&mut rng, 12, 20);
    let mut layer = BooleanLinear::from_dense(&w, 3, &TrainPolicy::LastOnly).unwrap();
    let before: Vec<BitMatrix> = layer.kernels().iter().map(|k| k.bits.clone()).collect();
    let mut state = FlipAccumulator::for_layer(&layer, 10.0).with_threshold(0.0);
    for _ in 0..20 {
        let x = gaussian_like(&mut rng, 8, 20);
        layer.forward(&x).unwrap();
        let signals = layer.backward(&gaussian_like(&mut rng, 8, 12)).unwrap();
        bool_step(&mut layer, &signals, &mut state).unwrap();
    }
    assert_eq!(layer.kernels()[0].bits, before[0]);
    assert_eq!(layer.kernels()[1].bits, before[1]);
    assert_ne!(layer.kernels()[2].bits, before[2]);
    let (flips, total) = layer.flip_stats();
    assert_eq!(&flips[..2], &[0, 0]);
    assert!(flips[2] > 0);
    assert_eq!(total, 3 * 12 * 20);
}
