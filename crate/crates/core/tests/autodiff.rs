use karat_core::gradcheck::{finite_diff_grad, max_relative_error};
use karat_core::tape::{concat_cols, concat_rows, softmax_rows, ProjectionGrad};
use karat_core::{KaratError, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// Weighted sum of an op's output so every output coordinate matters.
fn probe<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(&out.shape(), 1.0, &mut rng));
    out.mul(w).unwrap().sum()
}

/// Checks the tape gradient of a unary builder against finite differences.
fn check_unary<F>(shape: &[usize], trials: u64, build: F)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let x = Tensor::randn(shape, 1.0, &mut rng);
        let eval = |t: &Tensor| {
            let tape = Tape::new();
            let xv = tape.param(t.clone());
            probe(&tape, build(&tape, xv), trial).value().item()
        };
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = probe(&tape, build(&tape, xv), trial);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = finite_diff_grad(eval, &x, STEP);
        let err = max_relative_error(&analytic, &numeric, 1e-4);
        assert!(err < 1e-4, "trial {trial}: relative error {err}");
    }
}

#[test]
fn sum_gives_ones() {
    let tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
    let g = tape.backward(x.sum()).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn half_square_norm_gives_identity() {
    let tape = Tape::new();
    let data = vec![0.3, -1.2, 4.0];
    let x = tape.param(Tensor::new(vec![3], data.clone()).unwrap());
    let loss = x.mul(x).unwrap().sum().scale(0.5);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), data.as_slice());
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(KaratError::Contract(_))));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::filled(&[2], 1.0));
    let y = tape.param(Tensor::filled(&[3], 1.0));
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.get(y).unwrap(), &Tensor::zeros(&[3]));
}

#[test]
fn shared_leaf_accumulates() {
    let tape = Tape::new();
    let x = tape.param(Tensor::filled(&[2], 2.0));
    let loss = x.add(x).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn matmul_gradients() {
    check_unary(&[4, 3], 100, |tape, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = tape.constant(Tensor::randn(&[3, 5], 1.0, &mut rng));
        let a = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
        a.matmul(x.matmul(b).unwrap()).unwrap()
    });
}

#[test]
fn elementwise_gradients() {
    check_unary(&[3, 4], 100, |tape, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let row = tape.constant(Tensor::randn(&[4], 1.0, &mut rng));
        x.mul(x).unwrap().sub(c).unwrap().add(x.scale(0.3)).unwrap().add_row(row).unwrap()
    });
}

#[test]
fn transpose_and_slices() {
    check_unary(&[3, 4], 100, |_, x| {
        let t = x.transpose().unwrap();
        let left = x.slice_cols(0, 2).unwrap();
        let right = x.slice_cols(2, 2).unwrap();
        let swapped = concat_cols(&[right, left]).unwrap();
        let stacked = concat_rows(&[swapped, x.select_row(1).unwrap()]).unwrap();
        stacked.matmul(t).unwrap()
    });
}

#[test]
fn softmax_gradients() {
    check_unary(&[4, 5], 100, |_, x| x.softmax_rows().unwrap());
}

#[test]
fn layer_norm_gradients() {
    check_unary(&[3, 6], 100, |tape, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = tape.constant(Tensor::randn(&[6], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn(&[6], 1.0, &mut rng));
        x.layer_norm(g, b).unwrap()
    });
}

#[test]
fn layer_norm_affine_gradients() {
    check_unary(&[6], 100, |tape, g| {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut rng));
        let b = tape.constant(Tensor::zeros(&[6]));
        x.layer_norm(g, b).unwrap()
    });
}

#[test]
fn gelu_gradients() {
    check_unary(&[10], 100, |_, x| x.gelu());
}

#[test]
fn cross_entropy_gradients() {
    check_unary(&[1, 5], 100, |_, x| {
        x.cross_entropy(&[0.02, 0.02, 0.92, 0.02, 0.02]).unwrap()
    });
}

#[test]
fn masked_projection_passes_active_set() {
    let tape = Tape::new();
    let x = tape.param(Tensor::new(vec![1, 3], vec![2.0, 1.5, -3.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = x.project_rows(ProjectionGrad::Masked).unwrap();
    let g = tape.backward(y.mul(w).unwrap().sum()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0, 0.0]);

    let tape = Tape::new();
    let x = tape.param(Tensor::new(vec![1, 3], vec![2.0, 1.5, -3.0]).unwrap());
    let y = x.project_rows(ProjectionGrad::Stop).unwrap();
    assert!(!y.requires_grad());
}

#[test]
fn softmax_fixed_cases() {
    let u = softmax_rows(&Tensor::zeros(&[1, 4])).unwrap();
    assert_eq!(u.data(), &[0.25; 4]);
    let t = softmax_rows(&Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap()).unwrap();
    assert!((t.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((t.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(
        softmax_rows(&Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap()),
        Err(KaratError::Numeric(_))
    ));
}

/// exp/sum reference computed with compensated summation.
#[test]
fn softmax_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let a = Tensor::randn(&[1, 12], 3.0, &mut rng);
        let s = softmax_rows(&a).unwrap();
        let exps: Vec<f64> = a.data().iter().map(|v| v.exp()).collect();
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for e in &exps {
            let y = e - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        for (o, e) in s.data().iter().zip(&exps) {
            assert!((o - e / sum).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tape = Tape::new();
        let a = tape.param(Tensor::randn(&[6, 6], 1.0, &mut rng));
        let b = tape.param(Tensor::randn(&[6, 6], 1.0, &mut rng));
        let y = a.matmul(b).unwrap().softmax_rows().unwrap();
        let g = tape.backward(y.mul(y).unwrap().sum()).unwrap();
        ((*y.value()).clone(), g.get(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_on_simplex_and_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 1..16),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let a = Tensor::new(vec![1, n], row.clone()).unwrap();
        let s = softmax_rows(&a).unwrap();
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        let shifted = Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap();
        let s2 = softmax_rows(&shifted).unwrap();
        prop_assert!(s.max_abs_diff(&s2) < 1e-12);
    }
}
