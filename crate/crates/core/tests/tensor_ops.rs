use oneshot_core::gradcheck;
use oneshot_core::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn leaky_relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = tape.leaky_relu(x, 0.01).unwrap();
    assert_eq!(tape.value(y).data(), &[-0.01, 0.0, 2.0]);
}

#[test]
fn add_values_and_shape_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    let d = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, d), Err(Error::Shape(_))));
}

#[test]
fn scalar_broadcast() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let s = tape.leaf(Tensor::scalar(2.0));
    let p = tape.mul(s, a).unwrap();
    assert_eq!(tape.value(p).data(), &[2.0, 4.0, 6.0]);
    let l = tape.sum(p).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(s).unwrap().data(), &[6.0]);
    assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn relu_subgradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0, 0.0]));
    let y = tape.relu(x).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![-1.0]));
    assert!(matches!(tape.sqrt(x), Err(Error::Numeric(_))));
    let big = tape.constant(Tensor::from_vec(vec![1e300]));
    assert!(matches!(tape.square(big), Err(Error::Numeric(_))));
}

#[test]
fn matmul_values() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
    let r = tape.constant(t(&[1, 2], &[1., 0.]));
    let c = tape.constant(t(&[2, 1], &[2., 5.]));
    let p = tape.matmul(r, c).unwrap();
    assert_eq!(tape.value(p).shape(), &[1, 1]);
    assert_eq!(tape.value(p).data(), &[2.]);
    assert!(matches!(tape.matmul(r, r), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let a = random(&[3, 4], seed);
        let b = random(&[4, 2], seed + 100);
        let report = gradcheck::check(
            |tape, v| {
                let p = tape.matmul(v[0], v[1])?;
                tape.sum(p)
            },
            &[a, b],
            STEP,
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn softmax_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    let x = tape.constant(Tensor::from_vec(vec![0.0, 3f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    let e = tape.constant(Tensor::zeros(&[2, 0]));
    assert!(matches!(tape.softmax(e, 1), Err(Error::Shape(_))));
    assert!(matches!(tape.softmax(x, 1), Err(Error::Shape(_))));
}

#[test]
fn backward_basics() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![0.3, -2.0, 5.0]));
    let l = tape.sum(x).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = tape.square(x).unwrap();
    let l = tape.sum(sq).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    // repeated backward accumulates
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    let c = tape.constant(Tensor::from_vec(vec![1.0]));
    let s = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    let mut other = Tape::new();
    let y = other.leaf(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
}

#[test]
fn elementwise_gradients() {
    for seed in 0..5 {
        let x = random(&[2, 3], seed);
        let y = random(&[2, 3], seed + 50);
        // keep sqrt away from zero
        let pos = Tensor::new(
            vec![2, 3],
            x.data().iter().map(|v| v.abs() + 0.5).collect(),
        )
        .unwrap();
        let report = gradcheck::check(
            |tape, v| {
                let a = tape.add(v[0], v[1])?;
                let s = tape.sub(a, v[1])?;
                let m = tape.mul(s, v[1])?;
                let r = tape.relu(m)?;
                let lr = tape.leaky_relu(v[0], 0.01)?;
                let q = tape.square(lr)?;
                let sq = tape.sqrt(v[2])?;
                let sg = tape.sigmoid(v[1])?;
                let t1 = tape.add(r, q)?;
                let t2 = tape.mul(sq, sg)?;
                let t3 = tape.add(t1, t2)?;
                let t4 = tape.scale(t3, 1.7)?;
                let t5 = tape.add_scalar(t4, -0.3)?;
                let t6 = tape.square(t5)?;
                tape.mean(t6)
            },
            &[x, y, pos],
            STEP,
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn softmax_and_reduction_gradients() {
    for seed in 0..5 {
        let x = random(&[3, 4, 2], seed);
        let w = random(&[3, 4, 2], seed + 7);
        for axis in 0..3 {
            let report = gradcheck::check(
                |tape, v| {
                    let s = tape.softmax(v[0], axis)?;
                    let p = tape.mul(s, v[1])?;
                    let r = tape.sum_axis(p, axis)?;
                    let q = tape.square(r)?;
                    tape.sum(q)
                },
                &[x.clone(), w.clone()],
                STEP,
            )
            .unwrap();
            assert!(report.passes(1e-4), "seed {seed} axis {axis}: {report:?}");
        }
    }
}

#[test]
fn nll_and_distance_gradients() {
    for seed in 0..5 {
        let logits = random(&[4, 3], seed);
        let a = random(&[4, 5], seed + 1);
        let b = random(&[4, 5], seed + 2);
        let report = gradcheck::check(
            |tape, v| {
                let nll = tape.softmax_nll(v[0], &[0, 2, 1, 2])?;
                let d = tape.pair_distance(v[1], v[2])?;
                let s = tape.add(nll, d)?;
                tape.sum(s)
            },
            &[logits, a, b],
            STEP,
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one(values in prop::collection::vec(-700.0f64..700.0, 1..24), rows in 1usize..4) {
        let cols = values.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| values.iter().map(move |v| v - r as f64)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let x = random(&[5, 6], seed);
        let w = random(&[6, 3], seed ^ 0xabc);
        let run = || {
            let mut tape = Tape::new();
            let a = tape.constant(x.clone());
            let b = tape.constant(w.clone());
            let p = tape.matmul(a, b).unwrap();
            let s = tape.softmax(p, 1).unwrap();
            tape.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
