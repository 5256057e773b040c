use oneshot_core::gradcheck;
use oneshot_core::layers::{build_merged_cnn, build_siamese_tower, CnnConfig, Conv2d, LayerSpec, LayerStack};
use oneshot_core::params::ParamStore;
use oneshot_core::seed;
use oneshot_core::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

const STEP: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv_with(store: &mut ParamStore, c_in: usize, c_out: usize, k: usize, w: f64) -> Conv2d {
    let conv = Conv2d::new(store, "c", c_in, c_out, k, 1, 0, &mut seed::rng(0));
    let shape = store.get(conv.weight).shape().to_vec();
    store.set(conv.weight, Tensor::full(&shape, w)).unwrap();
    conv
}

#[test]
fn unit_kernel_is_identity() {
    let mut store = ParamStore::new();
    let conv = conv_with(&mut store, 1, 1, 1, 1.0);
    let x = random(&[2, 1, 4, 5], 3);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = conv.forward(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn ones_kernel_sums_window() {
    let mut store = ParamStore::new();
    let conv = conv_with(&mut store, 1, 1, 3, 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
    let y = conv.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv_channel_mismatch() {
    let mut store = ParamStore::new();
    let conv = conv_with(&mut store, 2, 1, 3, 1.0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 5, 5]));
    assert!(matches!(conv.forward(&mut tape, &store, x), Err(Error::Shape(_))));
}

#[test]
fn conv_gradient() {
    for s in 0..3 {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 0, &mut seed::rng(s));
        let b = random(&[3], s + 9);
        store.set(conv.bias, b).unwrap();
        let x = random(&[1, 2, 6, 6], s + 20);
        let w = store.get(conv.weight).clone();
        let bias = store.get(conv.bias).clone();
        let report = gradcheck::check(
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], 1, 0)?;
                let q = tape.square(y)?;
                tape.sum(q)
            },
            &[x, w, bias],
            STEP,
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {s}: {report:?}");
    }
}

#[test]
fn strided_padded_conv_gradient() {
    let x = random(&[2, 2, 7, 6], 1);
    let w = random(&[3, 2, 3, 3], 2);
    let b = random(&[3], 3);
    let report = gradcheck::check(
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], 2, 1)?;
            let q = tape.square(y)?;
            tape.sum(q)
        },
        &[x, w, b],
        STEP,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn maxpool_values_and_ties() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 0.5));
    let y = tape.maxpool2d(x, 2, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap().data();
    // top-left of each 2x2 window
    let mut expect = vec![0.0; 16];
    for i in [0, 2, 8, 10] {
        expect[i] = 1.0;
    }
    assert_eq!(g, &expect[..]);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(matches!(tape.maxpool2d(x, 3, 1), Err(Error::Shape(_))));
}

#[test]
fn maxpool_gradient() {
    for s in 0..5 {
        let x = random(&[1, 1, 4, 4], s);
        let report = gradcheck::check(
            |tape, v| {
                let y = tape.maxpool2d(v[0], 2, 2)?;
                let q = tape.square(y)?;
                tape.sum(q)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert!(report.passes(1e-4), "seed {s}: {report:?}");
    }
}

fn conv_params(k: usize, c_in: usize, c_out: usize) -> usize {
    k * k * c_in * c_out + c_out
}

#[test]
fn merged_cnn_shape_and_parameter_count() {
    let mut store = ParamStore::new();
    let net = build_merged_cnn(&[2, 96, 96], &mut store, &mut seed::rng(1)).unwrap();
    assert_eq!(net.output_shape(), &[2]);
    // 96 -conv-> 94 -conv-> 92 -pool-> 46 -conv-> 44 -conv-> 42 -pool-> 21
    let flat = 64 * 21 * 21;
    let expect = conv_params(3, 2, 32)
        + conv_params(3, 32, 32)
        + conv_params(3, 32, 64)
        + conv_params(3, 64, 64)
        + flat * 128
        + 128
        + 128 * 2
        + 2;
    assert_eq!(store.count(), expect);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 96, 96]));
    let y = net.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2]);
    assert!(tape.value(y).is_finite());
}

#[test]
fn siamese_tower_shape_and_sharing() {
    let mut store = ParamStore::new();
    let tower = build_siamese_tower(&[1, 100, 100], &mut store, &mut seed::rng(2)).unwrap();
    assert_eq!(tower.output_shape(), &[5]);
    let x = random(&[1, 1, 100, 100], 5);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let b = tape.constant(x);
    let ea = tower.forward(&mut tape, &store, a).unwrap();
    let eb = tower.forward(&mut tape, &store, b).unwrap();
    assert_eq!(tape.value(ea).shape(), &[1, 5]);
    assert_eq!(tape.value(ea), tape.value(eb));
}

#[test]
fn siamese_tower_gradient_reduced() {
    let mut cfg = CnnConfig::siamese(&[1, 8, 8]);
    cfg.dense = vec![6, 6, 5];
    let mut store = ParamStore::new();
    let tower = cfg.build(&mut store, "t", &mut seed::rng(4)).unwrap();
    let x = random(&[2, 1, 8, 8], 6);
    let report = gradcheck::check_params(
        &store,
        |tape, store| {
            let xv = tape.constant(x.clone());
            let e = tower.forward(tape, store, xv)?;
            let q = tape.square(e)?;
            tape.sum(q)
        },
        STEP,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn siamese_tower_input_gradient_20x20() {
    let mut store = ParamStore::new();
    let tower = build_siamese_tower(&[1, 20, 20], &mut store, &mut seed::rng(8)).unwrap();
    let x = random(&[1, 1, 20, 20], 9);
    let report = gradcheck::check(
        |tape, v| {
            let e = tower.forward(tape, &store, v[0])?;
            let q = tape.square(e)?;
            tape.sum(q)
        },
        &[x],
        STEP,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn merged_cnn_rejects_small_input() {
    let mut store = ParamStore::new();
    let err = build_merged_cnn(&[2, 9, 9], &mut store, &mut seed::rng(0)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn declared_shape_matches_forward(
        c in 1usize..3,
        h in 6usize..14,
        w in 6usize..14,
        f1 in 1usize..4,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
        pool in any::<bool>(),
        units in 1usize..5,
    ) {
        let mut specs = vec![
            LayerSpec::Conv2d { out_channels: f1, kernel: k, stride, padding: pad },
            LayerSpec::Relu,
        ];
        if pool {
            specs.push(LayerSpec::MaxPool { window: 2, stride: 2 });
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Dense { units });
        let mut store = ParamStore::new();
        let stack = LayerStack::build(&[c, h, w], &specs, &mut store, "p", &mut seed::rng(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, c, h, w], 1));
        let y = stack.forward(&mut tape, &store, x).unwrap();
        prop_assert_eq!(&tape.value(y).shape()[1..], stack.output_shape());

        let mut store = ParamStore::new();
        let conv = LayerStack::build(&[c, h, w], &specs[..1], &mut store, "q", &mut seed::rng(0)).unwrap();
        let expect = [f1, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1];
        prop_assert_eq!(conv.output_shape(), &expect[..]);
    }
}
