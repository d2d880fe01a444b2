use numkit::{
    adam_step, grad_check, mlp_backward, mlp_forward, Activation, AdamConfig, Mlp, MlpSpec,
    ParamStore, Tensor2,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn random_network_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Gelu, Activation::Tanh).unwrap();
        let mlp = Mlp::register(&mut store, "net", spec, &mut rng).unwrap();
        let x = random_input(&mut rng, 5, 3);
        let target = random_input(&mut rng, 5, 2);
        let err = grad_check(&mut store, |s, grad| {
            let (y, tape) = mlp_forward(&mlp, s, &x)?;
            let mut up = Tensor2::zeros(y.rows(), y.cols());
            let mut loss = 0.0;
            for i in 0..y.len() {
                let d = y.data()[i] - target.data()[i];
                loss += 0.5 * d * d;
                up.data_mut()[i] = d;
            }
            if grad {
                mlp_backward(&tape, s, &up)?;
            }
            Ok(loss)
        });
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn chained_networks_propagate_input_gradients() {
    // Two networks composed; the input gradient of the second feeds the first.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let a = Mlp::register(
        &mut store,
        "a",
        MlpSpec::new(vec![4, 6, 3], Activation::Tanh, Activation::Tanh).unwrap(),
        &mut rng,
    )
    .unwrap();
    let b = Mlp::register(
        &mut store,
        "b",
        MlpSpec::new(vec![5, 6, 1], Activation::Gelu, Activation::Identity).unwrap(),
        &mut rng,
    )
    .unwrap();
    let x = random_input(&mut rng, 3, 4);
    let side = random_input(&mut rng, 3, 2);
    let err = grad_check(&mut store, |s, grad| {
        let (h, ta) = mlp_forward(&a, s, &x)?;
        let joined = Tensor2::hcat(&[&h, &side])?;
        let (y, tb) = mlp_forward(&b, s, &joined)?;
        let loss: f64 = y.data().iter().map(|v| v.abs()).sum();
        if grad {
            let up = y.map(f64::signum);
            let gj = mlp_backward(&tb, s, &up)?;
            mlp_backward(&ta, s, &gj.slice_cols(0, 3)?)?;
        }
        Ok(loss)
    });
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn parameter_file_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let spec = MlpSpec::new(vec![7, 5, 3], Activation::Relu, Activation::Sigmoid).unwrap();
    let mlp = Mlp::register(&mut store, "p", spec.clone(), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.bin");
    store.save(&path).unwrap();

    let mut fresh = ParamStore::new();
    Mlp::register_zeroed(&mut fresh, "p", spec.clone()).unwrap();
    fresh.load_values(&path).unwrap();
    let a: Vec<u64> = store.flat_values().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = fresh.flat_values().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);

    let rebound = Mlp::bind(&fresh, "p", spec).unwrap();
    let x = random_input(&mut rng, 2, 7);
    assert_eq!(mlp.infer(&store, &x).unwrap(), rebound.infer(&fresh, &x).unwrap());
}

#[test]
fn training_reduces_regression_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let spec = MlpSpec::new(vec![1, 16, 1], Activation::Tanh, Activation::Identity).unwrap();
    let mlp = Mlp::register(&mut store, "f", spec, &mut rng).unwrap();
    let xs: Vec<f64> = (0..32).map(|i| -1.0 + 2.0 * i as f64 / 31.0).collect();
    let x = Tensor2::new(32, 1, xs.clone()).unwrap();
    let y: Vec<f64> = xs.iter().map(|v| (2.0 * v).sin()).collect();
    let cfg = AdamConfig::with_lr(1e-2);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..500 {
        let (pred, tape) = mlp_forward(&mlp, &store, &x).unwrap();
        let mut up = Tensor2::zeros(32, 1);
        let mut loss = 0.0;
        for i in 0..32 {
            let d = pred.data()[i] - y[i];
            loss += d * d / 32.0;
            up.data_mut()[i] = 2.0 * d / 32.0;
        }
        first.get_or_insert(loss);
        last = loss;
        mlp_backward(&tape, &mut store, &up).unwrap();
        adam_step(&mut store, &cfg).unwrap();
    }
    assert!(last < first.unwrap() * 0.05, "{first:?} -> {last}");
}

proptest! {
    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, rows in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Gelu, Activation::Identity).unwrap();
        let mlp = Mlp::register(&mut store, "d", spec, &mut rng).unwrap();
        let x = random_input(&mut rng, rows, 4);
        let (a, _) = mlp_forward(&mlp, &store, &x).unwrap();
        let (b, _) = mlp_forward(&mlp, &store.clone(), &x).unwrap();
        let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(ab, bb);
    }
}
