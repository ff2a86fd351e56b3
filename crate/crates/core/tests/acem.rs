mod common;

use common::*;
use devignet_core::acem::{sca, simple_gate, AcemBlock, AcemConfig, AcemLevel};
use devignet_core::nn::ChannelLayerNorm;
use devignet_core::params::ParamBuilder;
use devignet_core::{ParamStore, Tape, Tensor};

#[test]
fn gate_matches_elementwise_product_exactly() {
    let mut r = rng(1);
    for trial in 0..20 {
        let c = 2 * (1 + trial % 4);
        let x = random_tensor(&[1 + trial % 2, c, 4, 4], -2.0, 2.0, &mut r);
        let tape = Tape::inference();
        let out = simple_gate(&tape.constant(x.clone())).unwrap();
        assert_eq!(out.value().data(), common::simple_gate(&x).as_slice());
    }
}

#[test]
fn sca_matches_pool_matmul_broadcast() {
    let mut r = rng(2);
    for _ in 0..20 {
        let x = random_tensor(&[1, 4, 2, 2], -1.0, 1.0, &mut r);
        let w = random_tensor(&[4, 4], -1.0, 1.0, &mut r);
        let tape = Tape::inference();
        let out = sca(&tape.constant(x.clone()), &tape.constant(w.clone())).unwrap();
        assert!(max_diff(out.value().data(), &common::sca(&x, &w)) < 1e-6);
    }
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(0);
    let ln = ChannelLayerNorm::new(&mut ParamBuilder::new(&mut store, &mut r), 3);
    let tape = Tape::inference();
    let p = store.bind(&tape);
    let x = random_tensor(&[2, 3, 5, 4], -3.0, 3.0, &mut r);
    let y = ln.forward(&p, &tape.constant(x.clone())).unwrap();
    assert_eq!(y.shape(), x.shape());
    for bi in 0..2 {
        for px in 0..20 {
            let vals: Vec<f64> = (0..3).map(|c| x.data()[(bi * 3 + c) * 20 + px]).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            for c in 0..3 {
                let expected = (vals[c] - mean) / (var + 1e-6).sqrt();
                assert!((y.value().data()[(bi * 3 + c) * 20 + px] - expected).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn block_identity_with_zero_projection() {
    let cfg = AcemConfig {
        channels: 6,
        ..AcemConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(3);
    let block = AcemBlock::new(&mut ParamBuilder::new(&mut store, &mut r), &cfg).unwrap();
    let x = random_tensor(&[1, 6, 7, 5], -1.0, 1.0, &mut r);
    let run = |store: &ParamStore<f64>| {
        let tape = Tape::inference();
        let p = store.bind(&tape);
        block.forward(&p, &tape.constant(x.clone())).unwrap().to_tensor()
    };
    assert_eq!(run(&store).shape(), x.shape());
    assert!(run(&store).max_abs_diff(&x).unwrap() > 0.0);
    *store.get_mut(block.project.weight) = Tensor::zeros(vec![6, 6]);
    *store.get_mut(block.project.bias.unwrap()) = Tensor::zeros(vec![6]);
    assert_eq!(run(&store), x);
}

#[test]
fn level_shapes_and_bypass() {
    let cfg = AcemConfig {
        channels: 8,
        ..AcemConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(4);
    let level = AcemLevel::new(&mut ParamBuilder::new(&mut store, &mut r), &cfg).unwrap();
    let off = AcemLevel::new(
        &mut ParamBuilder::new(&mut store, &mut r).pp("off"),
        &AcemConfig {
            enabled: false,
            ..cfg.clone()
        },
    )
    .unwrap();
    let tape = Tape::inference();
    let p = store.bind(&tape);
    let high = tape.constant(random_tensor(&[1, 3, 32, 32], -0.2, 0.2, &mut r));
    let ctx = tape.constant(random_tensor(&[1, 3, 32, 32], 0.0, 1.0, &mut r));
    let out = level.refine_highfreq(&p, &high, &ctx).unwrap();
    assert_eq!(out.shape(), &[1, 3, 32, 32]);
    assert_ne!(out.value(), high.value());
    assert_eq!(off.refine_highfreq(&p, &high, &ctx).unwrap().value(), high.value());
}

#[test]
fn input_gradient_is_nonzero() {
    let cfg = AcemConfig {
        channels: 4,
        ..AcemConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(5);
    let block = AcemBlock::new(&mut ParamBuilder::new(&mut store, &mut r), &cfg).unwrap();
    let x = random_tensor(&[1, 4, 3, 3], -1.0, 1.0, &mut r);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let xv = tape.leaf(x.clone());
    let total = block.forward(&p, &xv).unwrap().sum();
    let grads = tape.backward(&total).unwrap();
    let g = grads.get(&xv).unwrap();
    // central differences agree with the analytic gradient and are nonzero
    let f = |t: &Tensor<f64>| {
        let tape = Tape::inference();
        let p = store.bind(&tape);
        block.forward(&p, &tape.constant(t.clone())).unwrap().value().sum()
    };
    for i in 0..x.len() {
        let mut a = x.clone();
        a.data_mut()[i] += 1e-6;
        let mut b = x.clone();
        b.data_mut()[i] -= 1e-6;
        let fd = (f(&a) - f(&b)) / 2e-6;
        assert!(fd.abs() > 1e-8);
        assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
    }
}
