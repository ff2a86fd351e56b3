mod common;

use common::*;
use devignet_core::daft::{AggregationNode, Daft, DaftConfig, FusionTransformer, PatchEmbed, TransformerBlock};
use devignet_core::params::ParamBuilder;
use devignet_core::{ParamStore, Tape, Tensor};

fn cfg(c: usize) -> DaftConfig {
    DaftConfig {
        channels: c,
        heads: 4,
        pos_grid: 4,
        ..DaftConfig::default()
    }
}

#[test]
fn patch_embed_shapes_and_determinism() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(1);
    let embed = PatchEmbed::new(&mut ParamBuilder::new(&mut store, &mut r), &cfg(32));
    let x = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let x2 = random_tensor(&[1, 3, 64, 64], 0.0, 1.0, &mut r);
    let tape = Tape::inference();
    let p = store.bind(&tape);
    let a = embed.forward(&p, &tape.constant(x.clone())).unwrap();
    let b = embed.forward(&p, &tape.constant(x)).unwrap();
    assert_eq!(a.tokens().shape(), &[1, 64, 32]);
    assert_eq!(a.tokens(), b.tokens());
    let big = embed.forward(&p, &tape.constant(x2)).unwrap();
    assert_eq!(big.grid(), (16, 16));
    let bad = tape.constant(Tensor::zeros(vec![1, 3, 30, 32]));
    assert!(embed.forward(&p, &bad).is_err());
}

#[test]
fn transformer_block_identity_shape_and_batch_independence() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(2);
    let block = TransformerBlock::new(&mut ParamBuilder::new(&mut store, &mut r), &cfg(32));
    let a = random_tensor(&[1, 32, 8, 8], -1.0, 1.0, &mut r);
    let b = random_tensor(&[1, 32, 8, 8], -1.0, 1.0, &mut r);
    let ab = Tensor::concat_channels(&[&a, &b]).unwrap().reshape(vec![2, 32, 8, 8]).unwrap();
    let ba = Tensor::concat_channels(&[&b, &a]).unwrap().reshape(vec![2, 32, 8, 8]).unwrap();
    let run = |store: &ParamStore<f64>, x: &Tensor<f64>| {
        let tape = Tape::inference();
        let p = store.bind(&tape);
        block.forward(&p, &tape.constant(x.clone())).unwrap().to_tensor()
    };
    let out_ab = run(&store, &ab);
    let out_ba = run(&store, &ba);
    assert_eq!(out_ab.shape(), &[2, 32, 8, 8]);
    let half = 32 * 64;
    assert!(max_diff(&out_ab.data()[..half], &out_ba.data()[half..]) < 1e-12);
    assert!(max_diff(&out_ab.data()[half..], &out_ba.data()[..half]) < 1e-12);

    store.zero_residual_heads();
    assert_eq!(run(&store, &ab), ab);
}

#[test]
fn fusion_transformer_sums_its_modules() {
    for n in 1..=4 {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(3 + n as u64);
        let ft = FusionTransformer::new(&mut ParamBuilder::new(&mut store, &mut r), &cfg(8), n).unwrap();
        assert_eq!((ft.first.len(), ft.second.len()), (n, n));
        let x = random_tensor(&[1, 8, 4, 4], -1.0, 1.0, &mut r);
        let run = |store: &ParamStore<f64>| {
            let tape = Tape::inference();
            let p = store.bind(&tape);
            ft.forward(&p, &tape.constant(x.clone())).unwrap().to_tensor()
        };
        let reference = run(&store);
        assert_eq!(reference.shape(), x.shape());

        // perturb one parameter of the second module only
        let mut perturbed = store.clone();
        let w = ft.second[0].fc2.weight;
        perturbed.get_mut(w).data_mut()[0] += 0.05;
        assert!(run(&perturbed).max_abs_diff(&reference).unwrap() > 1e-9);

        store.zero_residual_heads();
        let doubled = x.map(|v| 2.0 * v);
        assert!(run(&store).max_abs_diff(&doubled).unwrap() < 1e-12);
    }
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(0);
    assert!(FusionTransformer::new(&mut ParamBuilder::new(&mut store, &mut r), &cfg(8), 5).is_err());
}

#[test]
fn aggregation_node_examples() {
    let c = 32;
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(4);
    let node = AggregationNode::new(&mut ParamBuilder::new(&mut store, &mut r), c);
    let a = random_tensor(&[1, c, 8, 8], -1.0, 1.0, &mut r);
    let b = random_tensor(&[1, c, 8, 8], -1.0, 1.0, &mut r);
    let run = |store: &ParamStore<f64>| {
        let tape = Tape::inference();
        let p = store.bind(&tape);
        node.forward(&p, &tape.constant(a.clone()), &tape.constant(b.clone()))
            .unwrap()
            .to_tensor()
    };
    *store.get_mut(node.project.bias.unwrap()) = Tensor::zeros(vec![c]);
    *store.get_mut(node.project.weight) =
        Tensor::from_fn(vec![c, 2 * c], |i| if i % (2 * c) == i / (2 * c) { 1.0 } else { 0.0 });
    assert_eq!(run(&store), a);
    *store.get_mut(node.project.weight) = Tensor::from_fn(vec![c, 2 * c], |i| {
        let (o, k) = (i / (2 * c), i % (2 * c));
        if k == o || k == o + c { 0.5 } else { 0.0 }
    });
    let mean = a.zip_map(&b, |x, y| (x + y) / 2.0).unwrap();
    let out = run(&store);
    assert_eq!(out.shape(), &[1, c, 8, 8]);
    assert!(out.max_abs_diff(&mean).unwrap() < 1e-12);

    let tape = Tape::inference();
    let p = store.bind(&tape);
    let small = tape.constant(Tensor::zeros(vec![1, c, 4, 8]));
    assert!(node.forward(&p, &tape.constant(a.clone()), &small).is_err());
}

fn build_daft(c: usize, seed: u64) -> (ParamStore<f64>, Daft) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let daft = Daft::new(&mut ParamBuilder::new(&mut store, &mut r), &cfg(c), 1.0, true).unwrap();
    (store, daft)
}

#[test]
fn daft_identity_shape_and_determinism() {
    let (mut store, daft) = build_daft(8, 5);
    let mut r = rng(6);
    let low = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let run = |store: &ParamStore<f64>| {
        let tape = Tape::inference();
        let p = store.bind(&tape);
        daft.forward(&p, &tape.constant(low.clone())).unwrap().to_tensor()
    };
    let out = run(&store);
    assert_eq!(out.shape(), &[1, 3, 32, 32]);
    assert_eq!(run(&store), out);
    let (store2, _) = build_daft(8, 5);
    assert_eq!(run(&store2), out);

    *store.get_mut(daft.head.weight) = Tensor::zeros(vec![48, 8]);
    assert!(run(&store).max_abs_diff(&low).unwrap() < 1e-6);
}

#[test]
fn disabled_daft_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(7);
    let daft = Daft::new(
        &mut ParamBuilder::new(&mut store, &mut r),
        &DaftConfig {
            enabled: false,
            ..cfg(8)
        },
        1.0,
        true,
    )
    .unwrap();
    let tape = Tape::inference();
    let p = store.bind(&tape);
    let low = tape.constant(random_tensor(&[1, 3, 16, 16], 0.0, 1.0, &mut r));
    assert_eq!(daft.forward(&p, &low).unwrap().value(), low.value());
}

#[test]
fn every_parameter_receives_gradient() {
    let (store, daft) = build_daft(8, 8);
    let mut seen = vec![false; store.len()];
    for draw in 0..5 {
        let mut r = rng(100 + draw);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let low = tape.constant(random_tensor(&[1, 3, 16, 16], 0.0, 1.0, &mut r));
        let probe = tape.constant(random_tensor(&[1, 3, 16, 16], -1.0, 1.0, &mut r));
        let loss = daft.forward(&p, &low).unwrap().mul(&probe).unwrap().sum();
        let grads = p.gradients(&tape.backward(&loss).unwrap());
        for (s, g) in seen.iter_mut().zip(&grads) {
            *s |= g.data().iter().any(|v| *v != 0.0);
        }
    }
    let missing: Vec<_> = store
        .ids()
        .zip(&seen)
        .filter(|(_, s)| !**s)
        .map(|(id, _)| store.name(id).to_string())
        .collect();
    assert!(missing.is_empty(), "no gradient for {missing:?}");
}

#[test]
fn positional_grid_transfers_across_resolutions() {
    let (store, daft) = build_daft(8, 9);
    let tape = Tape::inference();
    let p = store.bind(&tape);
    for side in [16, 24, 48] {
        let low = tape.constant(Tensor::full(vec![1, 3, side, side], 0.5));
        assert_eq!(daft.forward(&p, &low).unwrap().shape(), &[1, 3, side, side]);
    }
}
