mod common;

use common::{random_image, random_tensor, rng};
use devignet_core::loss::{self, SSIM_C1};
use devignet_core::metrics::{self, ImageMetrics, MetricsReport};
use devignet_core::{Image, Tape, Tensor};
use proptest::prelude::*;
use rand::RngExt;

fn loss_value(pred: &Tensor<f64>, target: &Tensor<f64>, which: &str) -> f64 {
    let tape = Tape::inference();
    let (p, t) = (tape.constant(pred.clone()), tape.constant(target.clone()));
    let v = match which {
        "mse" => loss::mse(&p, &t),
        "ssim" => loss::ssim(&p, &t),
        _ => loss::loss_total(&p, &t),
    };
    v.unwrap().value().data()[0]
}

#[test]
fn ssim_matches_window_oracle() {
    let mut r = rng(10);
    for _ in 0..20 {
        let (h, w) = (r.random_range(11..20), r.random_range(11..20));
        let a = random_image(h, w, &mut r);
        // correlated partner so SSIM is not near zero
        let noise = random_image(h, w, &mut r);
        let b = Image::from_fn(h, w, |y, x, c| 0.7 * a.get(y, x, c) + 0.3 * noise.get(y, x, c)).unwrap();
        let got = metrics::ssim(&a, &b).unwrap();
        assert!((got - common::ssim(&a, &b)).abs() < 1e-6);
    }
}

#[test]
fn psnr_and_mae_match_direct_formulas() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (h, w) = (r.random_range(8..24), r.random_range(8..24));
        let (a, b) = (random_image(h, w, &mut r), random_image(h, w, &mut r));
        assert!((metrics::psnr(&a, &b).unwrap() - common::psnr(&a, &b)).abs() < 1e-9);
        assert!((metrics::mae(&a, &b).unwrap() - common::mae(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn constant_pairs_follow_closed_forms() {
    let zero = Image::<f64>::filled(16, 16, 0.0).unwrap();
    let one = Image::<f64>::filled(16, 16, 1.0).unwrap();
    let half = Image::<f64>::filled(16, 16, 0.5).unwrap();
    let expected = SSIM_C1 / (1.0 + SSIM_C1);
    assert!((metrics::ssim(&zero, &one).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 9.999e-5).abs() < 1e-8);
    assert!((metrics::psnr(&zero, &half).unwrap() - 6.0206).abs() < 1e-4);
    assert!((metrics::mae(&zero, &half).unwrap() - 127.5).abs() < 1e-9);
}

#[test]
fn identical_images_are_perfect() {
    let a = random_image(16, 20, &mut rng(12));
    assert_eq!(metrics::psnr(&a, &a).unwrap(), f64::INFINITY);
    assert!((metrics::ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(metrics::mae(&a, &a).unwrap(), 0.0);
}

#[test]
fn size_mismatch_is_an_error() {
    let a = Image::<f64>::filled(16, 16, 0.0).unwrap();
    let b = Image::<f64>::filled(16, 18, 0.0).unwrap();
    assert!(metrics::psnr(&a, &b).is_err());
    assert!(metrics::ssim(&a, &b).is_err());
    assert!(metrics::mae(&a, &b).is_err());
    let tape = Tape::<f64>::inference();
    let x = tape.constant(a.to_feature_map());
    let y = tape.constant(b.to_feature_map());
    assert!(loss::loss_total(&x, &y).is_err());
}

#[test]
fn loss_is_mse_plus_weighted_dissimilarity() {
    let mut r = rng(13);
    for _ in 0..20 {
        let p = random_tensor(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
        let t = random_tensor(&[1, 3, 16, 16], 0.0, 1.0, &mut r);
        let composed = loss_value(&p, &t, "mse") + 0.4 * (1.0 - loss_value(&p, &t, "ssim"));
        assert!((loss_value(&p, &t, "total") - composed).abs() < 1e-8);
    }
}

#[test]
fn loss_examples() {
    let t = random_tensor(&[1, 3, 16, 16], 0.0, 1.0, &mut rng(14));
    assert!(loss_value(&t, &t, "total").abs() < 1e-12);

    let zero = Tensor::<f64>::zeros(vec![1, 3, 16, 16]);
    let half = Tensor::from_fn(vec![1, 3, 16, 16], |_| 0.5);
    let ssim = SSIM_C1 / (0.25 + SSIM_C1);
    assert!((loss_value(&zero, &half, "total") - (0.25 + 0.4 * (1.0 - ssim))).abs() < 1e-12);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(15);
    let p = random_tensor(&[1, 3, 14, 13], 0.1, 0.9, &mut r);
    let t = random_tensor(&[1, 3, 14, 13], 0.1, 0.9, &mut r);
    let tape = Tape::new();
    let leaf = tape.leaf(p.clone());
    let total = loss::loss_total(&leaf, &tape.constant(t.clone())).unwrap();
    let grads = tape.backward(&total).unwrap();
    let g = grads.get(&leaf).unwrap();
    let h = 1e-5;
    for _ in 0..20 {
        let i = r.random_range(0..p.len());
        let mut plus = p.clone();
        plus.data_mut()[i] += h;
        let mut minus = p.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss_value(&plus, &t, "total") - loss_value(&minus, &t, "total")) / (2.0 * h);
        let rel = (fd - g.data()[i]).abs() / fd.abs().max(g.data()[i].abs()).max(1e-8);
        assert!(rel < 1e-3, "index {i}: {fd} vs {}", g.data()[i]);
    }
}

#[test]
fn report_aggregates_are_means() {
    let mut r = rng(16);
    let rows: Vec<_> = (0..7)
        .map(|i| {
            let (a, b) = (random_image(12, 12, &mut r), random_image(12, 12, &mut r));
            ImageMetrics::compute(format!("{i:04}"), &a, &b).unwrap()
        })
        .collect();
    let report = MetricsReport::new(rows.clone(), Some([12, 12]));
    let mean = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    assert!((report.aggregate.psnr_db - mean(|m| m.psnr_db)).abs() < 1e-9);
    assert!((report.aggregate.ssim - mean(|m| m.ssim)).abs() < 1e-9);
    assert!((report.aggregate.mae_255 - mean(|m| m.mae_255)).abs() < 1e-9);
}

#[test]
fn report_serializes_infinite_psnr() {
    let a = random_image(12, 12, &mut rng(17));
    let report = MetricsReport::new(vec![ImageMetrics::compute("0001", &a, &a).unwrap()], None);
    let json = report.to_json().unwrap();
    assert!(json.contains("\"inf\""));
    assert_eq!(MetricsReport::from_json(&json).unwrap(), report);
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,psnr_db,ssim,mae_255"));
    assert!(lines.next().unwrap().starts_with("0001,inf,1,0"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_image(12, 13, &mut r), random_image(12, 13, &mut r));
        prop_assert!((metrics::ssim(&a, &b).unwrap() - metrics::ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(metrics::psnr(&a, &b).unwrap(), metrics::psnr(&b, &a).unwrap());
        prop_assert_eq!(metrics::mae(&a, &b).unwrap(), metrics::mae(&b, &a).unwrap());
    }

    #[test]
    fn ssim_is_at_most_one_and_loss_nonnegative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_image(12, 12, &mut r), random_image(12, 12, &mut r));
        prop_assert!(metrics::ssim(&a, &b).unwrap() < 1.0);
        let l = loss_value(&a.to_feature_map(), &b.to_feature_map(), "total");
        prop_assert!(l > 0.0);
    }
}
