mod common;

use std::path::Path;

use common::{random_image, rng, tiny_model};
use devignet_core::checkpoint::Checkpoint;
use devignet_core::data::{make_synthetic_dataset, SynthOptions, INPUT_DIR, TARGET_DIR};
use devignet_core::harness::{
    evaluate, format_results, infer, load_model, train, TrainConfig, Trainer, CHECKPOINT_DIR, EVAL_LOG, TRAIN_LOG,
};
use devignet_core::model::DeVigNet;
use devignet_core::{Error, Image};

fn dataset(dir: &Path, n: usize) {
    let opts = SynthOptions {
        n,
        size: 40,
        seed: 11,
        clean_dir: None,
    };
    make_synthetic_dataset(&opts, dir).unwrap();
}

fn config(data: &Path) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        crop: 32,
        steps: 6,
        seed: 9,
        dataset_path: data.to_path_buf(),
        model: tiny_model(8),
        ..TrainConfig::default()
    }
}

fn weights_equal(a: &DeVigNet<f32>, b: &DeVigNet<f32>) -> bool {
    a.params().iter().zip(b.params().iter()).all(|((_, na, ta), (_, nb, tb))| {
        na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

#[test]
fn defaults_follow_the_reference_settings() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr, 1e-4);
    assert_eq!(cfg.batch_size, 1);
    assert_eq!(cfg.crop, 512);
    assert_eq!(cfg.loss_lambda, 0.4);
    assert_eq!((cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps), (0.9, 0.999, 1e-8));
    let toy = TrainConfig::toy();
    assert_eq!((toy.crop, toy.model.daft.channels, toy.model.acem.channels), (128, 16, 16));
}

#[test]
fn invalid_settings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 2);
    for bad in [
        TrainConfig { lr: 0.0, ..config(dir.path()) },
        TrainConfig { steps: 0, ..config(dir.path()) },
        TrainConfig { crop: 8, ..config(dir.path()) },
    ] {
        assert!(matches!(Trainer::new(bad), Err(Error::Config(_))));
    }
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join(INPUT_DIR)).unwrap();
    std::fs::create_dir_all(dir.path().join(TARGET_DIR)).unwrap();
    assert!(matches!(Trainer::new(config(dir.path())), Err(Error::Data(_))));
}

#[test]
fn fresh_trainer_holds_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 2);
    let trainer = Trainer::new(config(dir.path())).unwrap();
    let ckpt = trainer.checkpoint();
    assert_eq!(ckpt.step, 0);
    let fresh = DeVigNet::<f32>::new(tiny_model(8)).unwrap();
    let restored = DeVigNet::with_params(ckpt.config, &ckpt.weights).unwrap();
    assert!(weights_equal(&fresh, &restored));
}

#[test]
fn fixed_seed_gives_identical_loss_traces() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 6);
    let trace = || {
        let mut t = Trainer::new(TrainConfig { steps: 10, ..config(dir.path()) }).unwrap();
        t.run_until(10).unwrap();
        t.losses().to_vec()
    };
    let (a, b) = (trace(), trace());
    assert_eq!(a.len(), 10);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.iter().all(|l| l.is_finite() && *l > 0.0));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 6);
    let k = 3;
    let mut straight = Trainer::new(config(dir.path())).unwrap();
    straight.run_until(2 * k).unwrap();

    let ckpt_dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(config(dir.path())).unwrap();
    first.run_until(k).unwrap();
    first.checkpoint().save(ckpt_dir.path()).unwrap();
    let ckpt = Checkpoint::load(ckpt_dir.path()).unwrap();
    assert_eq!(ckpt.step, k);
    let mut second = Trainer::resume(config(dir.path()), &ckpt).unwrap();
    second.run_until(2 * k).unwrap();

    assert_eq!(second.step(), 2 * k);
    assert!(weights_equal(straight.model(), second.model()));
    assert_eq!(&straight.losses()[k as usize..], second.losses());
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 2);
    let ckpt = Trainer::new(config(dir.path())).unwrap().checkpoint();
    let mut other = config(dir.path());
    other.model.pyramid_depth = 3;
    assert!(Trainer::resume(other, &ckpt).is_err());
}

#[test]
fn non_finite_loss_aborts_naming_the_step() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 2);
    let mut ckpt = Trainer::new(config(dir.path())).unwrap().checkpoint();
    ckpt.step = 4;
    let id = ckpt.weights.ids().next().unwrap();
    ckpt.weights.get_mut(id).data_mut()[0] = f32::NAN;
    let mut trainer = Trainer::resume(config(dir.path()), &ckpt).unwrap();
    match trainer.train_step() {
        Err(Error::NonFinite { step, value }) => {
            assert_eq!(step, 4);
            assert!(value.is_nan());
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn train_writes_logs_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 4);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 4,
        eval_every: 2,
        out_dir: Some(out.path().to_path_buf()),
        ..config(dir.path())
    };
    let ckpt = train(cfg).unwrap();
    assert_eq!(ckpt.step, 4);

    let log = std::fs::read_to_string(out.path().join(TRAIN_LOG)).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,lr");
    assert_eq!(lines.len(), 5);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<_> = line.split(',').collect();
        assert_eq!(cols[0].parse::<u64>().unwrap(), i as u64 + 1);
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
        assert_eq!(cols[2].parse::<f64>().unwrap(), 1e-3);
    }
    let eval = std::fs::read_to_string(out.path().join(EVAL_LOG)).unwrap();
    assert_eq!(eval.lines().count(), 3);

    let saved = Checkpoint::load(out.path().join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(saved.step, 4);
    assert!(saved.optimizer.is_some());
}

fn identical_pairs(dir: &Path, n: usize) {
    for sub in [INPUT_DIR, TARGET_DIR] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    let mut r = rng(40);
    for i in 0..n {
        let img = random_image(32, 32, &mut r);
        for sub in [INPUT_DIR, TARGET_DIR] {
            img.save_png(dir.join(sub).join(format!("{i:04}.png"))).unwrap();
        }
    }
}

#[test]
fn baseline_row_is_perfect_for_identical_pairs() {
    let dir = tempfile::tempdir().unwrap();
    identical_pairs(dir.path(), 3);
    let model = DeVigNet::<f32>::new(tiny_model(8)).unwrap();
    let results = evaluate(&model, dir.path(), &[32, 48]).unwrap();
    assert_eq!(results.len(), 2);
    for r in &results {
        for m in &r.input.per_image {
            assert_eq!(m.psnr_db, f64::INFINITY);
            assert!((m.ssim - 1.0).abs() < 1e-12);
            assert_eq!(m.mae_255, 0.0);
        }
        let n = r.output.per_image.len() as f64;
        let mean = r.output.per_image.iter().map(|m| m.mae_255).sum::<f64>() / n;
        assert!((r.output.aggregate.mae_255 - mean).abs() < 1e-9);
    }
    assert_eq!(results[1].output.resolution, Some([48, 48]));
    let table = format_results(&results);
    assert!(table.contains("PSNR (dB)") && table.contains("MAE (0-255)"));
    assert!(table.contains("48x48"));
}

#[test]
fn zero_initialized_inference_reproduces_the_input_png() {
    let dir = tempfile::tempdir().unwrap();
    let model = DeVigNet::<f32>::new(devignet_core::model::ModelConfig {
        zero_init_heads: true,
        ..tiny_model(8)
    })
    .unwrap();
    Checkpoint::new(model.config().clone(), model.params(), 0).save(dir.path().join("ckpt")).unwrap();
    let model = load_model(dir.path().join("ckpt")).unwrap();

    let src = dir.path().join("in.png");
    random_image(37, 51, &mut rng(41)).save_png(&src).unwrap();
    let dst = dir.path().join("out.png");
    infer(&model, &src, &dst, true).unwrap();

    let a = image::open(&src).unwrap().to_rgb8();
    let b = image::open(&dst).unwrap().to_rgb8();
    assert_eq!(a.dimensions(), b.dimensions());
    assert_eq!(a.as_raw(), b.as_raw());
    let grid = Image::<f32>::load(dir.path().join("out_grid.png")).unwrap();
    assert_eq!((grid.height(), grid.width()), (37, 102));

    let again = dir.path().join("again.png");
    infer(&model, &src, &again, false).unwrap();
    assert_eq!(std::fs::read(&dst).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn unreadable_images_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("broken.png");
    std::fs::write(&src, b"not an image").unwrap();
    let model = DeVigNet::<f32>::new(tiny_model(8)).unwrap();
    assert!(infer(&model, &src, dir.path().join("o.png"), false).is_err());
    assert!(infer(&model, dir.path().join("missing.png"), dir.path().join("o.png"), false).is_err());
}
