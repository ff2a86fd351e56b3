//! Training loop, evaluation protocol and single-image inference.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::data::{PairedDir, PairedSample, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{self, SSIM_WEIGHT};
use crate::metrics::{ImageMetrics, MetricsReport};
use crate::model::{DeVigNet, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
/// Decoded training pairs are kept in memory up to this many samples.
const CACHE_BUDGET_SAMPLES: usize = 1 << 26;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub crop: usize,
    pub loss_lambda: f64,
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps (0: never).
    pub eval_every: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub dataset_path: PathBuf,
    /// Held-out pairs; defaults to the `test` split of `dataset_path`.
    pub eval_path: Option<PathBuf>,
    /// Logs and checkpoints are written here when set.
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 1,
            steps: 1000,
            crop: 512,
            loss_lambda: SSIM_WEIGHT,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            dataset_path: PathBuf::from("data"),
            eval_path: None,
            out_dir: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small model and crops for CPU runs.
    pub fn toy() -> Self {
        let mut cfg = Self {
            crop: 128,
            steps: 200,
            ..Self::default()
        };
        cfg.model.daft.channels = 16;
        cfg.model.acem.channels = 16;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.steps == 0 {
            return fail("steps must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.crop < self.model.size_multiple() {
            return Err(Error::Config(format!(
                "crop {} is smaller than the model's minimum side {}",
                self.crop,
                self.model.size_multiple()
            )));
        }
        if !(self.loss_lambda >= 0.0) {
            return fail("loss_lambda must be non-negative");
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    fn eval_dir(&self) -> Result<PairedDir> {
        match &self.eval_path {
            Some(p) => PairedDir::open(p, Split::Test),
            None => PairedDir::open(&self.dataset_path, Split::Test),
        }
    }
}

/// Stacks equally sized `(1, 3, H, W)` maps into a batch.
fn stack(maps: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let shape = maps[0].shape().to_vec();
    if maps.iter().any(|m| m.shape() != shape.as_slice()) {
        return Err(Error::Data("batch members differ in size; lower crop".into()));
    }
    let mut data = Vec::with_capacity(maps.len() * maps[0].len());
    for m in maps {
        data.extend_from_slice(m.data());
    }
    let mut s = shape;
    s[0] = maps.len();
    Tensor::new(s, data)
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    text.push_str(line);
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub struct Trainer {
    cfg: TrainConfig,
    model: DeVigNet<f32>,
    adam: Adam<f32>,
    data: PairedDir,
    cache: Vec<Option<PairedSample<f32>>>,
    cached_samples: usize,
    step: u64,
    losses: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DeVigNet::new(cfg.model.clone())?;
        let adam = Adam::new(cfg.adam(), model.params());
        Self::assemble(cfg, model, adam, 0)
    }

    /// Continues from a checkpoint written by a run with the same model
    /// configuration.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.config != cfg.model {
            return Err(Error::Checkpoint(
                "checkpoint model configuration differs from the training configuration".into(),
            ));
        }
        let model = DeVigNet::with_params(cfg.model.clone(), &ckpt.weights)?;
        let adam = match &ckpt.optimizer {
            Some(state) => {
                let order = |s: &[(String, Tensor<f32>)]| -> Result<Vec<Tensor<f32>>> {
                    model
                        .params()
                        .iter()
                        .map(|(_, name, _)| {
                            s.iter()
                                .find(|(n, _)| n == name)
                                .map(|(_, t)| t.clone())
                                .ok_or_else(|| Error::Checkpoint(format!("no optimizer state for {name}")))
                        })
                        .collect()
                };
                Adam::from_state(cfg.adam(), model.params(), state.step, order(&state.m)?, order(&state.v)?)?
            }
            None => Adam::new(cfg.adam(), model.params()),
        };
        Self::assemble(cfg, model, adam, ckpt.step)
    }

    fn assemble(cfg: TrainConfig, model: DeVigNet<f32>, adam: Adam<f32>, step: u64) -> Result<Self> {
        let data = PairedDir::open(&cfg.dataset_path, Split::Train)?;
        if data.is_empty() {
            return Err(Error::Data(format!(
                "no training pairs in {}",
                cfg.dataset_path.display()
            )));
        }
        if let Some(dir) = &cfg.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let cache = vec![None; data.len()];
        Ok(Self {
            cfg,
            model,
            adam,
            data,
            cache,
            cached_samples: 0,
            step,
            losses: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &DeVigNet<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Losses of the steps run by this trainer, in order.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    fn sample(&mut self, index: usize) -> Result<PairedSample<f32>> {
        if let Some(s) = &self.cache[index] {
            return Ok(s.clone());
        }
        let s = self.data.get::<f32>(index)?;
        let size = s.input.data().len() * 2;
        if self.cached_samples + size <= CACHE_BUDGET_SAMPLES {
            self.cached_samples += size;
            self.cache[index] = Some(s.clone());
        }
        Ok(s)
    }

    /// Batch for `step`, drawn from a stream seeded by `(seed, step)` so a
    /// resumed run sees the same data.
    fn batch(&mut self, step: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        let (mut inputs, mut targets) = (Vec::new(), Vec::new());
        for _ in 0..self.cfg.batch_size {
            let index = rng.random_range(0..self.data.len());
            let pair = self.sample(index)?.random_crop(self.cfg.crop, &mut rng)?;
            inputs.push(pair.input.to_feature_map());
            targets.push(pair.target.to_feature_map());
        }
        Ok((stack(&inputs)?, stack(&targets)?))
    }

    /// One optimisation step; returns its loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step;
        let (input, target) = self.batch(step)?;
        let tape = Tape::new();
        let p = self.model.params().bind(&tape);
        let pred = self.model.forward_var(&p, &tape.constant(input))?;
        let loss = loss::loss_weighted(&pred, &tape.constant(target), self.cfg.loss_lambda)?;
        let value = loss.value().data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, value });
        }
        let grads = p.gradients(&tape.backward(&loss)?);
        drop(p);
        self.adam.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        self.losses.push(value);
        if let Some(dir) = &self.cfg.out_dir {
            append_line(
                &dir.join(TRAIN_LOG),
                "step,loss,lr",
                &format!("{},{},{}", self.step, value, self.cfg.lr),
            )?;
        }
        Ok(value)
    }

    /// Held-out metrics of the current weights at native resolution.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let dir = self.cfg.eval_dir()?;
        Ok(evaluate_dir(&self.model, &dir, None)?.output)
    }

    /// Runs until `self.step() == until`, logging, evaluating and
    /// checkpointing as configured.
    pub fn run_until(&mut self, until: u64) -> Result<()> {
        while self.step < until {
            self.train_step()?;
            let s = self.step;
            if self.cfg.eval_every > 0 && s % self.cfg.eval_every == 0 {
                let report = self.evaluate()?;
                if let Some(dir) = &self.cfg.out_dir {
                    let a = &report.aggregate;
                    append_line(
                        &dir.join(EVAL_LOG),
                        "step,psnr_db,ssim,mae_255",
                        &format!("{s},{},{},{}", a.psnr_db, a.ssim, a.mae_255),
                    )?;
                }
            }
            if self.cfg.checkpoint_every > 0 && s % self.cfg.checkpoint_every == 0 {
                self.save_checkpoint()?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.model.config().clone(), self.model.params(), self.step);
        let (m, v) = self.adam.moments();
        let named = |s: &[Tensor<f32>]| {
            self.model
                .params()
                .iter()
                .zip(s)
                .map(|((_, name, _), t)| (name.to_string(), t.clone()))
                .collect()
        };
        ckpt.optimizer = Some(OptimizerState {
            step: self.adam.step_count(),
            m: named(m),
            v: named(v),
        });
        ckpt
    }

    /// Writes the current state to `<out_dir>/checkpoint` if an output
    /// directory is configured.
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        match &self.cfg.out_dir {
            Some(dir) => {
                let path = dir.join(CHECKPOINT_DIR);
                self.checkpoint().save(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }
}

/// Full training run from fresh weights.
pub fn train(cfg: TrainConfig) -> Result<Checkpoint> {
    let steps = cfg.steps;
    let mut trainer = Trainer::new(cfg)?;
    trainer.run_until(steps)?;
    trainer.save_checkpoint()?;
    Ok(trainer.checkpoint())
}

pub fn load_model(ckpt_dir: impl AsRef<Path>) -> Result<DeVigNet<f32>> {
    let ckpt = Checkpoint::load(ckpt_dir)?;
    DeVigNet::with_params(ckpt.config, &ckpt.weights)
}

/// Metrics of the model output and of the untouched input against the
/// target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub resolution: Option<usize>,
    pub input: MetricsReport,
    pub output: MetricsReport,
}

pub fn evaluate_dir(model: &DeVigNet<f32>, dir: &PairedDir, resolution: Option<usize>) -> Result<EvalResult> {
    let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
    for i in 0..dir.len() {
        let mut pair = dir.get::<f32>(i)?;
        if let Some(r) = resolution {
            pair = pair.resize(r, r)?;
        }
        let out = model.forward(&pair.input)?;
        inputs.push(ImageMetrics::compute(&pair.id, &pair.input, &pair.target)?);
        outputs.push(ImageMetrics::compute(&pair.id, &out, &pair.target)?);
    }
    let res = resolution.map(|r| [r, r]);
    Ok(EvalResult {
        resolution,
        input: MetricsReport::new(inputs, res),
        output: MetricsReport::new(outputs, res),
    })
}

/// Evaluates the test split of `data` at each resolution (native size when
/// `resolutions` is empty).
pub fn evaluate(model: &DeVigNet<f32>, data: impl AsRef<Path>, resolutions: &[usize]) -> Result<Vec<EvalResult>> {
    let dir = PairedDir::open(data, Split::Test)?;
    if dir.is_empty() {
        return Err(Error::Data(format!("no evaluation pairs in {}", dir.root().display())));
    }
    if resolutions.is_empty() {
        return Ok(vec![evaluate_dir(model, &dir, None)?]);
    }
    resolutions
        .iter()
        .map(|&r| evaluate_dir(model, &dir, Some(r)))
        .collect()
}

/// Plain-text table of aggregate metrics with units.
pub fn format_results(results: &[EvalResult]) -> String {
    let mut out = String::from("resolution  row     PSNR (dB)  SSIM    MAE (0-255)\n");
    for r in results {
        let res = r.resolution.map_or("native".to_string(), |v| format!("{v}x{v}"));
        for (name, rep) in [("Input", &r.input), ("Output", &r.output)] {
            let a = &rep.aggregate;
            let _ = writeln!(out, "{res:<11} {name:<7} {:>9.2}  {:.4}  {:>11.2}", a.psnr_db, a.ssim, a.mae_255);
        }
    }
    out
}

/// Devignets one image file; with `grid` also writes `<stem>_grid.png`
/// holding input and output side by side.
pub fn infer(model: &DeVigNet<f32>, input: impl AsRef<Path>, output: impl AsRef<Path>, grid: bool) -> Result<Image<f32>> {
    let output = output.as_ref();
    let img = Image::<f32>::load(input)?;
    let out = model.forward(&img)?;
    out.save_png(output)?;
    if grid {
        let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
        let path = output.with_file_name(format!("{stem}_grid.png"));
        Image::hstack(&[&img, &out])?.save_png(path)?;
    }
    Ok(out)
}
