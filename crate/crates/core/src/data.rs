//! Synthetic vignetting pairs and paired-directory loading.
//!
//! A dataset directory holds `input/` (vignetted) and `target/` (clean)
//! images with matching file names, optionally under `train/` or `test/`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

pub const INPUT_DIR: &str = "input";
pub const TARGET_DIR: &str = "target";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Radial gain law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", content = "params", rename_all = "lowercase")]
pub enum Falloff {
    /// `cos⁴(atan(r·f))`.
    Cos4 { f: f64 },
    /// `1 / (1 + a·r² + b·r⁴ + c·r⁶)`.
    Polynomial { a: f64, b: f64, c: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VignetteProfile {
    /// Optical centre `(cx, cy)` in normalised image coordinates.
    pub center: [f64; 2],
    #[serde(flatten)]
    pub falloff: Falloff,
}

impl VignetteProfile {
    pub fn validate(&self) -> Result<()> {
        if self.center.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!("vignette centre {:?} outside [0, 1]²", self.center)));
        }
        let ok = match self.falloff {
            Falloff::Cos4 { f } => f >= 0.0 && f.is_finite(),
            Falloff::Polynomial { a, b, c } => [a, b, c].iter().all(|v| *v >= 0.0 && v.is_finite()),
        };
        if !ok {
            return Err(Error::Config(format!("invalid falloff parameters {:?}", self.falloff)));
        }
        Ok(())
    }

    pub fn gain(&self, r: f64) -> f64 {
        match self.falloff {
            Falloff::Cos4 { f } => (r * f).atan().cos().powi(4),
            Falloff::Polynomial { a, b, c } => {
                let r2 = r * r;
                1.0 / (1.0 + r2 * (a + r2 * (b + r2 * c)))
            }
        }
    }

    /// Pixel-centre distance to the optical centre, scaled so the farthest
    /// corner pixel is at `r = 1`.
    pub fn radius_fn(&self, height: usize, width: usize) -> impl Fn(usize, usize) -> f64 {
        let cx = self.center[0] * (width - 1) as f64;
        let cy = self.center[1] * (height - 1) as f64;
        let (xm, ym) = ((width - 1) as f64, (height - 1) as f64);
        let far = [(0.0, 0.0), (xm, 0.0), (0.0, ym), (xm, ym)]
            .iter()
            .map(|(x, y)| (x - cx).hypot(y - cy))
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        move |y, x| (x as f64 - cx).hypot(y as f64 - cy) / far
    }
}

/// Draws a profile from `rng`: falloff family uniform, centre in
/// `[0.35, 0.65]²`, `f ∈ [0.6, 1.4]`, `a ∈ [0.5, 2]`, `b ∈ [0, 1]`,
/// `c ∈ [0, 0.5]`.
pub fn sample_profile_with<R: Rng + ?Sized>(rng: &mut R) -> VignetteProfile {
    let center = [rng.random_range(0.35..=0.65), rng.random_range(0.35..=0.65)];
    let falloff = if rng.random_bool(0.5) {
        Falloff::Cos4 {
            f: rng.random_range(0.6..=1.4),
        }
    } else {
        Falloff::Polynomial {
            a: rng.random_range(0.5..=2.0),
            b: rng.random_range(0.0..=1.0),
            c: rng.random_range(0.0..=0.5),
        }
    };
    VignetteProfile { center, falloff }
}

pub fn sample_profile(seed: u64) -> VignetteProfile {
    sample_profile_with(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Multiplies every pixel by the profile gain at its radius.
pub fn apply_vignette<T: Scalar>(img: &Image<T>, profile: &VignetteProfile) -> Result<Image<T>> {
    let radius = profile.radius_fn(img.height(), img.width());
    Image::from_fn(img.height(), img.width(), |y, x, c| {
        T::lit(img.get(y, x, c).as_f64() * profile.gain(radius(y, x)))
    })
}

/// Kinds of procedural clean image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Gradient,
    Checker,
    Smooth,
}

struct Wave {
    ky: f64,
    kx: f64,
    phase: f64,
    amp: [f64; 3],
}

fn random_waves<R: Rng + ?Sized>(rng: &mut R, n: usize, max_freq: f64, amp: f64) -> Vec<Wave> {
    (0..n)
        .map(|_| Wave {
            ky: rng.random_range(-max_freq..=max_freq),
            kx: rng.random_range(-max_freq..=max_freq),
            phase: rng.random_range(0.0..2.0 * PI),
            amp: [(); 3].map(|_| rng.random_range(-amp..=amp)),
        })
        .collect()
}

/// Random clean image on the 8-bit grid with values in roughly
/// `[0.15, 1]`.
pub fn procedural_texture<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<(Texture, Image<f64>)> {
    let kind = match rng.random_range(0..3) {
        0 => Texture::Gradient,
        1 => Texture::Checker,
        _ => Texture::Smooth,
    };
    let base: [f64; 3] = [(); 3].map(|_| rng.random_range(0.45..=0.85));
    let n = size as f64;
    let img = match kind {
        Texture::Gradient => {
            let angle = rng.random_range(0.0..2.0 * PI);
            let slope: [f64; 3] = [(); 3].map(|_| rng.random_range(-0.3..=0.3));
            let (dy, dx) = (angle.sin(), angle.cos());
            Image::from_fn(size, size, |y, x, c| {
                let t = ((y as f64 / n - 0.5) * dy + (x as f64 / n - 0.5) * dx) * 2.0;
                base[c] + slope[c] * t
            })?
        }
        Texture::Checker => {
            let cells = rng.random_range(2..=8) as f64;
            let contrast: [f64; 3] = [(); 3].map(|_| rng.random_range(0.05..=0.25));
            let blend = rng.random_range(0.02..=0.15);
            Image::from_fn(size, size, |y, x, c| {
                let sy = (PI * cells * y as f64 / n).sin();
                let sx = (PI * cells * x as f64 / n).sin();
                let square = (sy * sx / blend).tanh();
                base[c] + contrast[c] * square
            })?
        }
        Texture::Smooth => {
            let waves = random_waves(rng, 6, 6.0, 0.12);
            Image::from_fn(size, size, |y, x, c| {
                let (u, v) = (y as f64 / n, x as f64 / n);
                base[c]
                    + waves
                        .iter()
                        .map(|w| w.amp[c] * (2.0 * PI * (w.ky * u + w.kx * v) + w.phase).sin())
                        .sum::<f64>()
            })?
        }
    };
    let quantized = Image::from_rgb8(size, size, &img.to_rgb8())?;
    Ok((kind, quantized))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(flatten)]
    pub profile: VignetteProfile,
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    /// Use images from this folder (sorted, cycled, resized) instead of
    /// procedural textures.
    pub clean_dir: Option<PathBuf>,
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            files.insert(stem.to_string(), path.clone());
        }
    }
    Ok(files)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `n` pairs of `size×size` images plus `manifest.json` into
/// `out_dir` and returns the manifest.
pub fn make_synthetic_dataset(opts: &SynthOptions, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let out = out_dir.as_ref();
    if opts.n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one pair".into()));
    }
    let clean: Vec<PathBuf> = match &opts.clean_dir {
        Some(dir) => {
            let files: Vec<_> = image_files(dir)?.into_values().collect();
            if files.is_empty() {
                return Err(Error::Data(format!("no images in {}", dir.display())));
            }
            files
        }
        None => Vec::new(),
    };
    create_dir(&out.join(INPUT_DIR))?;
    create_dir(&out.join(TARGET_DIR))?;
    let width = opts.n.saturating_sub(1).to_string().len().max(4);
    let mut manifest = Vec::with_capacity(opts.n);
    for i in 0..opts.n {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let target = if clean.is_empty() {
            procedural_texture(&mut rng, opts.size)?.1
        } else {
            let src = Image::<f64>::load(&clean[i % clean.len()])?.resize_bilinear(opts.size, opts.size)?;
            Image::from_rgb8(opts.size, opts.size, &src.to_rgb8())?
        };
        let profile = sample_profile_with(&mut rng);
        let input = apply_vignette(&target, &profile)?;
        let id = format!("{i:0width$}");
        target.save_png(out.join(TARGET_DIR).join(format!("{id}.png")))?;
        input.save_png(out.join(INPUT_DIR).join(format!("{id}.png")))?;
        manifest.push(ManifestEntry { id, profile });
    }
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample<T> {
    pub id: String,
    pub input: Image<T>,
    pub target: Image<T>,
}

impl<T: Scalar> PairedSample<T> {
    /// Crops both members at the same offset.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            input: self.input.crop(top, left, height, width)?,
            target: self.target.crop(top, left, height, width)?,
        })
    }

    /// Crop of side `min(size, H, W)` at a random aligned offset.
    pub fn random_crop<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Self> {
        let (h, w) = (self.input.height(), self.input.width());
        let (ch, cw) = (size.min(h), size.min(w));
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        self.crop(top, left, ch, cw)
    }

    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            input: self.input.resize_bilinear(height, width)?,
            target: self.target.resize_bilinear(height, width)?,
        })
    }
}

/// Lazily loaded paired dataset.
#[derive(Clone, Debug)]
pub struct PairedDir {
    root: PathBuf,
    pairs: Vec<(String, PathBuf, PathBuf)>,
}

impl PairedDir {
    /// Opens `path/<split>/` if it holds `input/`, else `path/`.
    pub fn open(path: impl AsRef<Path>, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let nested = path.join(split.as_str());
        let root = if nested.join(INPUT_DIR).is_dir() {
            nested
        } else {
            path.to_path_buf()
        };
        let (input_dir, target_dir) = (root.join(INPUT_DIR), root.join(TARGET_DIR));
        for dir in [&input_dir, &target_dir] {
            if !dir.is_dir() {
                return Err(Error::Data(format!("missing directory {}", dir.display())));
            }
        }
        let inputs = image_files(&input_dir)?;
        let mut targets = image_files(&target_dir)?;
        let mut pairs = Vec::with_capacity(inputs.len());
        for (id, input) in inputs {
            let target = targets
                .remove(&id)
                .ok_or_else(|| Error::Data(format!("pair {id}: no target image in {}", target_dir.display())))?;
            pairs.push((id, input, target));
        }
        if let Some(id) = targets.keys().next() {
            return Err(Error::Data(format!("pair {id}: no input image in {}", input_dir.display())));
        }
        Ok(Self { root, pairs })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(id, _, _)| id.as_str())
    }

    pub fn get<T: Scalar>(&self, index: usize) -> Result<PairedSample<T>> {
        let (id, input, target) = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::Data(format!("pair index {index} out of range")))?;
        let input = Image::load(input)?;
        let target = Image::load(target)?;
        if (input.height(), input.width()) != (target.height(), target.width()) {
            return Err(Error::Data(format!(
                "pair {id}: input is {}x{} but target is {}x{}",
                input.height(),
                input.width(),
                target.height(),
                target.width()
            )));
        }
        Ok(PairedSample {
            id: id.clone(),
            input,
            target,
        })
    }
}

/// Loads every pair in filename order. Training crops use one seeded RNG
/// advanced in that order; evaluation resizes to `resize × resize`.
pub fn load_paired_dir<T: Scalar>(
    path: impl AsRef<Path>,
    split: Split,
    crop: Option<usize>,
    resize: Option<usize>,
    seed: u64,
) -> Result<Vec<PairedSample<T>>> {
    let dir = PairedDir::open(path, split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dir.len())
        .map(|i| {
            let mut sample = dir.get::<T>(i)?;
            if let (Split::Train, Some(c)) = (split, crop) {
                sample = sample.random_crop(c, &mut rng)?;
            }
            if let Some(r) = resize {
                sample = sample.resize(r, r)?;
            }
            Ok(sample)
        })
        .collect()
}
