//! Evaluation metrics on `[0, 1]` images, computed in double precision.
//!
//! PSNR uses peak 1 and is reported in dB; MAE is reported on the 0–255
//! scale. Identical images have infinite PSNR, written as `"inf"`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss;
use crate::scalar::Scalar;

fn check_pair<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1 / MSE)`; `+inf` for identical images.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_pair(a, b)?;
    let tape = Tape::<f64>::inference();
    let x = tape.constant(a.cast::<f64>().to_feature_map());
    let y = tape.constant(b.cast::<f64>().to_feature_map());
    Ok(loss::ssim(&x, &y)?.value().data()[0])
}

/// Mean absolute error scaled to 0–255.
pub fn mae<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(sum / a.data().len() as f64 * 255.0)
}

/// Extra metric computed alongside the built-in ones, e.g. a learned
/// perceptual distance backed by an external network.
pub trait PairMetric {
    fn name(&self) -> &str;
    fn compute(&self, output: &Image<f64>, target: &Image<f64>) -> Result<f64>;
}

fn ser_float<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_float(*v))
    }
}

fn de_float<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
        },
    }
}

fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(serialize_with = "ser_float", deserialize_with = "de_float")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae_255: f64,
}

impl ImageMetrics {
    pub fn compute<T: Scalar>(id: impl Into<String>, output: &Image<T>, target: &Image<T>) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            psnr_db: psnr(output, target)?,
            ssim: ssim(output, target)?,
            mae_255: mae(output, target)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(serialize_with = "ser_float", deserialize_with = "de_float")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae_255: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    /// `[height, width]` the images were evaluated at, if resized.
    pub resolution: Option<[usize; 2]>,
}

impl MetricsReport {
    pub fn new(per_image: Vec<ImageMetrics>, resolution: Option<[usize; 2]>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let aggregate = Aggregate {
            psnr_db: mean(|m| m.psnr_db),
            ssim: mean(|m| m.ssim),
            mae_255: mean(|m| m.mae_255),
        };
        Self {
            per_image,
            aggregate,
            resolution,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Columns `id,psnr_db,ssim,mae_255`, one row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim,mae_255\n");
        for m in &self.per_image {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                m.id,
                format_float(m.psnr_db),
                format_float(m.ssim),
                format_float(m.mae_255)
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
