//! Reference implementations written with plain loops, plus small fixtures.

#![allow(dead_code)]

use devignet_core::acem::AcemConfig;
use devignet_core::daft::DaftConfig;
use devignet_core::hcam::Hcam;
use devignet_core::model::ModelConfig;
use devignet_core::nn::PointwiseConv;
use devignet_core::{Image, ParamStore, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image<f64> {
    Image::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

pub fn tiny_model(channels: usize) -> ModelConfig {
    ModelConfig {
        daft: DaftConfig {
            channels,
            heads: 2,
            pos_grid: 4,
            ..DaftConfig::default()
        },
        acem: AcemConfig {
            channels,
            ..AcemConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// `out[b, o, l] = Σ_i w[o, i] · x[b, i, l] (+ bias[o])` on `(B, C, L)` data.
pub fn conv1x1(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Tensor<f64> {
    let s = x.shape();
    let (b, cin) = (s[0], s[1]);
    let l: usize = s[2..].iter().product();
    let cout = w.shape()[0];
    let mut shape = s.to_vec();
    shape[1] = cout;
    let mut out = vec![0.0; b * cout * l];
    for bi in 0..b {
        for o in 0..cout {
            for p in 0..l {
                let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                for i in 0..cin {
                    acc += w.data()[o * cin + i] * x.data()[(bi * cin + i) * l + p];
                }
                out[(bi * cout + o) * l + p] = acc;
            }
        }
    }
    Tensor::new(shape, out).unwrap()
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Layer attention on `(B, N·C, ...)` stacks: each layer is one row of
/// length `C·L`; `out = softmax(Q̂ K̂ᵀ / α) V̂`.
pub fn layer_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, alpha: f64, n: usize, normalize: bool) -> Tensor<f64> {
    let b = q.shape()[0];
    let d = q.len() / (b * n);
    let raw = |t: &Tensor<f64>, bi: usize, r: usize| t.data()[(bi * n + r) * d..(bi * n + r + 1) * d].to_vec();
    let row = |t: &Tensor<f64>, bi: usize, r: usize| -> Vec<f64> {
        let x = raw(t, bi, r);
        if normalize {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            x.iter().map(|v| v / norm).collect()
        } else {
            x
        }
    };
    let mut out = vec![0.0; q.len()];
    for bi in 0..b {
        for i in 0..n {
            let qi = row(q, bi, i);
            let mut scores: Vec<f64> = (0..n)
                .map(|j| qi.iter().zip(row(k, bi, j)).map(|(a, c)| a * c).sum::<f64>() / alpha)
                .collect();
            softmax(&mut scores);
            for (j, s) in scores.iter().enumerate() {
                let vj = raw(v, bi, j);
                for p in 0..d {
                    out[(bi * n + i) * d + p] += s * vj[p];
                }
            }
        }
    }
    Tensor::new(q.shape().to_vec(), out).unwrap()
}

/// Attention probability matrix for one batch entry.
pub fn layer_scores(q: &Tensor<f64>, k: &Tensor<f64>, alpha: f64, n: usize) -> Vec<Vec<f64>> {
    let d = q.len() / (q.shape()[0] * n);
    (0..n)
        .map(|i| {
            let mut s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|p| q.data()[i * d + p] * k.data()[j * d + p]).sum::<f64>() / alpha)
                .collect();
            softmax(&mut s);
            s
        })
        .collect()
}

/// Mean SSIM over every fully contained 11×11 window with Gaussian weights
/// (σ = 1.5), averaged across channels.
pub fn ssim(a: &Image<f64>, b: &Image<f64>) -> f64 {
    const N: usize = 11;
    let g: Vec<f64> = (0..N).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y in 0..=h - N {
            for x in 0..=w - N {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..N {
                    for v in 0..N {
                        let wt = g[u] * g[v] / total;
                        let (pa, pb) = (a.get(y + u, x + v, c), b.get(y + u, x + v, c));
                        ma += wt * pa;
                        mb += wt * pb;
                        saa += wt * pa * pa;
                        sbb += wt * pb * pb;
                        sab += wt * pa * pb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

pub fn psnr(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let n = a.data().len() as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    10.0 * (1.0 / mse).log10()
}

pub fn mae(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let n = a.data().len() as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n * 255.0
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// First channel half times second channel half on `(B, C, ...)` data.
pub fn simple_gate(x: &Tensor<f64>) -> Vec<f64> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let l = x.len() / (b * c);
    let half = c / 2;
    let mut out = Vec::with_capacity(x.len() / 2);
    for bi in 0..b {
        for ch in 0..half {
            for p in 0..l {
                out.push(x.data()[(bi * c + ch) * l + p] * x.data()[(bi * c + ch + half) * l + p]);
            }
        }
    }
    out
}

/// `x · (W · mean_spatial(x))` per batch entry and channel.
pub fn sca(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let l = x.len() / (b * c);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let pooled: Vec<f64> = (0..c)
            .map(|ch| x.data()[(bi * c + ch) * l..(bi * c + ch + 1) * l].iter().sum::<f64>() / l as f64)
            .collect();
        for o in 0..c {
            let s: f64 = (0..c).map(|i| w.data()[o * c + i] * pooled[i]).sum();
            for p in 0..l {
                out[(bi * c + o) * l + p] = x.data()[(bi * c + o) * l + p] * s;
            }
        }
    }
    out
}

/// Project each layer with its own query/key/value weights, attend across
/// layers, project back to `C` and add `r_in`.
pub fn hcam_forward(store: &ParamStore<f64>, hcam: &Hcam, layers: &[Tensor<f64>], r_in: &Tensor<f64>) -> Vec<f64> {
    let project = |convs: &[PointwiseConv]| {
        let parts: Vec<_> = convs
            .iter()
            .zip(layers)
            .map(|(conv, x)| conv1x1(x, store.get(conv.weight), None))
            .collect();
        Tensor::concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap()
    };
    let (q, k, v) = (project(hcam.query_convs()), project(hcam.key_convs()), project(hcam.value_convs()));
    let alpha = store.get(hcam.alpha).data()[0];
    let attended = layer_attention(&q, &k, &v, alpha, layers.len(), hcam.normalizes());
    let w = store.get(hcam.project.weight);
    let b = store.get(hcam.project.bias.unwrap());
    let projected = conv1x1(&attended, w, Some(b));
    projected.data().iter().zip(r_in.data()).map(|(a, b)| a + b).collect()
}
