use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::resample::Resample1d;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GELU_K: f64 = 0.044_715;

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Self> {
        let out = self.value.zip_map(&other.value, f)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(self
            .tape
            .record(op, out, &[self, other], move |g| backward(g, &a, &b)))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| {
            vec![
                Some(g.zip_map(b, |g, b| g * b).expect("same shape")),
                Some(g.zip_map(a, |g, a| g * a).expect("same shape")),
            ]
        })
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(other, "div", |a, b| a / b, |g, a, b| {
            let ga = g.zip_map(b, |g, b| g / b).expect("same shape");
            let mut gb = ga.zip_map(a, |q, a| -q * a).expect("same shape");
            for (v, &b) in gb.data_mut().iter_mut().zip(b.data()) {
                *v = *v / b;
            }
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn scale(&self, s: T) -> Self {
        let out = self.value.map(|v| v * s);
        self.tape
            .record("scale", out, &[self], move |g| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(&self, s: T) -> Self {
        let out = self.value.map(|v| v + s);
        self.tape
            .record("add_scalar", out, &[self], |g| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Self {
        let out = self.value.map(|v| v * v);
        let x = self.value.clone();
        self.tape.record("square", out, &[self], move |g| {
            vec![Some(g.zip_map(&x, |g, x| g * (x + x)).expect("same shape"))]
        })
    }

    pub fn sum(&self) -> Self {
        let shape = self.value.shape().to_vec();
        let out = Tensor::scalar(self.value.sum());
        self.tape.record("sum", out, &[self], move |g| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean(&self) -> Self {
        let n = T::from_usize_lossy(self.value.len());
        self.sum().scale(T::one() / n)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Self {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = T::lit(GELU_K);
        let half = T::lit(0.5);
        let out = self
            .value
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let x = self.value.clone();
        self.tape.record("gelu", out, &[self], move |g| {
            let three = T::lit(3.0);
            let dx = g
                .zip_map(&x, |g, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + t)
                        + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    g * d
                })
                .expect("same shape");
            vec![Some(dx)]
        })
    }

    /// Clamps to `[lo, hi]`; the gradient passes through inside the range.
    /// Clamps to `[lo, hi]`; NaN passes through.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        let out = self.value.map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        let x = self.value.clone();
        self.tape.record("clamp", out, &[self], move |g| {
            let dx = g
                .zip_map(&x, |g, x| if x >= lo && x <= hi { g } else { T::zero() })
                .expect("same shape");
            vec![Some(dx)]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let in_shape = self.value.shape().to_vec();
        let out = (*self.value).clone().reshape(shape)?;
        Ok(self.tape.record("reshape", out, &[self], move |g| {
            vec![Some(g.clone().reshape(in_shape.clone()).expect("same size"))]
        }))
    }

    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value.as_ref()).collect();
        let out = Tensor::concat_channels(&values)?;
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        Ok(first.tape.record("concat", out, parts, move |g| {
            let mut start = 0;
            widths
                .iter()
                .map(|&w| {
                    let s = g.slice_channels(start, w).expect("valid slice");
                    start += w;
                    Some(s)
                })
                .collect()
        }))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let out = self.value.slice_channels(start, len)?;
        let full = self.value.shape().to_vec();
        Ok(self.tape.record("slice", out, &[self], move |g| {
            let (b, c, l) = (full[0], full[1], full[2..].iter().product::<usize>());
            let mut dx = Tensor::zeros(full.clone());
            let d = dx.data_mut();
            for bi in 0..b {
                let dst = bi * c * l + start * l;
                let src = bi * len * l;
                d[dst..dst + len * l].copy_from_slice(&g.data()[src..src + len * l]);
            }
            vec![Some(dx)]
        }))
    }

    /// Applies a sparse linear map along `axis`.
    pub fn resample(&self, op: &Rc<Resample1d<T>>, axis: usize) -> Result<Self> {
        let out = op.apply(&self.value, axis)?;
        let op = op.clone();
        Ok(self.tape.record("resample", out, &[self], move |g| {
            vec![Some(op.apply_transpose(g, axis).expect("adjoint shape"))]
        }))
    }

    /// `out[i] = self[index[i]]` with `index` a permutation-like gather.
    pub fn gather(&self, index: &Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather index does not match output shape"));
        }
        let src = self.value.data();
        if index.iter().any(|&i| i >= src.len()) {
            return Err(Error::shape("gather index out of range"));
        }
        let out = Tensor::from_parts(shape, index.iter().map(|&i| src[i]).collect());
        let in_shape = self.value.shape().to_vec();
        let index = index.clone();
        Ok(self.tape.record("gather", out, &[self], move |g| {
            let mut dx = Tensor::zeros(in_shape.clone());
            let d = dx.data_mut();
            for (&i, &gv) in index.iter().zip(g.data()) {
                d[i] += gv;
            }
            vec![Some(dx)]
        }))
    }

    /// 1×1 convolution: `(B, Cin, ...)` with weight `(Cout, Cin)` and optional
    /// bias `(Cout)` gives `(B, Cout, ...)`.
    pub fn pointwise_conv(&self, weight: &Self, bias: Option<&Self>) -> Result<Self> {
        let (b, cin, l) = self.value.dims_bcl()?;
        let (cout, wcin) = match *weight.shape() {
            [o, i] => (o, i),
            _ => return Err(Error::shape(format!("conv weight must be 2-d, got {:?}", weight.shape()))),
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                wcin, cin
            )));
        }
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(Error::shape(format!("conv bias shape {:?}", bias.shape())));
            }
        }
        let x = self.value.data();
        let w = weight.value.data();
        let mut out = vec![T::zero(); b * cout * l];
        for bi in 0..b {
            for o in 0..cout {
                let y = &mut out[(bi * cout + o) * l..(bi * cout + o + 1) * l];
                if let Some(bias) = bias {
                    y.fill(bias.value.data()[o]);
                }
                for i in 0..cin {
                    let wv = w[o * cin + i];
                    if wv == T::zero() {
                        continue;
                    }
                    let xs = &x[(bi * cin + i) * l..(bi * cin + i + 1) * l];
                    for (a, &v) in y.iter_mut().zip(xs) {
                        *a += wv * v;
                    }
                }
            }
        }
        let mut shape = self.value.shape().to_vec();
        shape[1] = cout;
        let out = Tensor::from_parts(shape, out);

        let (xv, wv) = (self.value.clone(), weight.value.clone());
        let has_bias = bias.is_some();
        let mut parents = vec![self, weight];
        if let Some(bias) = bias {
            parents.push(bias);
        }
        Ok(self.tape.record("pointwise_conv", out, &parents, move |g| {
            let gd = g.data();
            let x = xv.data();
            let w = wv.data();
            let mut dx = vec![T::zero(); b * cin * l];
            let mut dw = vec![T::zero(); cout * cin];
            let mut db = vec![T::zero(); cout];
            for bi in 0..b {
                for o in 0..cout {
                    let gs = &gd[(bi * cout + o) * l..(bi * cout + o + 1) * l];
                    db[o] += gs.iter().copied().sum::<T>();
                    for i in 0..cin {
                        let xs = &x[(bi * cin + i) * l..(bi * cin + i + 1) * l];
                        dw[o * cin + i] += gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                        let wv = w[o * cin + i];
                        let dxs = &mut dx[(bi * cin + i) * l..(bi * cin + i + 1) * l];
                        for (d, &gv) in dxs.iter_mut().zip(gs) {
                            *d += wv * gv;
                        }
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
                Some(Tensor::from_parts(vec![cout, cin], dw)),
            ];
            if has_bias {
                grads.push(Some(Tensor::from_parts(vec![cout], db)));
            }
            grads
        }))
    }

    /// Depthwise 3×3 convolution with zero padding 1; weight `(C, 9)` in
    /// row-major tap order, bias `(C)`.
    pub fn depthwise_conv3x3(&self, weight: &Self, bias: &Self) -> Result<Self> {
        let (b, c, h, w) = self.value.dims4()?;
        if weight.shape() != [c, 9] || bias.shape() != [c] {
            return Err(Error::shape(format!(
                "depthwise conv on {} channels got weight {:?}, bias {:?}",
                c,
                weight.shape(),
                bias.shape()
            )));
        }
        let x = self.value.data();
        let wt = weight.value.data();
        let bs = bias.value.data();
        let mut out = vec![T::zero(); b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let xp = &x[base..base + h * w];
                let yp = &mut out[base..base + h * w];
                yp.fill(bs[ci]);
                for_each_tap(h, w, |tap, y, x0, x1, sy, sx0| {
                    let wv = wt[ci * 9 + tap];
                    let yr = &mut yp[y * w + x0..y * w + x1];
                    let xr = &xp[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (a, &v) in yr.iter_mut().zip(xr) {
                        *a += wv * v;
                    }
                });
            }
        }
        let out = Tensor::from_parts(vec![b, c, h, w], out);
        let (xv, wv) = (self.value.clone(), weight.value.clone());
        Ok(self
            .tape
            .record("depthwise_conv3x3", out, &[self, weight, bias], move |g| {
                let gd = g.data();
                let x = xv.data();
                let wt = wv.data();
                let mut dx = vec![T::zero(); b * c * h * w];
                let mut dw = vec![T::zero(); c * 9];
                let mut db = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        let gp = &gd[base..base + h * w];
                        let xp = &x[base..base + h * w];
                        let dxp = &mut dx[base..base + h * w];
                        db[ci] += gp.iter().copied().sum::<T>();
                        for_each_tap(h, w, |tap, y, x0, x1, sy, sx0| {
                            let n = x1 - x0;
                            let gr = &gp[y * w + x0..y * w + x1];
                            let xr = &xp[sy * w + sx0..sy * w + sx0 + n];
                            dw[ci * 9 + tap] += gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                            let wv = wt[ci * 9 + tap];
                            let dr = &mut dxp[sy * w + sx0..sy * w + sx0 + n];
                            for (d, &gv) in dr.iter_mut().zip(gr) {
                                *d += wv * gv;
                            }
                        });
                    }
                }
                vec![
                    Some(Tensor::from_parts(vec![b, c, h, w], dx)),
                    Some(Tensor::from_parts(vec![c, 9], dw)),
                    Some(Tensor::from_parts(vec![c], db)),
                ]
            }))
    }

    /// Normalises over the channel axis at every spatial position, then
    /// applies a per-channel scale `gamma` and shift `beta`.
    pub fn layer_norm_channels(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        let (b, c, l) = self.value.dims_bcl()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!(
                "layer norm over {} channels got gamma {:?}, beta {:?}",
                c,
                gamma.shape(),
                beta.shape()
            )));
        }
        let x = self.value.data();
        let gm = gamma.value.data();
        let bt = beta.value.data();
        let inv_c = T::one() / T::from_usize_lossy(c);
        let mut xhat = vec![T::zero(); b * c * l];
        let mut rstd = vec![T::zero(); b * l];
        let mut out = vec![T::zero(); b * c * l];
        for bi in 0..b {
            let xb = &x[bi * c * l..(bi + 1) * c * l];
            let mut mean = vec![T::zero(); l];
            for ci in 0..c {
                for (m, &v) in mean.iter_mut().zip(&xb[ci * l..(ci + 1) * l]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            let mut var = vec![T::zero(); l];
            for ci in 0..c {
                for ((s, &v), &m) in var.iter_mut().zip(&xb[ci * l..(ci + 1) * l]).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let rs = &mut rstd[bi * l..(bi + 1) * l];
            for (r, s) in rs.iter_mut().zip(&var) {
                *r = T::one() / (*s * inv_c + eps).sqrt();
            }
            for ci in 0..c {
                let off = bi * c * l + ci * l;
                for li in 0..l {
                    let xh = (xb[ci * l + li] - mean[li]) * rs[li];
                    xhat[off + li] = xh;
                    out[off + li] = xh * gm[ci] + bt[ci];
                }
            }
        }
        let shape = self.value.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        let gv = gamma.value.clone();
        Ok(self
            .tape
            .record("layer_norm", out, &[self, gamma, beta], move |g| {
                let gd = g.data();
                let gm = gv.data();
                let mut dx = vec![T::zero(); b * c * l];
                let mut dg = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    let mut mean_d = vec![T::zero(); l];
                    let mut mean_dx = vec![T::zero(); l];
                    for ci in 0..c {
                        let off = bi * c * l + ci * l;
                        for li in 0..l {
                            let gy = gd[off + li];
                            let xh = xhat[off + li];
                            dg[ci] += gy * xh;
                            dbeta[ci] += gy;
                            let d = gy * gm[ci];
                            mean_d[li] += d;
                            mean_dx[li] += d * xh;
                        }
                    }
                    for ci in 0..c {
                        let off = bi * c * l + ci * l;
                        for li in 0..l {
                            let d = gd[off + li] * gm[ci];
                            dx[off + li] = rstd[bi * l + li]
                                * (d - mean_d[li] * inv_c - xhat[off + li] * mean_dx[li] * inv_c);
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(vec![c], dg)),
                    Some(Tensor::from_parts(vec![c], dbeta)),
                ]
            }))
    }

    /// Spatial mean: `(B, C, ...)` to `(B, C, 1)`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let (b, c, l) = self.value.dims_bcl()?;
        let inv = T::one() / T::from_usize_lossy(l);
        let out: Vec<T> = self
            .value
            .data()
            .chunks(l)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let in_shape = self.value.shape().to_vec();
        Ok(self.tape.record(
            "global_avg_pool",
            Tensor::from_parts(vec![b, c, 1], out),
            &[self],
            move |g| {
                let mut dx = Vec::with_capacity(b * c * l);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, l));
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
            },
        ))
    }

    /// Multiplies every channel of `(B, C, ...)` by `(B, C, 1)` scales.
    pub fn mul_channels(&self, scales: &Self) -> Result<Self> {
        let (b, c, l) = self.value.dims_bcl()?;
        if scales.shape() != [b, c, 1] {
            return Err(Error::shape(format!(
                "channel scales {:?} do not match {:?}",
                scales.shape(),
                self.shape()
            )));
        }
        let s = scales.value.data();
        let mut out = self.value.data().to_vec();
        for (k, ch) in out.chunks_mut(l).enumerate() {
            ch.iter_mut().for_each(|v| *v *= s[k]);
        }
        let (xv, sv) = (self.value.clone(), scales.value.clone());
        Ok(self.tape.record(
            "mul_channels",
            Tensor::from_parts(xv.shape().to_vec(), out),
            &[self, scales],
            move |g| {
                let s = sv.data();
                let mut dx = g.data().to_vec();
                let mut ds = vec![T::zero(); b * c];
                for (k, (dch, xch)) in dx.chunks_mut(l).zip(xv.data().chunks(l)).enumerate() {
                    ds[k] = dch.iter().zip(xch).map(|(&a, &b)| a * b).sum();
                    dch.iter_mut().for_each(|v| *v *= s[k]);
                }
                vec![
                    Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
                    Some(Tensor::from_parts(vec![b, c, 1], ds)),
                ]
            },
        ))
    }

    /// Scaled dot-product self-attention over the flattened spatial axis.
    ///
    /// `self` holds stacked projections `(B, 3C, ...)` ordered query, key,
    /// value; the result is `(B, C, ...)`.
    pub fn multi_head_attention(&self, heads: usize) -> Result<Self> {
        let (b, c3, l) = self.value.dims_bcl()?;
        if c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(Error::shape(format!(
                "{} stacked channels cannot split into q/k/v with {} heads",
                c3, heads
            )));
        }
        let c = c3 / 3;
        let d = c / heads;
        let scale = T::one() / T::from_usize_lossy(d).sqrt();
        let record = self.tape.is_recording() && self.requires_grad();
        let x = self.value.data();
        let mut out = vec![T::zero(); b * c * l];
        let mut probs: Vec<T> = if record {
            vec![T::zero(); b * heads * l * l]
        } else {
            Vec::new()
        };
        let mut row = vec![T::zero(); l];
        for bi in 0..b {
            for h in 0..heads {
                let (q, k, v) = head_views(x, bi, h, c, d, l);
                let mut o = vec![T::zero(); l * d];
                for n in 0..l {
                    let qn = &q[n * d..(n + 1) * d];
                    for (m, r) in row.iter_mut().enumerate() {
                        *r = dot(qn, &k[m * d..(m + 1) * d]) * scale;
                    }
                    softmax_in_place(&mut row);
                    let on = &mut o[n * d..(n + 1) * d];
                    for (m, &p) in row.iter().enumerate() {
                        for (a, &vv) in on.iter_mut().zip(&v[m * d..(m + 1) * d]) {
                            *a += p * vv;
                        }
                    }
                    if record {
                        let off = ((bi * heads + h) * l + n) * l;
                        probs[off..off + l].copy_from_slice(&row);
                    }
                }
                for n in 0..l {
                    for dd in 0..d {
                        out[(bi * c + h * d + dd) * l + n] = o[n * d + dd];
                    }
                }
            }
        }
        let mut shape = self.value.shape().to_vec();
        shape[1] = c;
        let out = Tensor::from_parts(shape, out);
        let xv = self.value.clone();
        Ok(self.tape.record("attention", out, &[self], move |g| {
            let x = xv.data();
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c3 * l];
            let mut dp = vec![T::zero(); l];
            for bi in 0..b {
                for h in 0..heads {
                    let (q, k, v) = head_views(x, bi, h, c, d, l);
                    let mut go = vec![T::zero(); l * d];
                    for n in 0..l {
                        for dd in 0..d {
                            go[n * d + dd] = gd[(bi * c + h * d + dd) * l + n];
                        }
                    }
                    let mut dq = vec![T::zero(); l * d];
                    let mut dk = vec![T::zero(); l * d];
                    let mut dv = vec![T::zero(); l * d];
                    for n in 0..l {
                        let off = ((bi * heads + h) * l + n) * l;
                        let p = &probs[off..off + l];
                        let gn = &go[n * d..(n + 1) * d];
                        for m in 0..l {
                            dp[m] = dot(gn, &v[m * d..(m + 1) * d]);
                            for (a, &gv) in dv[m * d..(m + 1) * d].iter_mut().zip(gn) {
                                *a += p[m] * gv;
                            }
                        }
                        let inner: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                        let qn = &q[n * d..(n + 1) * d];
                        for m in 0..l {
                            let ds = p[m] * (dp[m] - inner) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let km = &k[m * d..(m + 1) * d];
                            for dd in 0..d {
                                dq[n * d + dd] += ds * km[dd];
                                dk[m * d + dd] += ds * qn[dd];
                            }
                        }
                    }
                    for (part, buf) in [(0, &dq), (1, &dk), (2, &dv)] {
                        for n in 0..l {
                            for dd in 0..d {
                                dx[(bi * c3 + part * c + h * d + dd) * l + n] = buf[n * d + dd];
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(xv.shape().to_vec(), dx))]
        }))
    }

    /// Attention across `layers` whole feature layers.
    ///
    /// `q`, `k`, `v` are `(B, layers·C, ...)`; layer `n` of each is flattened
    /// into one vector of length `C·L`. Scores form a `layers × layers`
    /// matrix `softmax_rows(Q Kᵀ / alpha)` which mixes the value layers. With
    /// `normalize`, query and key vectors are scaled to unit L2 norm first.
    pub fn layer_attention(
        q: &Self,
        k: &Self,
        v: &Self,
        alpha: &Self,
        layers: usize,
        normalize: bool,
    ) -> Result<Self> {
        let (b, nc, l) = q.value.dims_bcl()?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::shape(format!(
                "layer attention q/k/v shapes differ: {:?} {:?} {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if layers == 0 || nc % layers != 0 {
            return Err(Error::shape(format!(
                "{} channels do not split into {} layers",
                nc, layers
            )));
        }
        if alpha.shape() != [1] {
            return Err(Error::shape("alpha must be a scalar"));
        }
        let n_l = layers;
        let dlen = nc / n_l * l;
        let a = alpha.value.data()[0];
        let eps = T::lit(1e-12);
        let (qd, kd, vd) = (q.value.data(), k.value.data(), v.value.data());

        let mut qn = vec![T::zero(); b * n_l * dlen];
        let mut kn = vec![T::zero(); b * n_l * dlen];
        let mut qnorm = vec![T::one(); b * n_l];
        let mut knorm = vec![T::one(); b * n_l];
        for r in 0..b * n_l {
            let rng = r * dlen..(r + 1) * dlen;
            if normalize {
                qnorm[r] = dot(&qd[rng.clone()], &qd[rng.clone()]).sqrt().max(eps);
                knorm[r] = dot(&kd[rng.clone()], &kd[rng.clone()]).sqrt().max(eps);
            }
            for (dst, &s) in qn[rng.clone()].iter_mut().zip(&qd[rng.clone()]) {
                *dst = s / qnorm[r];
            }
            for (dst, &s) in kn[rng.clone()].iter_mut().zip(&kd[rng.clone()]) {
                *dst = s / knorm[r];
            }
        }
        let mut scores = vec![T::zero(); b * n_l * n_l];
        let mut probs = vec![T::zero(); b * n_l * n_l];
        let mut out = vec![T::zero(); b * n_l * dlen];
        for bi in 0..b {
            for n in 0..n_l {
                let qrow = &qn[(bi * n_l + n) * dlen..(bi * n_l + n + 1) * dlen];
                let srow = &mut scores[(bi * n_l + n) * n_l..(bi * n_l + n + 1) * n_l];
                for (m, s) in srow.iter_mut().enumerate() {
                    *s = dot(qrow, &kn[(bi * n_l + m) * dlen..(bi * n_l + m + 1) * dlen]) / a;
                }
                let prow = &mut probs[(bi * n_l + n) * n_l..(bi * n_l + n + 1) * n_l];
                prow.copy_from_slice(srow);
                softmax_in_place(prow);
                let orow = &mut out[(bi * n_l + n) * dlen..(bi * n_l + n + 1) * dlen];
                for (m, &p) in prow.iter().enumerate() {
                    let vrow = &vd[(bi * n_l + m) * dlen..(bi * n_l + m + 1) * dlen];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
        let shape = q.value.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        let vv = v.value.clone();
        Ok(q.tape.record(
            "layer_attention",
            out,
            &[q, k, v, alpha],
            move |g| {
                let gd = g.data();
                let vd = vv.data();
                let mut dqn = vec![T::zero(); b * n_l * dlen];
                let mut dkn = vec![T::zero(); b * n_l * dlen];
                let mut dv = vec![T::zero(); b * n_l * dlen];
                let mut dalpha = T::zero();
                for bi in 0..b {
                    let row = |i: usize| (bi * n_l + i) * dlen..(bi * n_l + i + 1) * dlen;
                    let mut ds = vec![T::zero(); n_l * n_l];
                    for n in 0..n_l {
                        let p = &probs[(bi * n_l + n) * n_l..(bi * n_l + n + 1) * n_l];
                        let gn = &gd[row(n)];
                        let dp: Vec<T> = (0..n_l).map(|m| dot(gn, &vd[row(m)])).collect();
                        for m in 0..n_l {
                            let r = row(m);
                            for (a, &gv) in dv[r].iter_mut().zip(gn) {
                                *a += p[m] * gv;
                            }
                        }
                        let inner: T = p.iter().zip(&dp).map(|(&x, &y)| x * y).sum();
                        for m in 0..n_l {
                            ds[n * n_l + m] = p[m] * (dp[m] - inner);
                        }
                    }
                    for n in 0..n_l {
                        for m in 0..n_l {
                            let dsv = ds[n * n_l + m];
                            dalpha -= dsv * scores[(bi * n_l + n) * n_l + m] / a;
                            let coef = dsv / a;
                            let (rn, rm) = (row(n), row(m));
                            for j in 0..dlen {
                                dqn[rn.start + j] += coef * kn[rm.start + j];
                                dkn[rm.start + j] += coef * qn[rn.start + j];
                            }
                        }
                    }
                }
                let mut dq = dqn;
                let mut dk = dkn;
                if normalize {
                    project_out_norm(&mut dq, &qn, &qnorm, dlen);
                    project_out_norm(&mut dk, &kn, &knorm, dlen);
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), dq)),
                    Some(Tensor::from_parts(shape.clone(), dk)),
                    Some(Tensor::from_parts(shape.clone(), dv)),
                    Some(Tensor::scalar(dalpha)),
                ]
            },
        ))
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Backpropagates through `u = x / |x|` row by row: `dx = (du - u (u·du)) / |x|`.
fn project_out_norm<T: Scalar>(grad: &mut [T], unit: &[T], norms: &[T], dlen: usize) {
    for (r, &norm) in norms.iter().enumerate() {
        let rng = r * dlen..(r + 1) * dlen;
        let proj = dot(&grad[rng.clone()], &unit[rng.clone()]);
        for j in rng {
            grad[j] = (grad[j] - unit[j] * proj) / norm;
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Gathers one head's query, key and value as `(L, d)` row-major buffers.
fn head_views<T: Scalar>(
    x: &[T],
    bi: usize,
    h: usize,
    c: usize,
    d: usize,
    l: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let pick = |part: usize| {
        let mut buf = vec![T::zero(); l * d];
        for dd in 0..d {
            let src = &x[(bi * 3 * c + part * c + h * d + dd) * l..][..l];
            for (n, &v) in src.iter().enumerate() {
                buf[n * d + dd] = v;
            }
        }
        buf
    };
    (pick(0), pick(1), pick(2))
}

/// Visits every tap of a 3×3 zero-padded stencil as contiguous row spans:
/// `(tap, out_row, out_x0, out_x1, src_row, src_x0)`.
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    for ky in 0..3usize {
        for kx in 0..3usize {
            let tap = ky * 3 + kx;
            let (x0, x1) = match kx {
                0 => (1, w),
                1 => (0, w),
                _ => (0, w.saturating_sub(1)),
            };
            if x0 >= x1 {
                continue;
            }
            let sx0 = x0 + kx - 1;
            for y in 0..h {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                f(tap, y, x0, x1, sy as usize, sx0);
            }
        }
    }
}
