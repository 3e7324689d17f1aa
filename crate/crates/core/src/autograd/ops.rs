//! Differentiable operators.
//!
//! Every operator computes its value eagerly and, when an operand requires
//! grad, records a closure mapping the output gradient to operand gradients.
//! Layouts are row-major; images are `[N, C, H, W]`.

use rayon::prelude::*;

use super::float::matmul_into;
use super::tensor::numel;
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Samples per partial weight-gradient buffer in convolution backward.
/// Fixed so that the reduction order does not depend on the thread count.
const CONV_GRAD_CHUNK: usize = 4;

fn same_shape<F: Float>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn want<F: Float>(parents: &[Tensor<F>], i: usize) -> bool {
    parents[i].requires_grad()
}

impl<F: Float> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("add", self, other)?;
        let data: Vec<F> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect()
        };
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                vec![
                    want(p, 0).then(|| g.to_vec()),
                    want(p, 1).then(|| g.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("sub", self, other)?;
        let data: Vec<F> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| *x - *y).collect()
        };
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                vec![
                    want(p, 0).then(|| g.to_vec()),
                    want(p, 1).then(|| g.iter().map(|v| -*v).collect()),
                ]
            }),
        ))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        same_shape("mul", self, other)?;
        let data: Vec<F> = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| *x * *y).collect()
        };
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                let ga = want(p, 0).then(|| {
                    let b = p[1].data();
                    g.iter().zip(b.iter()).map(|(g, b)| *g * *b).collect()
                });
                let gb = want(p, 1).then(|| {
                    let a = p[0].data();
                    g.iter().zip(a.iter()).map(|(g, a)| *g * *a).collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let data = self.data().iter().map(|x| *x * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| *v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        let data = self.data().iter().map(|x| *x + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// `[.., D] + [D]`, broadcasting the vector over leading dimensions.
    pub fn add_bias(&self, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let d = *self.shape().last().unwrap_or(&1);
        if bias.shape() != [d] {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        let data: Vec<F> = {
            let (x, b) = (self.data(), bias.data());
            x.chunks(d)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(x, b)| *x + *b))
                .collect()
        };
        Ok(Tensor::from_op(
            "add_bias",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, p| {
                let gb = want(p, 1).then(|| {
                    let mut acc = vec![F::ZERO; d];
                    for row in g.chunks(d) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
                    }
                    acc
                });
                vec![want(p, 0).then(|| g.to_vec()), gb]
            }),
        ))
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        matmul_into(m, k, n, &self.data(), false, &other.data(), false, &mut out, false);
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let ga = want(p, 0).then(|| {
                    let mut ga = vec![F::ZERO; m * k];
                    matmul_into(m, n, k, g, false, &p[1].data(), true, &mut ga, false);
                    ga
                });
                let gb = want(p, 1).then(|| {
                    let mut gb = vec![F::ZERO; k * n];
                    matmul_into(k, m, n, &p[0].data(), true, g, false, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn relu(&self) -> Tensor<F> {
        let data = self
            .data()
            .iter()
            .map(|x| if *x > F::ZERO { *x } else { F::ZERO })
            .collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, p| {
                let x = p[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, x)| if *x > F::ZERO { *g } else { F::ZERO })
                        .collect(),
                )]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<F> {
        let data: Vec<F> = self.data().iter().map(|x| x.exp()).collect();
        let saved = data.clone();
        Tensor::from_op(
            "exp",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().zip(&saved).map(|(g, y)| *g * *y).collect())]),
        )
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&self, floor: F) -> Tensor<F> {
        let data = self.data().iter().map(|x| x.max(floor).ln()).collect();
        Tensor::from_op(
            "log",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, p| {
                let x = p[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, x)| if *x > floor { *g / *x } else { F::ZERO })
                        .collect(),
                )]
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor<F> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<F> {
        let n = self.numel();
        let inv = F::ONE / F::from_usize(n);
        let total: F = self.data().iter().copied().sum();
        Tensor::from_op(
            "mean",
            Vec::new(),
            vec![total * inv],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    fn rows(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, self.shape(), &[0, 0])),
        }
    }

    /// Row-wise softmax of `x / temperature` over a `[rows, classes]` tensor.
    pub fn softmax(&self, temperature: F) -> Result<Tensor<F>> {
        let (r, c) = self.rows("softmax")?;
        check_temperature(temperature)?;
        let probs = softmax_rows(&self.data(), c, temperature);
        let saved = probs.clone();
        debug_assert_eq!(saved.len(), r * c);
        Ok(Tensor::from_op(
            "softmax",
            vec![r, c],
            probs,
            vec![self.clone()],
            Box::new(move |g, _| {
                let inv_t = F::ONE / temperature;
                let mut out = vec![F::ZERO; g.len()];
                for ((o, g), p) in out.chunks_mut(c).zip(g.chunks(c)).zip(saved.chunks(c)) {
                    let dot: F = g.iter().zip(p).map(|(g, p)| *g * *p).sum();
                    for ((o, g), p) in o.iter_mut().zip(g).zip(p) {
                        *o = *p * (*g - dot) * inv_t;
                    }
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Row-wise log-softmax of `x / temperature`.
    pub fn log_softmax(&self, temperature: F) -> Result<Tensor<F>> {
        let (r, c) = self.rows("log_softmax")?;
        check_temperature(temperature)?;
        let probs = softmax_rows(&self.data(), c, temperature);
        let mut out = Vec::with_capacity(r * c);
        {
            let x = self.data();
            for row in x.chunks(c) {
                let max = row.iter().fold(row[0], |m, v| m.max(*v));
                let lse = row
                    .iter()
                    .map(|v| ((*v - max) / temperature).exp())
                    .sum::<F>()
                    .ln();
                out.extend(row.iter().map(|v| (*v - max) / temperature - lse));
            }
        }
        Ok(Tensor::from_op(
            "log_softmax",
            vec![r, c],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let inv_t = F::ONE / temperature;
                let mut out = vec![F::ZERO; g.len()];
                for ((o, g), p) in out.chunks_mut(c).zip(g.chunks(c)).zip(probs.chunks(c)) {
                    let total: F = g.iter().copied().sum();
                    for ((o, g), p) in o.iter_mut().zip(g).zip(p) {
                        *o = (*g - *p * total) * inv_t;
                    }
                }
                vec![Some(out)]
            }),
        ))
    }

    /// Picks `x[i, index[i]]` from a `[rows, cols]` tensor, giving `[rows]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<F>> {
        let (r, c) = self.rows("gather_rows")?;
        if index.len() != r {
            return Err(Error::shape("gather_rows", self.shape(), &[index.len()]));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {c} columns"
            )));
        }
        let data = {
            let x = self.data();
            index.iter().enumerate().map(|(i, &j)| x[i * c + j]).collect()
        };
        let index = index.to_vec();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![r],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut out = vec![F::ZERO; r * c];
                for (i, &j) in index.iter().enumerate() {
                    out[i * c + j] = g[i];
                }
                vec![Some(out)]
            }),
        ))
    }

    fn image_dims(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape() {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(op, self.shape(), &[0, 0, 0, 0])),
        }
    }

    /// 2-D convolution without bias: `x [N,C,H,W]`, `weight [O,C,kh,kw]`.
    pub fn conv2d(&self, weight: &Tensor<F>, stride: usize, pad: usize) -> Result<Tensor<F>> {
        let [n, c, h, w] = self.image_dims("conv2d")?;
        let (o, kh, kw) = match *weight.shape() {
            [o, wc, kh, kw] if wc == c => (o, kh, kw),
            _ => return Err(Error::shape("conv2d", self.shape(), weight.shape())),
        };
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        let geo = ConvGeometry {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let (ckk, p) = (geo.col_rows(), geo.oh * geo.ow);
        let mut out = vec![F::ZERO; n * o * p];
        {
            let x = self.data();
            let wt = weight.data();
            out.par_chunks_mut(o * p)
                .zip(x.par_chunks(c * h * w))
                .for_each_init(
                    || vec![F::ZERO; ckk * p],
                    |col, (out_n, x_n)| {
                        geo.im2col(x_n, col);
                        matmul_into(o, ckk, p, &wt, false, col, false, out_n, false);
                    },
                );
        }
        Ok(Tensor::from_op(
            "conv2d",
            vec![n, o, geo.oh, geo.ow],
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].data();
                let wt = parents[1].data();
                let gx = want(parents, 0).then(|| {
                    let mut gx = vec![F::ZERO; n * c * h * w];
                    gx.par_chunks_mut(c * h * w)
                        .zip(g.par_chunks(o * p))
                        .for_each_init(
                            || vec![F::ZERO; ckk * p],
                            |dcol, (gx_n, g_n)| {
                                matmul_into(ckk, o, p, &wt, true, g_n, false, dcol, false);
                                geo.col2im(dcol, gx_n);
                            },
                        );
                    gx
                });
                let gw = want(parents, 1).then(|| {
                    let chunk_x = CONV_GRAD_CHUNK * c * h * w;
                    let chunk_g = CONV_GRAD_CHUNK * o * p;
                    let partials: Vec<Vec<F>> = x
                        .par_chunks(chunk_x)
                        .zip(g.par_chunks(chunk_g))
                        .map(|(xs, gs)| {
                            let mut acc = vec![F::ZERO; o * ckk];
                            let mut col = vec![F::ZERO; ckk * p];
                            for (x_n, g_n) in xs.chunks(c * h * w).zip(gs.chunks(o * p)) {
                                geo.im2col(x_n, &mut col);
                                matmul_into(o, p, ckk, g_n, false, &col, true, &mut acc, true);
                            }
                            acc
                        })
                        .collect();
                    let mut gw = vec![F::ZERO; o * ckk];
                    for part in partials {
                        gw.iter_mut().zip(&part).for_each(|(a, b)| *a += *b);
                    }
                    gw
                });
                vec![gx, gw]
            }),
        ))
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<F>> {
        let [n, c, h, w] = self.image_dims("global_avg_pool")?;
        let hw = h * w;
        let inv = F::ONE / F::from_usize(hw);
        let data = self
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<F>() * inv)
            .collect();
        Ok(Tensor::from_op(
            "global_avg_pool",
            vec![n, c],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(g.iter().flat_map(|v| std::iter::repeat_n(*v * inv, hw)).collect())]
            }),
        ))
    }

    /// Non-overlapping `k×k` average pooling; `H` and `W` must be divisible by `k`.
    pub fn avg_pool(&self, k: usize) -> Result<Tensor<F>> {
        let [n, c, h, w] = self.image_dims("avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avg_pool", self.shape(), &[k, k]));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = F::ONE / F::from_usize(k * k);
        let mut out = vec![F::ZERO; n * c * oh * ow];
        {
            let x = self.data();
            for (plane, o) in x.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
                for i in 0..h {
                    for j in 0..w {
                        o[(i / k) * ow + j / k] += plane[i * w + j];
                    }
                }
                o.iter_mut().for_each(|v| *v *= inv);
            }
        }
        Ok(Tensor::from_op(
            "avg_pool",
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![F::ZERO; n * c * h * w];
                for (plane, go) in gx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for i in 0..h {
                        for j in 0..w {
                            plane[i * w + j] = go[(i / k) * ow + j / k] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Keeps every `stride`-th row and column.
    pub fn subsample(&self, stride: usize) -> Result<Tensor<F>> {
        let [n, c, h, w] = self.image_dims("subsample")?;
        if stride == 0 {
            return Err(Error::shape("subsample", self.shape(), &[stride]));
        }
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let mut out = Vec::with_capacity(n * c * oh * ow);
        {
            let x = self.data();
            for plane in x.chunks(h * w) {
                for i in (0..h).step_by(stride) {
                    for j in (0..w).step_by(stride) {
                        out.push(plane[i * w + j]);
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "subsample",
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![F::ZERO; n * c * h * w];
                for (plane, go) in gx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    let mut it = go.iter();
                    for i in (0..h).step_by(stride) {
                        for j in (0..w).step_by(stride) {
                            plane[i * w + j] = *it.next().expect("subsample grad size");
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Appends `extra` all-zero channels.
    pub fn pad_channels(&self, extra: usize) -> Result<Tensor<F>> {
        let [n, c, h, w] = self.image_dims("pad_channels")?;
        let plane = c * h * w;
        let out_plane = (c + extra) * h * w;
        let mut out = vec![F::ZERO; n * out_plane];
        {
            let x = self.data();
            for (o, x) in out.chunks_mut(out_plane).zip(x.chunks(plane)) {
                o[..plane].copy_from_slice(x);
            }
        }
        Ok(Tensor::from_op(
            "pad_channels",
            vec![n, c + extra, h, w],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(
                    g.chunks(out_plane)
                        .flat_map(|s| s[..plane].iter().copied())
                        .collect(),
                )]
            }),
        ))
    }

    /// Batch normalization with batch statistics over `N` and all trailing
    /// dimensions, per channel (dimension 1). Returns the output together with
    /// the batch mean and biased batch variance.
    pub fn batch_norm(
        &self,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        eps: F,
    ) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", &shape, gamma.shape()));
        }
        let (n, c) = (shape[0], shape[1]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("batch_norm", &shape, gamma.shape()));
        }
        let s: usize = shape[2..].iter().product();
        let count = F::from_usize(n * s);
        let mut mean = vec![F::ZERO; c];
        let mut var = vec![F::ZERO; c];
        let mut xhat = vec![F::ZERO; n * c * s];
        let mut out = vec![F::ZERO; n * c * s];
        let mut inv_std = vec![F::ZERO; c];
        {
            let x = self.data();
            let (gm, bt) = (gamma.data(), beta.data());
            for ch in 0..c {
                let planes = || (0..n).map(move |i| (i * c + ch) * s);
                let mut total = F::ZERO;
                for base in planes() {
                    total += x[base..base + s].iter().copied().sum::<F>();
                }
                let mu = total / count;
                let mut sq = F::ZERO;
                for base in planes() {
                    sq += x[base..base + s].iter().map(|v| (*v - mu) * (*v - mu)).sum::<F>();
                }
                let v = sq / count;
                let is = F::ONE / (v + eps).sqrt();
                mean[ch] = mu;
                var[ch] = v;
                inv_std[ch] = is;
                for base in planes() {
                    for idx in base..base + s {
                        let xh = (x[idx] - mu) * is;
                        xhat[idx] = xh;
                        out[idx] = gm[ch] * xh + bt[ch];
                    }
                }
            }
        }
        let y = Tensor::from_op(
            "batch_norm",
            shape,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p| {
                let gm = p[1].data();
                let mut gx = want(p, 0).then(|| vec![F::ZERO; n * c * s]);
                let mut ggamma = vec![F::ZERO; c];
                let mut gbeta = vec![F::ZERO; c];
                for ch in 0..c {
                    let planes = || (0..n).map(move |i| (i * c + ch) * s);
                    let (mut sum_g, mut sum_gx) = (F::ZERO, F::ZERO);
                    for base in planes() {
                        for idx in base..base + s {
                            sum_g += g[idx];
                            sum_gx += g[idx] * xhat[idx];
                        }
                    }
                    ggamma[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    if let Some(gx) = gx.as_mut() {
                        let k = gm[ch] * inv_std[ch] / count;
                        for base in planes() {
                            for idx in base..base + s {
                                gx[idx] = k * (count * g[idx] - sum_g - xhat[idx] * sum_gx);
                            }
                        }
                    }
                }
                vec![gx, want(p, 1).then_some(ggamma), want(p, 2).then_some(gbeta)]
            }),
        );
        Ok((y, mean, var))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_fixed(
        &self,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Result<Tensor<F>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 || gamma.shape() != [shape[1]] || beta.shape() != [shape[1]] {
            return Err(Error::shape("batch_norm", &shape, gamma.shape()));
        }
        let c = shape[1];
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", &shape, &[mean.len()]));
        }
        let s: usize = shape[2..].iter().product();
        let inv_std: Vec<F> = var.iter().map(|v| F::ONE / (*v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let out = {
            let x = self.data();
            let (gm, bt) = (gamma.data(), beta.data());
            x.iter()
                .enumerate()
                .map(|(idx, v)| {
                    let ch = (idx / s) % c;
                    gm[ch] * (*v - mean[ch]) * inv_std[ch] + bt[ch]
                })
                .collect()
        };
        Ok(Tensor::from_op(
            "batch_norm_fixed",
            shape,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p| {
                let x = p[0].data();
                let gm = p[1].data();
                let mut gx = want(p, 0).then(|| vec![F::ZERO; g.len()]);
                let mut ggamma = vec![F::ZERO; c];
                let mut gbeta = vec![F::ZERO; c];
                for (idx, gv) in g.iter().enumerate() {
                    let ch = (idx / s) % c;
                    let xh = (x[idx] - mean[ch]) * inv_std[ch];
                    ggamma[ch] += *gv * xh;
                    gbeta[ch] += *gv;
                    if let Some(gx) = gx.as_mut() {
                        gx[idx] = *gv * gm[ch] * inv_std[ch];
                    }
                }
                vec![gx, want(p, 1).then_some(ggamma), want(p, 2).then_some(gbeta)]
            }),
        ))
    }
}

fn check_temperature<F: Float>(t: F) -> Result<()> {
    if !(t > F::ZERO) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// Max-subtracted softmax of `x / t` over rows of length `c`.
fn softmax_rows<F: Float>(x: &[F], c: usize, t: F) -> Vec<F> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let max = row.iter().fold(row[0], |m, v| m.max(*v));
        let start = out.len();
        out.extend(row.iter().map(|v| ((*v - max) / t).exp()));
        let total: F = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Input pixel for output `(oy, ox)` at kernel tap `(ky, kx)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }

    fn im2col<F: Float>(&self, x: &[F], col: &mut [F]) {
        let p = self.oh * self.ow;
        let hw = self.h * self.w;
        for ch in 0..self.c {
            let plane = &x[ch * hw..(ch + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            col[row + oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some(i) => plane[i],
                                None => F::ZERO,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Float>(&self, col: &[F], gx: &mut [F]) {
        let p = self.oh * self.ow;
        let hw = self.h * self.w;
        for ch in 0..self.c {
            let plane = &mut gx[ch * hw..(ch + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ch * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(i) = self.source(oy, ox, ky, kx) {
                                plane[i] += col[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_shape() {
        let a = t(&[2, 3], vec![1.0; 6]);
        let b = t(&[3, 4], vec![1.0; 12]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|v| *v == 3.0));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = t(&[2, 3], vec![1.0; 6]);
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn relu_values() {
        let r = t(&[2], vec![-1.5, 2.0]).relu();
        assert_eq!(r.to_vec(), vec![0.0, 2.0]);
    }

    #[test]
    fn gap_of_ones() {
        let x = t(&[1, 3, 4, 4], vec![1.0; 48]);
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        assert_eq!(y.to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 3, 3], (0..9).map(f64::from).collect());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t(&[1, 1, 3, 3], k);
        let y = x.conv2d(&w, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        let y2 = x.conv2d(&w, 2, 1).unwrap();
        assert_eq!(y2.shape(), &[1, 1, 2, 2]);
        assert_eq!(y2.to_vec(), vec![0.0, 2.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (n, c, h, w, o) = (2, 3, 5, 4, 2);
        let x: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let k: Vec<f64> = (0..o * c * 9).map(|i| ((i * 5 % 7) as f64) / 3.0 - 1.0).collect();
        let y = t(&[n, c, h, w], x.clone())
            .conv2d(&t(&[o, c, 3, 3], k.clone()), 2, 1)
            .unwrap();
        let (oh, ow) = (3, 2);
        assert_eq!(y.shape(), &[n, o, oh, ow]);
        let yv = y.to_vec();
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                        * k[((oc * c + ic) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = yv[((b * o + oc) * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, -100.0, 0.0, 100.0]);
        let p = x.softmax(1.0).unwrap();
        for row in p.to_vec().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(x.softmax(0.0).is_err());
    }

    #[test]
    fn shortcut_ops() {
        let x = t(&[1, 1, 4, 4], (0..16).map(f64::from).collect());
        let s = x.subsample(2).unwrap();
        assert_eq!(s.to_vec(), vec![0.0, 2.0, 8.0, 10.0]);
        let p = s.pad_channels(1).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2, 2]);
        assert_eq!(&p.to_vec()[4..], &[0.0; 4]);
    }

    #[test]
    fn gather_out_of_range() {
        let x = t(&[1, 3], vec![0.0; 3]);
        assert!(x.gather_rows(&[3]).is_err());
        assert_eq!(x.gather_rows(&[2]).unwrap().shape(), &[1]);
    }
}
