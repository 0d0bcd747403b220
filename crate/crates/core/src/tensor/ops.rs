use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::Padding;
use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

fn shape_err(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Error {
    Error::Shape {
        op,
        dim,
        expected,
        actual,
    }
}

// ---------------------------------------------------------------------------
// batch norm

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub channels: usize,
    pub epsilon: f64,
    /// Weight of the old running statistic in the exponential update.
    pub momentum: f64,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Element> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            channels,
            epsilon: 1e-5,
            momentum: 0.9,
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().c != self.channels {
            return Err(Error::config(
                "batchnorm",
                format!(
                    "input has {} channels, parameters have {}",
                    x.shape().c,
                    self.channels
                ),
            ));
        }
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != self.channels {
                return Err(Error::config(
                    "batchnorm",
                    format!("{name} has length {}, expected {}", v.len(), self.channels),
                ));
            }
        }
        Ok(())
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub mode: Mode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    /// Batch mean and biased variance (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn channel_stats<T: Element>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let c = x.shape().c;
    let m = (x.len() / c.max(1)) as f64;
    let mut mean = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        for (a, &v) in mean.iter_mut().zip(px) {
            *a += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        for ((a, &v), mu) in var.iter_mut().zip(px).zip(&mean) {
            let d = v.to_f64() - mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|a| *a /= m);
    (mean, var)
}

/// Pure batch-norm forward. In train mode it normalizes with batch statistics
/// (returned in the cache) and leaves the running statistics untouched.
pub fn batchnorm_forward<T: Element>(
    x: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    params.check(x)?;
    let s = x.shape();
    let c = s.c;
    let (mean, var, batch_mean, batch_var) = match mode {
        Mode::Train => {
            if s.n * s.h * s.w < 2 {
                return Err(Error::Precondition(
                    "train-mode batch norm needs at least 2 values per channel".into(),
                ));
            }
            let (m, v) = channel_stats(x);
            (m.clone(), v.clone(), m, v)
        }
        Mode::Infer => (
            params.running_mean.iter().map(|v| v.to_f64()).collect(),
            params.running_var.iter().map(|v| v.to_f64()).collect(),
            Vec::new(),
            Vec::new(),
        ),
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + params.epsilon).sqrt())
        .collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for ((px, hx), py) in x
        .data()
        .chunks_exact(c)
        .zip(xhat.data_mut().chunks_exact_mut(c))
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let h = (px[ch].to_f64() - mean[ch]) * inv_std[ch];
            hx[ch] = T::from_f64(h);
            py[ch] = T::from_f64(h * params.gamma[ch].to_f64() + params.beta[ch].to_f64());
        }
    }
    Ok((
        y,
        BatchNormCache {
            mode,
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

impl<T: Element> BatchNormParams<T> {
    /// Folds batch statistics from a train-mode forward into the running
    /// statistics. Variance is stored unbiased.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>, count: usize) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        let bessel = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for ch in 0..self.channels {
            let rm = self.running_mean[ch].to_f64();
            let rv = self.running_var[ch].to_f64();
            self.running_mean[ch] = T::from_f64(m * rm + (1.0 - m) * cache.batch_mean[ch]);
            self.running_var[ch] =
                T::from_f64((m * rv + (1.0 - m) * cache.batch_var[ch] * bessel).max(0.0));
        }
    }
}

/// Batch norm that also updates running statistics in train mode.
pub fn batchnorm<T: Element>(
    x: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let (y, cache) = batchnorm_forward(x, params, mode)?;
    let s = x.shape();
    params.update_running(&cache, s.n * s.h * s.w);
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_backward<T: Element>(
    gamma: &[T],
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let s = cache.xhat.shape();
    if grad_out.shape() != s {
        return Err(shape_err(
            "batchnorm_backward",
            "grad_out numel",
            s.numel(),
            grad_out.len(),
        ));
    }
    let c = s.c;
    let m = (s.n * s.h * s.w) as f64;
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (g, h) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
    {
        for ch in 0..c {
            let gv = g[ch].to_f64();
            sum_dy[ch] += gv;
            sum_dy_xhat[ch] += gv * h[ch].to_f64();
        }
    }
    let mut dx = Tensor::zeros(s);
    for ((d, g), h) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(cache.xhat.data().chunks_exact(c))
    {
        for ch in 0..c {
            let scale = gamma[ch].to_f64() * cache.inv_std[ch];
            let v = match cache.mode {
                Mode::Train => {
                    scale / m
                        * (m * g[ch].to_f64() - sum_dy[ch] - h[ch].to_f64() * sum_dy_xhat[ch])
                }
                Mode::Infer => scale * g[ch].to_f64(),
            };
            d[ch] = T::from_f64(v);
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: sum_dy_xhat.into_iter().map(T::from_f64).collect(),
        beta: sum_dy.into_iter().map(T::from_f64).collect(),
    })
}

// ---------------------------------------------------------------------------
// relu

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes the upstream gradient where the forward input was strictly
/// positive; the subgradient at 0 is 0.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(shape_err("relu_backward", "numel", x.len(), grad_out.len()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

// ---------------------------------------------------------------------------
// pooling

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::Precondition(
            "global_avg_pool needs H, W >= 1".into(),
        ));
    }
    let area = (s.h * s.w) as f64;
    let mut out = Vec::with_capacity(s.n * s.c);
    for b in 0..s.n {
        let mut acc = vec![0.0f64; s.c];
        for px in x.item(b).chunks_exact(s.c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v.to_f64();
            }
        }
        out.extend(acc.into_iter().map(|a| T::from_f64(a / area)));
    }
    Tensor::from_vec([s.n, 1, 1, s.c], out)
}

pub fn global_avg_pool_backward<T: Element>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = input_shape;
    if grad_out.shape() != Shape::new(s.n, 1, 1, s.c) {
        return Err(shape_err(
            "global_avg_pool_backward",
            "grad_out numel",
            s.n * s.c,
            grad_out.len(),
        ));
    }
    let inv = 1.0 / (s.h * s.w) as f64;
    let mut dx = Tensor::zeros(s);
    let item = s.item_len();
    for b in 0..s.n {
        let g = grad_out.item(b);
        let scaled: Vec<T> = g.iter().map(|&v| T::from_f64(v.to_f64() * inv)).collect();
        for px in dx.data_mut()[b * item..(b + 1) * item].chunks_exact_mut(s.c) {
            px.copy_from_slice(&scaled);
        }
    }
    Ok(dx)
}

/// Flat input index of the maximum feeding each output element.
#[derive(Clone, Debug)]
pub struct MaxPoolIndices(pub Vec<usize>);

pub fn max_pool<T: Element>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<(Tensor<T>, MaxPoolIndices)> {
    let s = x.shape();
    let params = super::ConvParams {
        kernel,
        stride,
        groups: 1,
        in_channels: 1,
        out_channels: 1,
        padding,
        has_bias: false,
    };
    params.validate()?;
    let (ho, wo) = params.output_hw(s.h, s.w)?;
    let (pt, pl) = params.pad_before();
    let out_shape = Shape::new(s.n, ho, wo, s.c);
    let row_len = wo * s.c;
    let rows: Vec<(Vec<T>, Vec<usize>)> = (0..s.n * ho)
        .into_par_iter()
        .map(|row| {
            let b = row / ho;
            let oy = row % ho;
            let mut vals = vec![T::ZERO; row_len];
            let mut idx = vec![usize::MAX; row_len];
            for ox in 0..wo {
                for ch in 0..s.c {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..kernel.0 {
                        let iy = (oy * stride.0 + ky) as isize - pt as isize;
                        if iy < 0 || iy as usize >= s.h {
                            continue;
                        }
                        for kx in 0..kernel.1 {
                            let ix = (ox * stride.1 + kx) as isize - pl as isize;
                            if ix < 0 || ix as usize >= s.w {
                                continue;
                            }
                            let i = x.index(b, iy as usize, ix as usize, ch);
                            let v = x.data()[i];
                            if best.is_none_or(|(bv, _)| v > bv) {
                                best = Some((v, i));
                            }
                        }
                    }
                    let (v, i) = best.expect("same/valid padding keeps a window non-empty");
                    vals[ox * s.c + ch] = v;
                    idx[ox * s.c + ch] = i;
                }
            }
            (vals, idx)
        })
        .collect();
    let mut data = Vec::with_capacity(out_shape.numel());
    let mut indices = Vec::with_capacity(out_shape.numel());
    for (v, i) in rows {
        data.extend(v);
        indices.extend(i);
    }
    Ok((Tensor::from_vec(out_shape, data)?, MaxPoolIndices(indices)))
}

pub fn max_pool_backward<T: Element>(
    input_shape: Shape,
    indices: &MaxPoolIndices,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if indices.0.len() != grad_out.len() {
        return Err(shape_err(
            "max_pool_backward",
            "grad_out numel",
            indices.0.len(),
            grad_out.len(),
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in indices.0.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// dense

/// Affine map over the flattened per-item features. `weights` has shape
/// `(1, 1, in, out)`; the result has shape `(N, 1, 1, out)`.
pub fn dense<T: Element>(x: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    let ws = weights.shape();
    let (fin, fout) = (ws.w, ws.c);
    if ws.n != 1 || ws.h != 1 {
        return Err(shape_err("dense", "weight leading axes", 1, ws.n * ws.h));
    }
    if s.item_len() != fin {
        return Err(shape_err("dense", "flattened features", fin, s.item_len()));
    }
    if bias.len() != fout {
        return Err(shape_err("dense", "bias length", fout, bias.len()));
    }
    let w = weights.data();
    let mut out = Vec::with_capacity(s.n * fout);
    for b in 0..s.n {
        let mut acc: Vec<f64> = bias.iter().map(|v| v.to_f64()).collect();
        for (i, &xv) in x.item(b).iter().enumerate() {
            let xv = xv.to_f64();
            for (a, &wv) in acc.iter_mut().zip(&w[i * fout..(i + 1) * fout]) {
                *a += xv * wv.to_f64();
            }
        }
        out.extend(acc.into_iter().map(T::from_f64));
    }
    Tensor::from_vec([s.n, 1, 1, fout], out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let s = x.shape();
    let ws = weights.shape();
    let (fin, fout) = (ws.w, ws.c);
    if grad_out.len() != s.n * fout || s.item_len() != fin {
        return Err(shape_err(
            "dense_backward",
            "grad_out numel",
            s.n * fout,
            grad_out.len(),
        ));
    }
    let w = weights.data();
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0f64; w.len()];
    let mut db = vec![0.0f64; fout];
    for b in 0..s.n {
        let g = grad_out.item(b);
        for (a, &gv) in db.iter_mut().zip(g) {
            *a += gv.to_f64();
        }
        for (i, &xv) in x.item(b).iter().enumerate() {
            let row = &w[i * fout..(i + 1) * fout];
            let mut s = 0.0f64;
            for (&wv, &gv) in row.iter().zip(g) {
                s += wv.to_f64() * gv.to_f64();
            }
            dx.push(T::from_f64(s));
            let xv = xv.to_f64();
            for (a, &gv) in dw[i * fout..(i + 1) * fout].iter_mut().zip(g) {
                *a += xv * gv.to_f64();
            }
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(s, dx)?,
        weights: Tensor::from_vec(ws, dw.into_iter().map(T::from_f64).collect())?,
        bias: db.into_iter().map(T::from_f64).collect(),
    })
}

// ---------------------------------------------------------------------------
// channel plumbing

/// Tiles the whole channel block `r` times: channels `(a, b)` with `r = 3`
/// become `(a, b, a, b, a, b)`.
pub fn replicate_channels<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 {
        return Err(Error::config("replicate", "replication factor must be >= 1"));
    }
    let s = x.shape();
    let mut data = Vec::with_capacity(x.len() * r);
    for px in x.data().chunks_exact(s.c.max(1)) {
        for _ in 0..r {
            data.extend_from_slice(px);
        }
    }
    Tensor::from_vec([s.n, s.h, s.w, s.c * r], data)
}

/// Sums the gradient over all replicas of each input channel.
pub fn replicate_channels_backward<T: Element>(
    grad_out: &Tensor<T>,
    r: usize,
) -> Result<Tensor<T>> {
    let s = grad_out.shape();
    if r == 0 || s.c % r != 0 {
        return Err(Error::config(
            "replicate",
            format!("{} channels not divisible by factor {r}", s.c),
        ));
    }
    let c = s.c / r;
    let mut data = Vec::with_capacity(grad_out.len() / r);
    for px in grad_out.data().chunks_exact(s.c) {
        for ch in 0..c {
            let mut acc = T::ZERO;
            for k in 0..r {
                acc += px[k * c + ch];
            }
            data.push(acc);
        }
    }
    Tensor::from_vec([s.n, s.h, s.w, c], data)
}

pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Argument("concat needs at least one input".into()))?
        .shape();
    for t in inputs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(shape_err(
                "concat",
                "spatial extent",
                first.n * first.h * first.w,
                s.n * s.h * s.w,
            ));
        }
    }
    let total_c: usize = inputs.iter().map(|t| t.shape().c).sum();
    let positions = first.n * first.h * first.w;
    let mut data = Vec::with_capacity(positions * total_c);
    for p in 0..positions {
        for t in inputs {
            let c = t.shape().c;
            data.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::from_vec([first.n, first.h, first.w, total_c], data)
}

pub fn concat_channels_backward<T: Element>(
    grad_out: &Tensor<T>,
    channels: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let s = grad_out.shape();
    let total: usize = channels.iter().sum();
    if total != s.c {
        return Err(shape_err("concat_backward", "channels", total, s.c));
    }
    let mut outs: Vec<Vec<T>> = channels
        .iter()
        .map(|&c| Vec::with_capacity(s.n * s.h * s.w * c))
        .collect();
    for px in grad_out.data().chunks_exact(s.c.max(1)) {
        let mut off = 0;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&px[off..off + c]);
            off += c;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec([s.n, s.h, s.w, c], d))
        .collect()
}

/// Elementwise sum of shape-identical tensors.
pub fn add<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Argument("add needs at least one input".into()))?;
    let mut out = (*first).clone();
    for t in &inputs[1..] {
        out.add_assign(t)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// softmax head

/// Row-wise softmax over the flattened per-item values, max-subtracted.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let k = s.item_len();
    let mut out = Vec::with_capacity(logits.len());
    for b in 0..s.n {
        let row = logits.item(b);
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| T::from_f64(e / z)));
    }
    Tensor::from_vec([s.n, 1, 1, k], out).expect("same element count")
}

/// Mean negative log-likelihood over the batch and the softmax
/// probabilities. Logits are taken per item, flattened.
pub fn softmax_xent<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    let k = s.item_len();
    if labels.len() != s.n {
        return Err(shape_err("softmax_xent", "labels", s.n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        let row = logits.item(b);
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[l].to_f64();
    }
    Ok((loss / s.n.max(1) as f64, probs))
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_xent_backward<T: Element>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let s = probs.shape();
    if labels.len() != s.n {
        return Err(shape_err("softmax_xent_backward", "labels", s.n, labels.len()));
    }
    let inv_n = 1.0 / s.n.max(1) as f64;
    let mut d = Vec::with_capacity(probs.len());
    for (b, &l) in labels.iter().enumerate() {
        for (j, &p) in probs.item(b).iter().enumerate() {
            let t = if j == l { 1.0 } else { 0.0 };
            d.push(T::from_f64((p.to_f64() - t) * inv_n));
        }
    }
    Tensor::from_vec(s, d)
}
