use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fixed_chunks, Element, Shape, Tensor, REDUCTION_CHUNKS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Total padding `k - 1` per axis, `floor` of it before and `ceil` after.
    /// Output extent is `ceil(in / stride)`.
    #[default]
    Same,
    Valid,
}

/// Static description of a (possibly grouped) 2-D convolution.
///
/// Weights are laid out `(kh, kw, in_channels / groups, out_channels)`.
/// Groups partition channels contiguously; output channel `o` belongs to
/// group `o / (out_channels / groups)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
    pub has_bias: bool,
}

impl ConvParams {
    pub fn pointwise(in_channels: usize, out_channels: usize, has_bias: bool) -> Self {
        ConvParams {
            kernel: (1, 1),
            stride: (1, 1),
            groups: 1,
            in_channels,
            out_channels,
            padding: Padding::Same,
            has_bias,
        }
    }

    pub fn depthwise(channels: usize, k: usize, stride: usize, has_bias: bool) -> Self {
        ConvParams {
            kernel: (k, k),
            stride: (stride, stride),
            groups: channels,
            in_channels: channels,
            out_channels: channels,
            padding: Padding::Same,
            has_bias,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::config("conv2d", reason));
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad("kernel dimensions must be positive".into());
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return bad("stride must be positive".into());
        }
        if self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("groups and channel counts must be positive".into());
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            ));
        }
        Ok(())
    }

    /// Expected weight tensor shape.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.kernel.0,
            self.kernel.1,
            self.in_channels / self.groups,
            self.out_channels,
        )
    }

    /// Number of scalar weights, bias included.
    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        match self.padding {
            Padding::Same => Ok((h.div_ceil(sh), w.div_ceil(sw))),
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::config(
                        "conv2d",
                        format!("valid padding needs input {h}x{w} >= kernel {kh}x{kw}"),
                    ));
                }
                Ok(((h - kh) / sh + 1, (w - kw) / sw + 1))
            }
        }
    }

    /// Padding applied before the first row and column.
    pub fn pad_before(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2),
            Padding::Valid => (0, 0),
        }
    }

    fn check_inputs<T: Element>(
        &self,
        x: &Tensor<T>,
        weights: &Tensor<T>,
        bias: Option<&[T]>,
    ) -> Result<()> {
        self.validate()?;
        let xs = x.shape();
        if xs.c != self.in_channels {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "input channels",
                expected: self.in_channels,
                actual: xs.c,
            });
        }
        let ws = weights.shape();
        let expected = self.weight_shape();
        for (dim, e, a) in [
            ("kernel height", expected.n, ws.n),
            ("kernel width", expected.h, ws.h),
            ("weight in_channels/groups", expected.w, ws.w),
            ("weight out_channels", expected.c, ws.c),
        ] {
            if e != a {
                return Err(Error::Shape {
                    op: "conv2d",
                    dim,
                    expected: e,
                    actual: a,
                });
            }
        }
        match (self.has_bias, bias) {
            (true, None) => Err(Error::config("conv2d", "has_bias set but no bias given")),
            (false, Some(_)) => Err(Error::config("conv2d", "bias given but has_bias unset")),
            (true, Some(b)) if b.len() != self.out_channels => Err(Error::Shape {
                op: "conv2d",
                dim: "bias length",
                expected: self.out_channels,
                actual: b.len(),
            }),
            _ => Ok(()),
        }
    }
}

/// Input coordinate read by output coordinate `o` at kernel tap `k`.
#[inline]
fn tap(o: usize, stride: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

/// Output coordinate fed by input coordinate `i` at kernel tap `k`, if any.
#[inline]
fn tap_back(i: usize, stride: usize, k: usize, pad: usize, out_extent: usize) -> Option<usize> {
    let t = i as isize + pad as isize - k as isize;
    if t < 0 || t as usize % stride != 0 {
        return None;
    }
    let o = t as usize / stride;
    (o < out_extent).then_some(o)
}

pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    params: &ConvParams,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
) -> Result<Tensor<T>> {
    params.check_inputs(x, weights, bias)?;
    let xs = x.shape();
    let (ho, wo) = params.output_hw(xs.h, xs.w)?;
    let (kh, kw) = params.kernel;
    let (sh, sw) = params.stride;
    let (pt, pl) = params.pad_before();
    let cout = params.out_channels;
    let cin_g = params.in_channels / params.groups;
    let cout_g = cout / params.groups;
    let depthwise = params.is_depthwise();
    let w = weights.data();

    let mut out = Tensor::zeros([xs.n, ho, wo, cout]);
    if out.is_empty() {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(wo * cout)
        .enumerate()
        .for_each(|(row, orow)| {
            let b = row / ho;
            let oy = row % ho;
            for ox in 0..wo {
                let o = &mut orow[ox * cout..(ox + 1) * cout];
                if let Some(bias) = bias {
                    o.copy_from_slice(bias);
                }
                for ky in 0..kh {
                    let Some(iy) = tap(oy, sh, ky, pt, xs.h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(ix) = tap(ox, sw, kx, pl, xs.w) else {
                            continue;
                        };
                        let px = x.pixel(b, iy, ix);
                        let wbase = (ky * kw + kx) * cin_g * cout;
                        if depthwise {
                            let ws = &w[wbase..wbase + cout];
                            for ((acc, &xv), &wv) in o.iter_mut().zip(px).zip(ws) {
                                *acc += xv * wv;
                            }
                            continue;
                        }
                        for g in 0..params.groups {
                            let os = &mut o[g * cout_g..(g + 1) * cout_g];
                            for cl in 0..cin_g {
                                let xv = px[g * cin_g + cl];
                                let start = wbase + cl * cout + g * cout_g;
                                let ws = &w[start..start + cout_g];
                                for (acc, &wv) in os.iter_mut().zip(ws) {
                                    *acc += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    params: &ConvParams,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let bias_stub = params.has_bias.then(|| vec![T::ZERO; params.out_channels]);
    params.check_inputs(x, weights, bias_stub.as_deref())?;
    let xs = x.shape();
    let (ho, wo) = params.output_hw(xs.h, xs.w)?;
    let gs = grad_out.shape();
    if gs != Shape::new(xs.n, ho, wo, params.out_channels) {
        return Err(Error::Shape {
            op: "conv2d_backward",
            dim: "grad_out numel",
            expected: xs.n * ho * wo * params.out_channels,
            actual: gs.numel(),
        });
    }
    let (kh, kw) = params.kernel;
    let (sh, sw) = params.stride;
    let (pt, pl) = params.pad_before();
    let cin = params.in_channels;
    let cout = params.out_channels;
    let cin_g = cin / params.groups;
    let cout_g = cout / params.groups;
    let depthwise = params.is_depthwise();
    let w = weights.data();

    // Input gradient, gathered per input row.
    let mut dx = Tensor::zeros(xs);
    if !dx.is_empty() {
        dx.data_mut()
            .par_chunks_mut(xs.w * cin)
            .enumerate()
            .for_each(|(row, drow)| {
                let b = row / xs.h;
                let iy = row % xs.h;
                for ix in 0..xs.w {
                    let d = &mut drow[ix * cin..(ix + 1) * cin];
                    for ky in 0..kh {
                        let Some(oy) = tap_back(iy, sh, ky, pt, ho) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ox) = tap_back(ix, sw, kx, pl, wo) else {
                                continue;
                            };
                            let g_px = grad_out.pixel(b, oy, ox);
                            let wbase = (ky * kw + kx) * cin_g * cout;
                            if depthwise {
                                let ws = &w[wbase..wbase + cout];
                                for ((acc, &gv), &wv) in d.iter_mut().zip(g_px).zip(ws) {
                                    *acc += gv * wv;
                                }
                                continue;
                            }
                            for g in 0..params.groups {
                                let gsl = &g_px[g * cout_g..(g + 1) * cout_g];
                                for cl in 0..cin_g {
                                    let start = wbase + cl * cout + g * cout_g;
                                    let ws = &w[start..start + cout_g];
                                    let mut s = T::ZERO;
                                    for (&gv, &wv) in gsl.iter().zip(ws) {
                                        s += gv * wv;
                                    }
                                    d[g * cin_g + cl] += s;
                                }
                            }
                        }
                    }
                }
            });
    }

    // Weight and bias gradients: fixed row chunks, summed in chunk order.
    let rows = xs.n * ho;
    let wlen = w.len();
    let partials: Vec<(Vec<T>, Vec<f64>)> = fixed_chunks(rows, REDUCTION_CHUNKS)
        .into_par_iter()
        .map(|range| {
            let mut dw = vec![T::ZERO; wlen];
            let mut db = vec![0.0f64; if params.has_bias { cout } else { 0 }];
            for row in range {
                let b = row / ho;
                let oy = row % ho;
                for ox in 0..wo {
                    let g_px = grad_out.pixel(b, oy, ox);
                    for (acc, &gv) in db.iter_mut().zip(g_px) {
                        *acc += gv.to_f64();
                    }
                    for ky in 0..kh {
                        let Some(iy) = tap(oy, sh, ky, pt, xs.h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = tap(ox, sw, kx, pl, xs.w) else {
                                continue;
                            };
                            let px = x.pixel(b, iy, ix);
                            let wbase = (ky * kw + kx) * cin_g * cout;
                            if depthwise {
                                let dws = &mut dw[wbase..wbase + cout];
                                for ((acc, &xv), &gv) in dws.iter_mut().zip(px).zip(g_px) {
                                    *acc += xv * gv;
                                }
                                continue;
                            }
                            for g in 0..params.groups {
                                let gsl = &g_px[g * cout_g..(g + 1) * cout_g];
                                for cl in 0..cin_g {
                                    let xv = px[g * cin_g + cl];
                                    let start = wbase + cl * cout + g * cout_g;
                                    for (acc, &gv) in dw[start..start + cout_g].iter_mut().zip(gsl)
                                    {
                                        *acc += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![T::ZERO; wlen];
    let mut db = vec![0.0f64; if params.has_bias { cout } else { 0 }];
    for (pw, pb) in &partials {
        for (a, &v) in dw.iter_mut().zip(pw) {
            *a += v;
        }
        for (a, &v) in db.iter_mut().zip(pb) {
            *a += v;
        }
    }

    Ok(ConvGrads {
        input: dx,
        weights: Tensor::from_vec(weights.shape(), dw)?,
        bias: params
            .has_bias
            .then(|| db.into_iter().map(T::from_f64).collect()),
    })
}
