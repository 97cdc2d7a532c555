//! 2-D cross-correlation with zero padding, stride, dilation and channel
//! groups.
//!
//! Dense groups go through im2col + GEMM; groups with a single input channel
//! (depthwise) use direct loops. Work is split over batch items, and weight
//! gradients are reduced over the batch in a fixed order, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scalar::gemm;
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    /// Square `k×k` kernel, stride 1, no padding, no dilation, one group.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }

    /// Depthwise `k×k` convolution over `channels`, size-preserving padding.
    pub fn depthwise(channels: usize, k: usize, stride: usize, dilation: usize) -> Self {
        Self::new(channels, channels, k)
            .with_stride(stride)
            .with_dilation(dilation)
            .with_groups(channels)
            .with_same_padding()
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn with_dilation(mut self, r: usize) -> Self {
        self.dilation = (r, r);
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Padding `r(k-1)/2` per side, which keeps the spatial size at stride 1
    /// for odd kernels whatever the dilation.
    pub fn with_same_padding(mut self) -> Self {
        self.padding = (
            self.dilation.0 * (self.kernel.0 - 1) / 2,
            self.dilation.1 * (self.kernel.1 - 1) / 2,
        );
        self
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_per_group(),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{m} in {self:?}")));
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return bad("zero channel count or groups");
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad("channels not divisible by groups");
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad("zero kernel");
        }
        if self.stride.0 == 0 || self.stride.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0
        {
            return bad("stride and dilation must be >= 1");
        }
        Ok(())
    }

    /// `floor((H + 2p - r(k-1) - 1)/s) + 1`, or an error when that is < 1.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |len: usize, k: usize, s: usize, p: usize, r: usize| -> Option<usize> {
            let span = r * (k - 1) + 1;
            let padded = len + 2 * p;
            (padded >= span).then(|| (padded - span) / s + 1)
        };
        match (
            dim(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0),
            dim(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1),
        ) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(shape_err!(
                "non-positive output size for {h}x{w} input with {self:?}"
            )),
        }
    }
}

/// Gradients of [`conv2d_forward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

fn check_args<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    spec.validate()?;
    if input.c() != spec.in_channels {
        return Err(shape_err!(
            "conv input has {} channels, spec expects {}",
            input.c(),
            spec.in_channels
        ));
    }
    if weight.len() != spec.weight_len() {
        return Err(shape_err!(
            "conv weight has {} values, spec {:?} expects {}",
            weight.len(),
            spec.weight_shape(),
            spec.weight_len()
        ));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(shape_err!(
                "conv bias has {} values, expected {}",
                b.len(),
                spec.out_channels
            ));
        }
    }
    spec.output_size(input.h(), input.w())
}

/// Output indices `o` in `[lo, hi)` for which `o*stride + off` lands inside
/// `[0, in_len)`.
#[inline]
fn valid_range(off: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = in_len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.min(out_len as isize) as usize;
    let hi = hi.clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

struct Geometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn im2col<T: Scalar>(x: &[T], c0: usize, cg: usize, spec: &ConvSpec, g: &Geometry, col: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let plane = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..cg {
        let src = &x[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..kh {
            let offy = (ky * spec.dilation.0) as isize - spec.padding.0 as isize;
            let (ylo, yhi) = valid_range(offy, spec.stride.0, g.h, g.ho);
            for kx in 0..kw {
                let offx = (kx * spec.dilation.1) as isize - spec.padding.1 as isize;
                let (xlo, xhi) = valid_range(offx, spec.stride.1, g.w, g.wo);
                let dst = &mut col[row * plane..(row + 1) * plane];
                dst.iter_mut().for_each(|v| *v = T::zero());
                for oy in ylo..yhi {
                    let iy = (oy * spec.stride.0) as isize + offy;
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        drow[ox] = srow[((ox * spec.stride.1) as isize + offx) as usize];
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(
    col: &[T],
    c0: usize,
    cg: usize,
    spec: &ConvSpec,
    g: &Geometry,
    gx: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let plane = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..cg {
        let dst = &mut gx[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..kh {
            let offy = (ky * spec.dilation.0) as isize - spec.padding.0 as isize;
            let (ylo, yhi) = valid_range(offy, spec.stride.0, g.h, g.ho);
            for kx in 0..kw {
                let offx = (kx * spec.dilation.1) as isize - spec.padding.1 as isize;
                let (xlo, xhi) = valid_range(offx, spec.stride.1, g.w, g.wo);
                let src = &col[row * plane..(row + 1) * plane];
                for oy in ylo..yhi {
                    let iy = ((oy * spec.stride.0) as isize + offy) as usize;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        let ix = ((ox * spec.stride.1) as isize + offx) as usize;
                        drow[ix] = drow[ix] + srow[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise_identity(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.padding == (0, 0)
}

/// Single-input-channel groups: output channel `oc` reads input channel
/// `oc / out_per_group`.
fn depthwise_forward_item<T: Scalar>(
    x: &[T],
    weight: &[T],
    spec: &ConvSpec,
    g: &Geometry,
    out: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let og = spec.out_per_group();
    let plane = g.ho * g.wo;
    for oc in 0..spec.out_channels {
        let src = &x[(oc / og) * g.h * g.w..(oc / og + 1) * g.h * g.w];
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        let wk = &weight[oc * kh * kw..(oc + 1) * kh * kw];
        for ky in 0..kh {
            let offy = (ky * spec.dilation.0) as isize - spec.padding.0 as isize;
            let (ylo, yhi) = valid_range(offy, spec.stride.0, g.h, g.ho);
            for kx in 0..kw {
                let wv = wk[ky * kw + kx];
                let offx = (kx * spec.dilation.1) as isize - spec.padding.1 as isize;
                let (xlo, xhi) = valid_range(offx, spec.stride.1, g.w, g.wo);
                for oy in ylo..yhi {
                    let iy = ((oy * spec.stride.0) as isize + offy) as usize;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        let ix = ((ox * spec.stride.1) as isize + offx) as usize;
                        drow[ox] = drow[ox] + wv * srow[ix];
                    }
                }
            }
        }
    }
}

fn depthwise_backward_item<T: Scalar>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    spec: &ConvSpec,
    g: &Geometry,
    gx: &mut [T],
    gw: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let og = spec.out_per_group();
    let plane = g.ho * g.wo;
    for oc in 0..spec.out_channels {
        let ic = oc / og;
        let src = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        let gsrc = &mut gx[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        let go = &gout[oc * plane..(oc + 1) * plane];
        for ky in 0..kh {
            let offy = (ky * spec.dilation.0) as isize - spec.padding.0 as isize;
            let (ylo, yhi) = valid_range(offy, spec.stride.0, g.h, g.ho);
            for kx in 0..kw {
                let widx = oc * kh * kw + ky * kw + kx;
                let wv = weight[widx];
                let offx = (kx * spec.dilation.1) as isize - spec.padding.1 as isize;
                let (xlo, xhi) = valid_range(offx, spec.stride.1, g.w, g.wo);
                let mut acc = T::zero();
                for oy in ylo..yhi {
                    let iy = ((oy * spec.stride.0) as isize + offy) as usize;
                    let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        let ix = ((ox * spec.stride.1) as isize + offx) as usize;
                        acc = acc + grow[ox] * src[iy * g.w + ix];
                        gsrc[iy * g.w + ix] = gsrc[iy * g.w + ix] + wv * grow[ox];
                    }
                }
                gw[widx] = gw[widx] + acc;
            }
        }
    }
}

fn forward_item<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    g: &Geometry,
    out: &mut [T],
) {
    let plane = g.ho * g.wo;
    let cg = spec.in_per_group();
    let og = spec.out_per_group();
    let kk = spec.kernel.0 * spec.kernel.1;
    out.iter_mut().for_each(|v| *v = T::zero());
    if cg == 1 {
        depthwise_forward_item(x, weight, spec, g, out);
    } else if is_pointwise_identity(spec) {
        for grp in 0..spec.groups {
            let xs = &x[grp * cg * plane..(grp + 1) * cg * plane];
            let ws = &weight[grp * og * cg..(grp + 1) * og * cg];
            let os = &mut out[grp * og * plane..(grp + 1) * og * plane];
            gemm(false, false, og, cg, plane, ws, xs, false, os);
        }
    } else {
        let mut col = vec![T::zero(); cg * kk * plane];
        for grp in 0..spec.groups {
            im2col(x, grp * cg, cg, spec, g, &mut col);
            let ws = &weight[grp * og * cg * kk..(grp + 1) * og * cg * kk];
            let os = &mut out[grp * og * plane..(grp + 1) * og * plane];
            gemm(false, false, og, cg * kk, plane, ws, &col, false, os);
        }
    }
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v + b[oc]);
        }
    }
}

/// Cross-correlation (no kernel flip). `weight` has shape
/// `(out, in/groups, kh, kw)` flattened row-major.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (ho, wo) = check_args(input, weight, bias, spec)?;
    let g = Geometry {
        h: input.h(),
        w: input.w(),
        ho,
        wo,
    };
    let mut out = Tensor::zeros([input.n(), spec.out_channels, ho, wo]);
    let out_len = out.item_len();
    let in_len = input.item_len();
    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(n, o)| {
            forward_item(&input.data()[n * in_len..(n + 1) * in_len], weight, bias, spec, &g, o)
        });
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] given the forward input and weight.
pub fn conv2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weight: &[T],
    spec: &ConvSpec,
    with_bias: bool,
) -> Result<ConvGrads<T>> {
    let (ho, wo) = check_args(input, weight, None, spec)?;
    if upstream.shape() != [input.n(), spec.out_channels, ho, wo] {
        return Err(shape_err!(
            "conv upstream {:?} does not match forward output {:?}",
            upstream.shape(),
            [input.n(), spec.out_channels, ho, wo]
        ));
    }
    let g = Geometry {
        h: input.h(),
        w: input.w(),
        ho,
        wo,
    };
    let plane = ho * wo;
    let cg = spec.in_per_group();
    let og = spec.out_per_group();
    let kk = spec.kernel.0 * spec.kernel.1;
    let in_len = input.item_len();
    let out_len = upstream.item_len();

    let mut grad_input = Tensor::zeros(input.shape());
    let partial_w: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(n, gx)| {
            let x = &input.data()[n * in_len..(n + 1) * in_len];
            let go = &upstream.data()[n * out_len..(n + 1) * out_len];
            let mut gw = vec![T::zero(); weight.len()];
            if cg == 1 {
                depthwise_backward_item(x, weight, go, spec, &g, gx, &mut gw);
            } else if is_pointwise_identity(spec) {
                for grp in 0..spec.groups {
                    let xs = &x[grp * cg * plane..(grp + 1) * cg * plane];
                    let gos = &go[grp * og * plane..(grp + 1) * og * plane];
                    let ws = &weight[grp * og * cg..(grp + 1) * og * cg];
                    gemm(
                        false,
                        true,
                        og,
                        plane,
                        cg,
                        gos,
                        xs,
                        true,
                        &mut gw[grp * og * cg..(grp + 1) * og * cg],
                    );
                    gemm(
                        true,
                        false,
                        cg,
                        og,
                        plane,
                        ws,
                        gos,
                        true,
                        &mut gx[grp * cg * plane..(grp + 1) * cg * plane],
                    );
                }
            } else {
                let mut col = vec![T::zero(); cg * kk * plane];
                let mut gcol = vec![T::zero(); cg * kk * plane];
                for grp in 0..spec.groups {
                    im2col(x, grp * cg, cg, spec, &g, &mut col);
                    let gos = &go[grp * og * plane..(grp + 1) * og * plane];
                    let wr = grp * og * cg * kk..(grp + 1) * og * cg * kk;
                    gemm(false, true, og, plane, cg * kk, gos, &col, true, &mut gw[wr.clone()]);
                    gemm(true, false, cg * kk, og, plane, &weight[wr], gos, false, &mut gcol);
                    col2im_add(&gcol, grp * cg, cg, spec, &g, gx);
                }
            }
            gw
        })
        .collect();

    let mut grad_weight = vec![T::zero(); weight.len()];
    for gw in &partial_w {
        for (a, b) in grad_weight.iter_mut().zip(gw) {
            *a = *a + *b;
        }
    }

    let grad_bias = with_bias.then(|| {
        let mut gb = vec![T::zero(); spec.out_channels];
        for n in 0..upstream.n() {
            for (oc, chunk) in upstream.item(n).chunks(plane).enumerate() {
                gb[oc] = gb[oc] + chunk.iter().copied().sum::<T>();
            }
        }
        gb
    });

    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Direct seven-loop evaluation, kept as a readable reference.
pub fn conv2d_reference<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (ho, wo) = check_args(input, weight, bias, spec)?;
    let (kh, kw) = spec.kernel;
    let cg = spec.in_per_group();
    let og = spec.out_per_group();
    let mut out = Tensor::zeros([input.n(), spec.out_channels, ho, wo]);
    for n in 0..input.n() {
        for oc in 0..spec.out_channels {
            let grp = oc / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(T::zero(), |b| b[oc]);
                    for ci in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride.0 + ky * spec.dilation.0) as isize
                                    - spec.padding.0 as isize;
                                let ix = (ox * spec.stride.1 + kx * spec.dilation.1) as isize
                                    - spec.padding.1 as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= input.h() as isize
                                    || ix >= input.w() as isize
                                {
                                    continue;
                                }
                                let wv = weight[((oc * cg + ci) * kh + ky) * kw + kx];
                                acc = acc
                                    + wv * input.at(n, grp * cg + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let off = out.offset(n, oc, oy, ox);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    Ok(out)
}
