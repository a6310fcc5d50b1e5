use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding, dense, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (kernel / 2, kernel / 2),
            groups: 1,
            has_bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1)
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel)
        }
    }

    /// Non-overlapping patches: kernel == stride, no padding.
    pub fn patchify(in_channels: usize, out_channels: usize, patch: usize) -> Self {
        Self {
            stride: (patch, patch),
            padding: (0, 0),
            ..Self::new(in_channels, out_channels, patch)
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("conv spec {self:?}: {m}")));
        if self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("zero channels or groups".into());
        }
        if !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return bad("channels not divisible by groups".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return bad("zero kernel or stride".into());
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Learnable scalars: weights plus optional bias.
    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>()
            + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Config(format!(
                "conv {kh}x{kw} with padding {:?} yields empty output on {h}x{w} input",
                self.padding
            )));
        }
        Ok((
            (h + 2 * ph - kh) / self.stride.0 + 1,
            (w + 2 * pw - kw) / self.stride.1 + 1,
        ))
    }

    /// Multiply-accumulates for one batch element of an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w).unwrap_or((0, 0));
        let [co, ci, kh, kw] = self.weight_shape();
        (oh * ow * co * ci * kh * kw) as u64
    }
}

struct Geometry {
    batch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
}

fn check<T: Float>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Geometry> {
    spec.validate()?;
    let (b, c, h, w) = x.dims4()?;
    if c != spec.in_channels {
        return Err(shape_err(
            "conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(shape_err(
            "conv2d",
            format!(
                "weight shape {:?}, expected {:?}",
                weight.shape(),
                spec.weight_shape()
            ),
        ));
    }
    match (spec.has_bias, bias) {
        (true, Some(bt)) if bt.shape() == [spec.out_channels] => {}
        (false, None) => {}
        _ => return Err(shape_err("conv2d", "bias does not match spec")),
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok(Geometry {
        batch: b,
        h,
        w,
        oh,
        ow,
        cin_g: spec.in_channels / spec.groups,
        cout_g: spec.out_channels / spec.groups,
        k: spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1,
    })
}

fn is_plain_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.padding == (0, 0)
}

/// Unfolds one group of one batch element into a `(cin_g*kh*kw) x (oh*ow)` matrix.
fn im2col<T: Float>(src: &[T], g: &Geometry, spec: &ConvSpec, col: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sy, sx) = spec.stride;
    let (py, px) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let n = g.oh * g.ow;
    for c in 0..g.cin_g {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * n..][..n];
                for oy in 0..g.oh {
                    let iy = (oy * sy) as isize + ky as isize - py;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * sx) as isize + kx as isize - px;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the input plane.
fn col2im<T: Float>(col: &[T], g: &Geometry, spec: &ConvSpec, dst: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sy, sx) = spec.stride;
    let (py, px) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let n = g.oh * g.ow;
    for c in 0..g.cin_g {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((c * kh + ky) * kw + kx) * n..][..n];
                for oy in 0..g.oh {
                    let iy = (oy * sy) as isize + ky as isize - py;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * sx) as isize + kx as isize - px;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] = line[ix as usize] + row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Float>(x: &[T], w: &[T], g: &Geometry, spec: &ConvSpec, y: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sy, sx) = spec.stride;
    let (py, px) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let channels = spec.in_channels;
    for bc in 0..g.batch * channels {
        let c = bc % channels;
        let plane = &x[bc * g.h * g.w..(bc + 1) * g.h * g.w];
        let kern = &w[c * kh * kw..(c + 1) * kh * kw];
        let out = &mut y[bc * g.oh * g.ow..(bc + 1) * g.oh * g.ow];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for ky in 0..kh {
                    let iy = (oy * sy) as isize + ky as isize - py;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sx) as isize + kx as isize - px;
                        if ix >= 0 && ix < g.w as isize {
                            acc = acc + kern[ky * kw + kx] * plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                out[oy * g.ow + ox] = acc;
            }
        }
    }
}

/// Zero-padded 2-D convolution (cross-correlation) with optional grouping and bias.
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = check(x, spec, weight, bias)?;
    let n = g.oh * g.ow;
    let mut y = Tensor::zeros(&[g.batch, spec.out_channels, g.oh, g.ow]);
    if spec.is_depthwise() && g.cin_g == 1 {
        depthwise_forward(x.data(), weight.data(), &g, spec, y.data_mut());
    } else {
        let pointwise = is_plain_pointwise(spec);
        let mut col = if pointwise {
            Vec::new()
        } else {
            vec![T::zero(); g.k * n]
        };
        let in_per_batch = spec.in_channels * g.h * g.w;
        let out_per_batch = spec.out_channels * n;
        for b in 0..g.batch {
            for grp in 0..spec.groups {
                let src = &x.data()[b * in_per_batch + grp * g.cin_g * g.h * g.w..]
                    [..g.cin_g * g.h * g.w];
                let cols: &[T] = if pointwise {
                    src
                } else {
                    im2col(src, &g, spec, &mut col);
                    &col
                };
                let wg = &weight.data()[grp * g.cout_g * g.k..][..g.cout_g * g.k];
                let out =
                    &mut y.data_mut()[b * out_per_batch + grp * g.cout_g * n..][..g.cout_g * n];
                T::gemm(
                    g.cout_g,
                    g.k,
                    n,
                    T::one(),
                    wg,
                    g.k,
                    1,
                    cols,
                    n,
                    1,
                    T::zero(),
                    out,
                    n,
                    1,
                );
            }
        }
    }
    if let Some(bias) = bias {
        for (i, chunk) in y.data_mut().chunks_mut(n).enumerate() {
            let bv = bias.data()[i % spec.out_channels];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
pub struct Conv2dGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<Conv2dGrads<T>> {
    let bias_shape = Tensor::zeros(&[spec.out_channels]);
    let g = check(x, spec, weight, spec.has_bias.then_some(&bias_shape))?;
    let n = g.oh * g.ow;
    if dy.shape() != [g.batch, spec.out_channels, g.oh, g.ow] {
        return Err(shape_err("conv2d_backward", "upstream gradient shape"));
    }
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));

    if spec.is_depthwise() && g.cin_g == 1 {
        let (kh, kw) = spec.kernel;
        let (sy, sx) = spec.stride;
        let (py, px) = (spec.padding.0 as isize, spec.padding.1 as isize);
        let channels = spec.in_channels;
        for bc in 0..g.batch * channels {
            let c = bc % channels;
            let plane = &x.data()[bc * g.h * g.w..(bc + 1) * g.h * g.w];
            let gout = &dy.data()[bc * n..(bc + 1) * n];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight.data()[(c * kh + ky) * kw + kx];
                    let mut acc = T::zero();
                    for oy in 0..g.oh {
                        let iy = (oy * sy) as isize + ky as isize - py;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * sx) as isize + kx as isize - px;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let gv = gout[oy * g.ow + ox];
                            let xi = iy as usize * g.w + ix as usize;
                            acc = acc + gv * plane[xi];
                            if let Some(dx) = dx.as_mut() {
                                let d = &mut dx.data_mut()[bc * g.h * g.w + xi];
                                *d = *d + gv * wv;
                            }
                        }
                    }
                    let slot = &mut dw.data_mut()[(c * kh + ky) * kw + kx];
                    *slot = *slot + acc;
                }
            }
        }
    } else {
        let pointwise = is_plain_pointwise(spec);
        let mut col = vec![T::zero(); if pointwise { 0 } else { g.k * n }];
        let mut dcol = vec![T::zero(); if need_dx && !pointwise { g.k * n } else { 0 }];
        let in_per_batch = spec.in_channels * g.h * g.w;
        let out_per_batch = spec.out_channels * n;
        for b in 0..g.batch {
            for grp in 0..spec.groups {
                let in_off = b * in_per_batch + grp * g.cin_g * g.h * g.w;
                let src = &x.data()[in_off..][..g.cin_g * g.h * g.w];
                let cols: &[T] = if pointwise {
                    src
                } else {
                    im2col(src, &g, spec, &mut col);
                    &col
                };
                let gout = &dy.data()[b * out_per_batch + grp * g.cout_g * n..][..g.cout_g * n];
                let wg = &weight.data()[grp * g.cout_g * g.k..][..g.cout_g * g.k];
                let dwg = &mut dw.data_mut()[grp * g.cout_g * g.k..][..g.cout_g * g.k];
                // dW += dY * col^T
                T::gemm(
                    g.cout_g,
                    n,
                    g.k,
                    T::one(),
                    gout,
                    n,
                    1,
                    cols,
                    1,
                    n,
                    T::one(),
                    dwg,
                    g.k,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    let dst = &mut dx.data_mut()[in_off..][..g.cin_g * g.h * g.w];
                    // dcol = W^T * dY
                    if pointwise {
                        T::gemm(
                            g.k,
                            g.cout_g,
                            n,
                            T::one(),
                            wg,
                            1,
                            g.k,
                            gout,
                            n,
                            1,
                            T::zero(),
                            dst,
                            n,
                            1,
                        );
                    } else {
                        T::gemm(
                            g.k,
                            g.cout_g,
                            n,
                            T::one(),
                            wg,
                            1,
                            g.k,
                            gout,
                            n,
                            1,
                            T::zero(),
                            &mut dcol,
                            n,
                            1,
                        );
                        col2im(&dcol, &g, spec, dst);
                    }
                }
            }
        }
    }

    let dbias = spec.has_bias.then(|| {
        let mut db = Tensor::zeros(&[spec.out_channels]);
        for (i, chunk) in dy.data().chunks(n).enumerate() {
            let c = i % spec.out_channels;
            db.data_mut()[c] = db.data()[c] + chunk.iter().copied().sum::<T>();
        }
        db
    });
    Ok(Conv2dGrads {
        dx,
        dweight: dw,
        dbias,
    })
}

/// 1-D convolution along the channel axis of a `(b, c, 1, 1)` map, zero padded
/// to keep `c` outputs. No bias.
pub fn conv1d_channel<T: Float>(x: &Tensor<T>, kernel: &[T]) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    check_conv1d(h, w, kernel.len())?;
    let pad = (kernel.len() / 2) as isize;
    let mut y = Tensor::zeros(x.shape());
    for bi in 0..b {
        let src = &x.data()[bi * c..(bi + 1) * c];
        let dst = &mut y.data_mut()[bi * c..(bi + 1) * c];
        for (ci, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &kv) in kernel.iter().enumerate() {
                let src_i = ci as isize + j as isize - pad;
                if src_i >= 0 && (src_i as usize) < c {
                    acc = acc + kv * src[src_i as usize];
                }
            }
            *d = acc;
        }
    }
    Ok(y)
}

fn check_conv1d(h: usize, w: usize, k: usize) -> Result<()> {
    if h != 1 || w != 1 {
        return Err(shape_err(
            "conv1d_channel",
            format!("expected 1x1 spatial extents, got {h}x{w}"),
        ));
    }
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "conv1d_channel kernel size must be odd, got {k}"
        )));
    }
    Ok(())
}

/// Returns `(dx, dkernel)`.
pub fn conv1d_channel_backward<T: Float>(
    x: &Tensor<T>,
    kernel: &[T],
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, c, h, w) = x.dims4()?;
    check_conv1d(h, w, kernel.len())?;
    let pad = (kernel.len() / 2) as isize;
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = vec![T::zero(); kernel.len()];
    for bi in 0..b {
        for ci in 0..c {
            let g = dy.data()[bi * c + ci];
            for (j, &kv) in kernel.iter().enumerate() {
                let src_i = ci as isize + j as isize - pad;
                if src_i >= 0 && (src_i as usize) < c {
                    let si = bi * c + src_i as usize;
                    dx.data_mut()[si] = dx.data()[si] + kv * g;
                    dk[j] = dk[j] + x.data()[si] * g;
                }
            }
        }
    }
    Ok((dx, dk))
}
