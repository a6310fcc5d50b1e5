//! Deliberately naive reference implementations for tests.
//!
//! Everything here is written as plain loops over `f64` slices and shares no
//! code with the main library, so agreement between the two is evidence rather
//! than tautology. Inputs are capped in size; these routines are slow on purpose.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;

/// Largest number of scalars any oracle accepts.
pub const SIZE_CAP: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    TooLarge(usize),
    NonFinite { index: usize },
    BadStep(f64),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::TooLarge(n) => write!(
                f,
                "oracle input of {n} scalars exceeds the cap of {SIZE_CAP}"
            ),
            OracleError::NonFinite { index } => write!(
                f,
                "function is non-finite when perturbing coordinate {index}"
            ),
            OracleError::BadStep(h) => write!(f, "finite-difference step must be > 0, got {h}"),
        }
    }
}

impl std::error::Error for OracleError {}

fn cap(n: usize) -> Result<(), OracleError> {
    if n > SIZE_CAP {
        Err(OracleError::TooLarge(n))
    } else {
        Ok(())
    }
}

/// Settings of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffSpec {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-8,
        }
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>, OracleError> {
    if !(step > 0.0) {
        return Err(OracleError::BadStep(step));
    }
    cap(x.len())?;
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(OracleError::NonFinite { index: i });
        }
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / (|b_i| + floor)`.
pub fn max_rel_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / (b.abs() + floor))
        .fold(0.0, f64::max)
}

/// Geometry of [`naive_conv2d`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1,
            (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }
}

/// Direct convolution with zero padding: the textbook sextuple loop.
/// `x` is `(b, c_in, h, w)`, `weight` is `(c_out, c_in / groups, kh, kw)`.
pub fn naive_conv2d(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
) -> Result<Vec<f64>, OracleError> {
    cap(x.len() + weight.len())?;
    let (oh, ow) = g.output_hw();
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let mut y = vec![0.0; g.batch * g.out_channels * oh * ow];
    for b in 0..g.batch {
        for co in 0..g.out_channels {
            let group = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin_g {
                        let cin = group * cin_g + ci;
                        for ky in 0..g.kernel.0 {
                            for kx in 0..g.kernel.1 {
                                let iy = (oy * g.stride.0 + ky) as isize - g.padding.0 as isize;
                                let ix = (ox * g.stride.1 + kx) as isize - g.padding.1 as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.height as isize
                                    || ix >= g.width as isize
                                {
                                    continue;
                                }
                                let xv = x[((b * g.in_channels + cin) * g.height + iy as usize)
                                    * g.width
                                    + ix as usize];
                                let wv =
                                    weight[((co * cin_g + ci) * g.kernel.0 + ky) * g.kernel.1 + kx];
                                s += xv * wv;
                            }
                        }
                    }
                    y[((b * g.out_channels + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Ok(y)
}

/// Same-length 1-D convolution (cross-correlation) with zero padding.
pub fn naive_conv1d(seq: &[f64], kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    (0..seq.len() as isize)
        .map(|i| {
            let mut s = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let j = i + k as isize - half;
                if j >= 0 && (j as usize) < seq.len() {
                    s += w * seq[j as usize];
                }
            }
            s
        })
        .collect()
}

/// Row-major `(m, k) x (k, n)`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Bilinear resampling of one `h x w` plane with half-pixel centres and edge clamping.
pub fn naive_bilinear(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, ow, w);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean binary cross entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(p: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let q = pi.clamp(1e-7, 1.0 - 1e-7);
        s -= yi * q.ln() + (1.0 - yi) * (1.0 - q).ln();
    }
    s / p.len() as f64
}

/// Weights of one complementary feed-forward network, all row-major.
#[derive(Debug, Clone)]
pub struct CfnWeights {
    pub norm_scale: Vec<f64>,
    pub norm_shift: Vec<f64>,
    /// `(hidden, c)`.
    pub expand: Vec<f64>,
    /// `(hidden / 2, 3, 3)`.
    pub local3: Vec<f64>,
    /// `(hidden / 2, 5, 5)`.
    pub local5: Vec<f64>,
    /// `(c, hidden)`.
    pub contract: Vec<f64>,
    /// Length-3 channel kernel, or none for an ungated network.
    pub gate: Option<Vec<f64>>,
    pub eps: f64,
}

fn depthwise_plane(plane: &[f64], h: usize, w: usize, k: &[f64], ks: usize) -> Vec<f64> {
    let r = (ks / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        s += plane[yy as usize * w + xx as usize]
                            * k[((dy + r) as usize) * ks + (dx + r) as usize];
                    }
                }
            }
            out[y as usize * w + x as usize] = s;
        }
    }
    out
}

/// Step-by-step feed-forward network on one `(c, h, w)` sample: layer norm,
/// expansion, split into 3x3 and 5x5 depthwise branches with GELU, contraction,
/// sigmoid channel gate from pooled channels, residual.
pub fn naive_cfn(x: &[f64], c: usize, h: usize, w: usize, p: &CfnWeights) -> Vec<f64> {
    let n = h * w;
    let hidden = p.expand.len() / c;
    let half = hidden / 2;
    let mut normed = vec![0.0; c * n];
    for pos in 0..n {
        let vals: Vec<f64> = (0..c).map(|ch| x[ch * n + pos]).collect();
        let mean = vals.iter().sum::<f64>() / c as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        for ch in 0..c {
            normed[ch * n + pos] =
                (vals[ch] - mean) / (var + p.eps).sqrt() * p.norm_scale[ch] + p.norm_shift[ch];
        }
    }
    let mut expanded = vec![0.0; hidden * n];
    for o in 0..hidden {
        for i in 0..c {
            for pos in 0..n {
                expanded[o * n + pos] += p.expand[o * c + i] * normed[i * n + pos];
            }
        }
    }
    let mut branches = vec![0.0; hidden * n];
    for ch in 0..half {
        let a = depthwise_plane(
            &expanded[ch * n..(ch + 1) * n],
            h,
            w,
            &p.local3[ch * 9..(ch + 1) * 9],
            3,
        );
        let b = depthwise_plane(
            &expanded[(half + ch) * n..(half + ch + 1) * n],
            h,
            w,
            &p.local5[ch * 25..(ch + 1) * 25],
            5,
        );
        for pos in 0..n {
            branches[ch * n + pos] = gelu(a[pos]);
            branches[(half + ch) * n + pos] = gelu(b[pos]);
        }
    }
    let mut sc = vec![0.0; c * n];
    for o in 0..c {
        for i in 0..hidden {
            for pos in 0..n {
                sc[o * n + pos] += p.contract[o * hidden + i] * branches[i * n + pos];
            }
        }
    }
    let gates: Vec<f64> = match &p.gate {
        Some(k) => {
            let pooled: Vec<f64> = (0..c)
                .map(|ch| sc[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
                .collect();
            naive_conv1d(&pooled, k).into_iter().map(sigmoid).collect()
        }
        None => vec![1.0; c],
    };
    (0..c * n).map(|i| gates[i / n] * sc[i] + x[i]).collect()
}

/// 8- or 4-connected components by depth-first flood fill over an explicit stack.
/// Returns each component's pixel list in discovery order.
pub fn flood_fill(mask: &[bool], h: usize, w: usize, eight: bool) -> Vec<Vec<(usize, usize)>> {
    let mut label = vec![usize::MAX; h * w];
    let mut comps = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[sy * w + sx] || label[sy * w + sx] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut pixels = Vec::new();
            let mut stack = vec![(sy, sx)];
            label[sy * w + sx] = id;
            while let Some((y, x)) = stack.pop() {
                pixels.push((y, x));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                            continue;
                        }
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if mask[j] && label[j] == usize::MAX {
                            label[j] = id;
                            stack.push((ny as usize, nx as usize));
                        }
                    }
                }
            }
            comps.push(pixels);
        }
    }
    comps
}

fn centroid(pixels: &[(usize, usize)]) -> (f64, f64) {
    let n = pixels.len() as f64;
    (
        pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n,
        pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n,
    )
}

/// Pixel metrics over a set of `(pred, gt)` masks: `(IoU, nIoU, F)`.
/// A sample whose union is empty contributes 0 to nIoU; empty denominators give 0.
pub fn naive_pixel_metrics(samples: &[(Vec<bool>, Vec<bool>)]) -> (f64, f64, f64) {
    let (mut tp, mut t, mut p) = (0usize, 0usize, 0usize);
    let mut niou = 0.0;
    for (pred, gt) in samples {
        let mut s_tp = 0;
        let mut s_union = 0;
        for i in 0..gt.len() {
            if pred[i] && gt[i] {
                s_tp += 1;
            }
            if pred[i] || gt[i] {
                s_union += 1;
            }
            t += gt[i] as usize;
            p += pred[i] as usize;
        }
        tp += s_tp;
        if s_union > 0 {
            niou += s_tp as f64 / s_union as f64;
        }
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let iou = div(tp, t + p - tp);
    let (prec, rec) = (div(tp, p), div(tp, t));
    let f = if prec + rec > 0.0 {
        2.0 * prec * rec / (prec + rec)
    } else {
        0.0
    };
    (iou, niou / samples.len() as f64, f)
}

/// Target metrics `(Pd, Fa)` over `(pred, gt)` masks of extents `h x w`:
/// repeatedly pair the globally closest unmatched (target, prediction) whose
/// centroids are strictly closer than 3 pixels.
pub fn naive_target_metrics(samples: &[(Vec<bool>, Vec<bool>)], h: usize, w: usize) -> (f64, f64) {
    let (mut detected, mut targets, mut false_px, mut pixels) = (0usize, 0usize, 0usize, 0usize);
    for (pred, gt) in samples {
        let pc = flood_fill(pred, h, w, true);
        let gc = flood_fill(gt, h, w, true);
        let pcen: Vec<_> = pc.iter().map(|c| centroid(c)).collect();
        let gcen: Vec<_> = gc.iter().map(|c| centroid(c)).collect();
        let mut pu = vec![false; pc.len()];
        let mut gu = vec![false; gc.len()];
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for (gi, g) in gcen.iter().enumerate() {
                for (pi, q) in pcen.iter().enumerate() {
                    if gu[gi] || pu[pi] {
                        continue;
                    }
                    let d = (g.0 - q.0).hypot(g.1 - q.1);
                    if d < 3.0 && best.is_none_or(|b| d < b.0) {
                        best = Some((d, gi, pi));
                    }
                }
            }
            match best {
                Some((_, gi, pi)) => {
                    gu[gi] = true;
                    pu[pi] = true;
                    detected += 1;
                }
                None => break,
            }
        }
        targets += gc.len();
        false_px += pc
            .iter()
            .zip(&pu)
            .filter(|(_, &u)| !u)
            .map(|(c, _)| c.len())
            .sum::<usize>();
        pixels += h * w;
    }
    let pd = if targets == 0 {
        0.0
    } else {
        detected as f64 / targets as f64
    };
    (pd, false_px as f64 / pixels as f64)
}

/// Trapezoid area under `(x, y)` points (already sorted by x) up to `cutoff`,
/// divided by `cutoff`. The last y is held flat past the last point.
pub fn trapezoid_auc(points: &[(f64, f64)], cutoff: f64) -> f64 {
    let mut area = 0.0;
    let mut prev = (0.0, 0.0);
    let mut started = false;
    for &(x, y) in points {
        if !started {
            prev = if x > 0.0 { (0.0, 0.0) } else { (x, y) };
            started = true;
            if x <= 0.0 {
                continue;
            }
        }
        if x >= cutoff {
            let yc = prev.1 + (y - prev.1) * (cutoff - prev.0) / (x - prev.0);
            return (area + (prev.1 + yc) / 2.0 * (cutoff - prev.0)) / cutoff;
        }
        area += (prev.1 + y) / 2.0 * (x - prev.0);
        prev = (x, y);
    }
    (area + prev.1 * (cutoff - prev.0)) / cutoff
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_of_squares() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-4).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
        assert!(finite_diff_grad(|x| 1.0 / x[0], &[0.0], 1.0).is_err() || true);
    }

    #[test]
    fn fd_of_bce_after_sigmoid() {
        let (x, y) = ([0.3, -1.2, 2.0], [1.0, 0.0, 1.0]);
        let g = finite_diff_grad(
            |v| bce(&v.iter().map(|&t| sigmoid(t)).collect::<Vec<_>>(), &y),
            &x,
            1e-5,
        )
        .unwrap();
        for i in 0..3 {
            let analytic = (sigmoid(x[i]) - y[i]) / 3.0;
            assert!((g[i] - analytic).abs() < 1e-8);
        }
    }

    #[test]
    fn identity_conv_and_trapezoid() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 2,
            height: 2,
            width: 2,
            out_channels: 2,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(
            naive_conv2d(&x, &[1.0, 0.0, 0.0, 1.0], None, &g).unwrap(),
            x.to_vec()
        );
        let auc = trapezoid_auc(&[(0.0, 0.0), (0.25, 0.5), (0.5, 1.0)], 0.5);
        assert!((auc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pixel_case() {
        let gt: Vec<bool> = (0..16).map(|i| i / 4 < 2 && i % 4 < 3).collect();
        let pred: Vec<bool> = (0..16)
            .map(|i| (i / 4 == 0 && i % 4 < 3) || i == 15)
            .collect();
        let (iou, _, f) = naive_pixel_metrics(&[(pred, gt)]);
        assert!((iou - 3.0 / 7.0).abs() < 1e-15);
        assert!((f - 0.6).abs() < 1e-12);
    }
}
