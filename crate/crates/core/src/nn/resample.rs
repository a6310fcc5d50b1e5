use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Source taps `(i0, i1, frac)` for each output index, half-pixel
/// (`align_corners = false`) convention with edge clamping.
fn axis_taps<T: Float>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

fn check<T: Float>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(shape_err(
            "resample_bilinear",
            format!("{h}x{w} -> {out_h}x{out_w}"),
        ));
    }
    Ok((b, c, h, w))
}

/// Bilinear resampling of every `(b, c)` plane to `out_h x out_w`.
///
/// Interpolation is written as `a + t * (b - a)` so constant regions are
/// reproduced exactly.
pub fn resample_bilinear<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = check(x, out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = axis_taps::<T>(h, out_h);
    let tx = axis_taps::<T>(w, out_w);
    let mut y = Tensor::zeros(&[b, c, out_h, out_w]);
    for (src, dst) in x
        .data()
        .chunks(h * w)
        .zip(y.data_mut().chunks_mut(out_h * out_w))
    {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] + lx * (r0[x1] - r0[x0]);
                let bottom = r1[x0] + lx * (r1[x1] - r1[x0]);
                dst[oy * out_w + ox] = top + ly * (bottom - top);
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`resample_bilinear`] for an input of extents `in_h x in_w`.
pub fn resample_bilinear_backward<T: Float>(
    dy: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (b, c, out_h, out_w) = dy.dims4()?;
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(dy.clone());
    }
    let ty = axis_taps::<T>(in_h, out_h);
    let tx = axis_taps::<T>(in_w, out_w);
    let one = T::one();
    let mut dx = Tensor::zeros(&[b, c, in_h, in_w]);
    for (g, d) in dy
        .data()
        .chunks(out_h * out_w)
        .zip(dx.data_mut().chunks_mut(in_h * in_w))
    {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = g[oy * out_w + ox];
                let top = gv * (one - ly);
                let bottom = gv * ly;
                d[y0 * in_w + x0] = d[y0 * in_w + x0] + top * (one - lx);
                d[y0 * in_w + x1] = d[y0 * in_w + x1] + top * lx;
                d[y1 * in_w + x0] = d[y1 * in_w + x0] + bottom * (one - lx);
                d[y1 * in_w + x1] = d[y1 * in_w + x1] + bottom * lx;
            }
        }
    }
    Ok(dx)
}
