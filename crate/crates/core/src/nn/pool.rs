use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max2x2,
    GlobalAverage,
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output, the
/// flat input index of the selected maximum (first maximum wins ties).
pub fn max_pool2x2<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(shape_err(
            "max_pool2x2",
            format!(
                "spatial extents {h}x{w} must be even and nonzero (pad inputs to a multiple of 16)"
            ),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[b, c, oh, ow]);
    let mut arg = vec![0usize; b * c * oh * ow];
    let src = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                y.data_mut()[o] = src[best];
                arg[o] = best;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2x2_backward<T: Float>(
    input_shape: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[idx] = dx.data()[idx] + g;
    }
    dx
}

/// Spatial mean per `(b, c)`, shape `(b, c, 1, 1)`.
pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h * w == 0 {
        return Err(shape_err("global_avg_pool", "empty spatial extent"));
    }
    let n = T::lit((h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() / n)
        .collect();
    Tensor::from_vec(&[b, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Float>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let p: usize = input_shape[2..].iter().product();
    let n = T::lit(p as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(p).zip(dy.data()) {
        chunk.fill(g / n);
    }
    dx
}

/// Dispatches on [`PoolKind`], discarding the argmax bookkeeping.
pub fn pool<T: Float>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    match kind {
        PoolKind::Max2x2 => Ok(max_pool2x2(x)?.0),
        PoolKind::GlobalAverage => global_avg_pool(x),
    }
}
