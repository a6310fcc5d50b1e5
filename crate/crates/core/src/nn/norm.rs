use crate::error::{shape_err, Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per channel, over `(b, y, x)`.
    Batch,
    /// Per `(b, y, x)` position, over channels.
    Layer,
    /// Per `(b, c)`, over spatial positions.
    Instance,
}

/// Index layout of the normalization groups of a `(b, c, h, w)` tensor: each
/// group is `base + i*s1 + j*s2` for `i < n1`, `j < n2`.
struct Groups {
    bases: Vec<usize>,
    n1: usize,
    s1: usize,
    n2: usize,
    s2: usize,
}

impl Groups {
    fn new(kind: NormKind, b: usize, c: usize, p: usize) -> Self {
        match kind {
            NormKind::Layer => Self {
                bases: (0..b)
                    .flat_map(|bi| (0..p).map(move |pi| bi * c * p + pi))
                    .collect(),
                n1: c,
                s1: p,
                n2: 1,
                s2: 0,
            },
            NormKind::Instance => Self {
                bases: (0..b * c).map(|i| i * p).collect(),
                n1: p,
                s1: 1,
                n2: 1,
                s2: 0,
            },
            NormKind::Batch => Self {
                bases: (0..c).map(|ci| ci * p).collect(),
                n1: b,
                s1: c * p,
                n2: p,
                s2: 1,
            },
        }
    }

    fn len(&self) -> usize {
        self.n1 * self.n2
    }

    fn for_each(&self, base: usize, mut f: impl FnMut(usize)) {
        for i in 0..self.n1 {
            let row = base + i * self.s1;
            for j in 0..self.n2 {
                f(row + j * self.s2);
            }
        }
    }
}

/// Normalized values `x̂` plus the per-group statistics needed for the backward pass.
#[derive(Clone, Debug)]
pub struct Normalized<T> {
    pub xhat: Tensor<T>,
    pub mean: Vec<T>,
    /// Biased variance per group.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn layout<T: Float>(x: &Tensor<T>, kind: NormKind, eps: f64) -> Result<Groups> {
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "normalization eps must be > 0, got {eps}"
        )));
    }
    let (b, c, h, w) = x.dims4()?;
    let groups = Groups::new(kind, b, c, h * w);
    if groups.len() == 0 || groups.bases.is_empty() {
        return Err(shape_err(
            "normalize",
            format!(
                "zero-size normalization axis for {kind:?} on {:?}",
                x.shape()
            ),
        ));
    }
    Ok(groups)
}

/// Standardizes `x` per group (mean 0, biased variance 1), without affine.
pub fn standardize<T: Float>(x: &Tensor<T>, kind: NormKind, eps: f64) -> Result<Normalized<T>> {
    let groups = layout(x, kind, eps)?;
    let n = groups.len() as f64;
    let data = x.data();
    let mut xhat = Tensor::zeros(x.shape());
    let mut mean = Vec::with_capacity(groups.bases.len());
    let mut var = Vec::with_capacity(groups.bases.len());
    let mut inv_std = Vec::with_capacity(groups.bases.len());
    for &base in &groups.bases {
        let mut s = 0.0f64;
        groups.for_each(base, |i| s += data[i].as_f64());
        let m = s / n;
        let mut ss = 0.0f64;
        groups.for_each(base, |i| {
            let d = data[i].as_f64() - m;
            ss += d * d;
        });
        let v = ss / n;
        let m_t = T::lit(m);
        let inv = T::lit(1.0 / (v + eps).sqrt());
        let out = xhat.data_mut();
        groups.for_each(base, |i| out[i] = (data[i] - m_t) * inv);
        mean.push(m_t);
        var.push(T::lit(v));
        inv_std.push(inv);
    }
    Ok(Normalized {
        xhat,
        mean,
        var,
        inv_std,
    })
}

/// Backward of [`standardize`]: maps `d x̂` to `d x`.
pub fn standardize_backward<T: Float>(
    norm: &Normalized<T>,
    kind: NormKind,
    dxhat: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = norm.xhat.dims4()?;
    let groups = Groups::new(kind, b, c, h * w);
    let n = T::lit(groups.len() as f64);
    let xh = norm.xhat.data();
    let g = dxhat.data();
    let mut dx = Tensor::zeros(norm.xhat.shape());
    let out = dx.data_mut();
    for (gi, &base) in groups.bases.iter().enumerate() {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        groups.for_each(base, |i| {
            sum_g = sum_g + g[i];
            sum_gx = sum_gx + g[i] * xh[i];
        });
        let mean_g = sum_g / n;
        let mean_gx = sum_gx / n;
        let inv = norm.inv_std[gi];
        groups.for_each(base, |i| out[i] = inv * (g[i] - mean_g - xh[i] * mean_gx));
    }
    Ok(dx)
}

/// Per-channel `y = gamma * x + beta` on a `(b, c, h, w)` map.
pub fn channel_affine<T: Float>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err("channel_affine", "parameter length != channels"));
    }
    let p = h * w;
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(p).enumerate() {
        let ci = i % c;
        chunk
            .iter_mut()
            .for_each(|v| *v = gamma[ci] * *v + beta[ci]);
    }
    Ok(y)
}

/// Gradients of [`channel_affine`]: `(dx, dgamma, dbeta)`.
pub fn channel_affine_backward<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (_, c, h, w) = x.dims4()?;
    let p = h * w;
    let mut dx = dy.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (dchunk, xchunk)) in dx
        .data_mut()
        .chunks_mut(p)
        .zip(x.data().chunks(p))
        .enumerate()
    {
        let ci = i % c;
        for (d, &xv) in dchunk.iter_mut().zip(xchunk) {
            dgamma[ci] = dgamma[ci] + *d * xv;
            dbeta[ci] = dbeta[ci] + *d;
            *d = *d * gamma[ci];
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Running statistics used by batch normalization outside training.
#[derive(Clone, Copy, Debug)]
pub struct RunningStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
}

/// Normalization as a single call: standardize by `kind`, then optionally apply a
/// per-channel affine `(gamma, beta)`.
///
/// For [`NormKind::Batch`], passing `running` selects evaluation mode (fixed
/// statistics); `None` uses the batch statistics.
pub fn normalize<T: Float>(
    x: &Tensor<T>,
    kind: NormKind,
    affine: Option<(&[T], &[T])>,
    eps: f64,
    running: Option<RunningStats<'_, T>>,
) -> Result<Tensor<T>> {
    let xhat = match (kind, running) {
        (NormKind::Batch, Some(stats)) => batch_norm_eval_standardize(x, stats, eps)?.0,
        (_, None) => standardize(x, kind, eps)?.xhat,
        (_, Some(_)) => {
            return Err(Error::Usage(
                "running statistics only apply to batch normalization".into(),
            ))
        }
    };
    match affine {
        Some((gamma, beta)) => channel_affine(&xhat, gamma, beta),
        None => Ok(xhat),
    }
}

/// `(x - running_mean) / sqrt(running_var + eps)` per channel; also returns the
/// per-channel inverse standard deviation.
pub fn batch_norm_eval_standardize<T: Float>(
    x: &Tensor<T>,
    stats: RunningStats<'_, T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "normalization eps must be > 0, got {eps}"
        )));
    }
    let (_, c, h, w) = x.dims4()?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(shape_err(
            "batch_norm",
            "running statistics length != channels",
        ));
    }
    let inv: Vec<T> = stats
        .var
        .iter()
        .map(|&v| T::lit(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let p = h * w;
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(p).enumerate() {
        let ci = i % c;
        chunk
            .iter_mut()
            .for_each(|v| *v = (*v - stats.mean[ci]) * inv[ci]);
    }
    Ok((y, inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let x = Tensor::<f64>::full(&[1, 6, 2, 2], 3.25);
        let y = normalize(&x, NormKind::Layer, None, 1e-5, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_closed_form() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        let eps = 1e-5;
        let n = standardize(&x, NormKind::Instance, eps).unwrap();
        assert_eq!(n.mean[0], 4.0);
        assert_eq!(n.var[0], 5.0);
        let s = (5.0f64 + eps).sqrt();
        for (got, want) in n.xhat.data().iter().zip([-3.0, -1.0, 1.0, 3.0]) {
            assert!((got - want / s).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_has_zero_channel_mean() {
        let x = Tensor::<f64>::from_fn(&[3, 4, 5, 5], |i| ((i * 7919) % 101) as f64 / 13.0 - 2.0);
        let y = normalize(&x, NormKind::Batch, None, 1e-5, None).unwrap();
        for c in 0..4 {
            let mut s = 0.0;
            for b in 0..3 {
                for p in 0..25 {
                    s += y.data()[(b * 4 + c) * 25 + p];
                }
            }
            assert!((s / 75.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn layer_norm_is_idempotent() {
        let x = Tensor::<f64>::from_fn(&[2, 8, 3, 3], |i| (i as f64 * 1.7).cos() * 4.0);
        let once = normalize(&x, NormKind::Layer, None, 1e-5, None).unwrap();
        let twice = normalize(&once, NormKind::Layer, None, 1e-5, None).unwrap();
        assert!(once.max_abs_diff(&twice) <= 1e-4);
    }

    #[test]
    fn rejects_bad_eps_and_empty_axis() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(normalize(&x, NormKind::Layer, None, 0.0, None).is_err());
        let empty = Tensor::<f32>::zeros(&[1, 0, 2, 2]);
        assert!(normalize(&empty, NormKind::Layer, None, 1e-5, None).is_err());
    }
}
