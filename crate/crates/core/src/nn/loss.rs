use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross entropy between a probability map and a {0,1} target.
pub fn bce<T: Float>(p: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if p.shape() != target.shape() {
        return Err(shape_err(
            "bce",
            format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
        ));
    }
    let (lo, hi) = (T::lit(BCE_CLAMP), T::lit(1.0 - BCE_CLAMP));
    let n = T::lit(p.numel() as f64);
    let total: T = p
        .data()
        .iter()
        .zip(target.data())
        .map(|(&pv, &y)| {
            let q = pv.max(lo).min(hi);
            -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
        })
        .sum();
    Ok(total / n)
}

/// Gradient of [`bce`] with respect to `p` scaled by the upstream scalar `g`.
/// Entries outside the clamp range receive zero gradient.
pub fn bce_backward<T: Float>(p: &Tensor<T>, target: &Tensor<T>, g: T) -> Tensor<T> {
    let (lo, hi) = (T::lit(BCE_CLAMP), T::lit(1.0 - BCE_CLAMP));
    let n = T::lit(p.numel() as f64);
    let data = p
        .data()
        .iter()
        .zip(target.data())
        .map(|(&pv, &y)| {
            if pv < lo || pv > hi {
                T::zero()
            } else {
                g * (pv - y) / (pv * (T::one() - pv)) / n
            }
        })
        .collect();
    Tensor::from_vec(p.shape(), data).expect("same shape")
}
