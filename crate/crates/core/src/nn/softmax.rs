use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Softmax over the last axis, with max subtraction.
pub fn softmax_lastdim<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err("softmax_lastdim", "scalar input"))?;
    if n == 0 {
        return Err(shape_err("softmax_lastdim", "empty last axis"));
    }
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    Ok(y)
}

/// `dx = y * (dy - sum(dy * y))` row-wise.
pub fn softmax_lastdim_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().expect("nonscalar");
    let mut dx = dy.clone();
    for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let dot: T = drow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
        for (d, &p) in drow.iter_mut().zip(yrow) {
            *d = p * (*d - dot);
        }
    }
    dx
}
