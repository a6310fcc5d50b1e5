use serde::{Deserialize, Serialize};

use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// tanh approximation.
    Gelu,
    Sigmoid,
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

pub fn sigmoid_scalar<T: Float>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn gelu_scalar<T: Float>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let inner = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

impl Activation {
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => gelu_scalar(x),
            Activation::Sigmoid => sigmoid_scalar(x),
        }
    }

    /// Derivative given the input `x` and output `y = apply(x)`.
    pub fn derivative<T: Float>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => gelu_grad(x),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn activation<T: Float>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Float>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    dy: &Tensor<T>,
    kind: Activation,
) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(dy.data())
        .map(|((&xv, &yv), &g)| g * kind.derivative(xv, yv))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}
