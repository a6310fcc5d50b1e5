//! Parameterized layers. Each holds the [`ParamId`]s of its tensors and records
//! its forward pass on a [`Tape`].

use crate::error::Result;
use crate::float::Float;
use crate::nn::ConvSpec;
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Convolution with fan-in scaled uniform initialization.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let shape = spec.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.learnable(&format!("{name}.weight"), &shape, Init::Uniform(bound))?;
        let bias = if spec.has_bias {
            Some(store.learnable(
                &format!("{name}.bias"),
                &[spec.out_channels],
                Init::Uniform(bound),
            )?)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, &self.spec)
    }

    /// Multiply-accumulates per batch element on an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.spec.macs(h, w)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.learnable(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: store.learnable(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(
                &format!("{name}.running_mean"),
                &[channels],
                Init::Zeros,
            )?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            eps,
        })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.batch_norm(
            x,
            g,
            b,
            store,
            self.running_mean,
            self.running_var,
            self.eps,
        )
    }
}

/// Layer norm over channels at each spatial position.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.learnable(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: store.learnable(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Convolution, batch norm, ReLU. The convolution carries no bias.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        eps: f64,
    ) -> Result<Self> {
        let spec = ConvSpec::new(in_channels, out_channels, kernel).with_bias(false);
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), spec)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels, eps)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y)?;
        Ok(tape.relu(y))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}
