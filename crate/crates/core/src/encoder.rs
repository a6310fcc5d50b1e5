//! Convolutional backbone: five residual stages separated by 2x2 max pooling.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::layers::{BatchNorm2d, Conv2d};
use crate::nn::ConvSpec;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Basic residual block: two 3x3 conv-BN pairs, a 1x1 conv-BN projection on the
/// shortcut when the width changes, ReLU after the sum.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        eps: f64,
    ) -> Result<Self> {
        let conv = |store: &mut ParamStore<T>, suffix: &str, cin: usize, k: usize| {
            Conv2d::new(
                store,
                &format!("{name}.{suffix}"),
                ConvSpec::new(cin, out_channels, k).with_bias(false),
            )
        };
        let bn = |store: &mut ParamStore<T>, suffix: &str| {
            BatchNorm2d::new(store, &format!("{name}.{suffix}"), out_channels, eps)
        };
        let conv1 = conv(store, "conv1", in_channels, 3)?;
        let bn1 = bn(store, "bn1")?;
        let conv2 = conv(store, "conv2", out_channels, 3)?;
        let bn2 = bn(store, "bn2")?;
        let shortcut = if in_channels != out_channels {
            Some((
                conv(store, "shortcut.conv", in_channels, 1)?,
                bn(store, "shortcut.bn")?,
            ))
        } else {
            None
        };
        Ok(Self {
            in_channels,
            out_channels,
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.conv1.forward(tape, store, x)?;
        let y = self.bn1.forward(tape, store, y)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, store, y)?;
        let y = self.bn2.forward(tape, store, y)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, store, x)?;
                bn.forward(tape, store, s)?
            }
            None => x,
        };
        let sum = tape.add(y, skip)?;
        Ok(tape.relu(sum))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv1.macs(h, w)
            + self.conv2.macs(h, w)
            + self.shortcut.as_ref().map_or(0, |(c, _)| c.macs(h, w))
    }
}

/// Produces `E1..E4` at scales `1, 1/2, 1/4, 1/8` and the bottleneck `E5` at `1/16`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<ResidualBlock>,
}

impl Encoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(cfg.in_channels)
            .chain(cfg.channels)
            .chain([cfg.bottleneck_channels])
            .collect();
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                ResidualBlock::new(
                    store,
                    &format!("encoder.stage{}", i + 1),
                    w[0],
                    w[1],
                    cfg.norm_eps,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<[Var; 5]> {
        let (_, c, h, w) = tape.dims4(image)?;
        if c != self.stages[0].in_channels {
            return Err(Error::Precondition(format!(
                "image has {c} channels, encoder expects {}",
                self.stages[0].in_channels
            )));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Precondition(format!(
                "input extents {h}x{w} must be positive multiples of 16; pad inputs with data::prepare_eval"
            )));
        }
        let mut out = Vec::with_capacity(self.stages.len());
        let mut x = image;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = tape.max_pool2x2(x)?;
            }
            x = stage.forward(tape, store, x)?;
            out.push(x);
        }
        Ok(out.try_into().expect("five stages"))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.macs(h >> i, w >> i))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mode;
    use crate::tensor::Tensor;

    fn build() -> (Encoder, ParamStore<f32>) {
        let mut store = ParamStore::new(0);
        let enc = Encoder::new(&mut store, &ModelConfig::default()).unwrap();
        (enc, store)
    }

    #[test]
    fn shape_ladder_on_minimal_input() {
        let (enc, store) = build();
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(Tensor::zeros(&[1, 1, 32, 32]));
        let e = enc.forward(&mut tape, &store, x).unwrap();
        let shapes: Vec<_> = e.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 32, 32, 32],
                vec![1, 64, 16, 16],
                vec![1, 128, 8, 8],
                vec![1, 256, 4, 4],
                vec![1, 512, 2, 2]
            ]
        );
        assert!(e.iter().all(|&v| tape.value(v).all_finite()));
        assert_eq!(tape.macs(), enc.macs(32, 32));
    }

    #[test]
    fn indivisible_input_is_a_precondition_error() {
        let (enc, store) = build();
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(Tensor::zeros(&[1, 1, 40, 32]));
        assert!(matches!(
            enc.forward(&mut tape, &store, x),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn projection_only_where_width_changes() {
        let (enc, _) = build();
        assert!(enc.stages.iter().all(|s| s.shortcut.is_some()));
        let mut store = ParamStore::<f32>::new(0);
        let same = ResidualBlock::new(&mut store, "b", 8, 8, 1e-5).unwrap();
        assert!(same.shortcut.is_none());
    }
}
