//! Decoder with channel-gated skip fusion, saliency heads and the composite loss.

use crate::config::{LossWeights, ModelConfig};
use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::layers::{Conv2d, ConvBnRelu};
use crate::nn::ConvSpec;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Channel gate for a skip feature, driven by the pooled upsampled decoder feature:
/// `skip * sigmoid(linear(gap(decoder)))`.
#[derive(Clone, Debug)]
pub struct CcaGate {
    pub linear: Conv2d,
}

impl CcaGate {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        decoder_channels: usize,
        skip_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            linear: Conv2d::new(
                store,
                &format!("{name}.linear"),
                ConvSpec::pointwise(decoder_channels, skip_channels),
            )?,
        })
    }

    pub fn gate<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        decoder: Var,
    ) -> Result<Var> {
        let g = tape.global_avg_pool(decoder)?;
        let g = self.linear.forward(tape, store, g)?;
        Ok(tape.sigmoid(g))
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        decoder: Var,
        skip: Var,
    ) -> Result<Var> {
        let g = self.gate(tape, store, decoder)?;
        tape.mul_channel(skip, g)
    }

    pub fn macs(&self) -> u64 {
        self.linear.macs(1, 1)
    }
}

/// Upsample the deeper feature 2x, gate the skip, concatenate, two CBLs.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub gate: CcaGate,
    pub cbl1: ConvBnRelu,
    pub cbl2: ConvBnRelu,
}

impl DecoderStage {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        deeper_channels: usize,
        skip_channels: usize,
        out_channels: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            gate: CcaGate::new(
                store,
                &format!("{name}.cca"),
                deeper_channels,
                skip_channels,
            )?,
            cbl1: ConvBnRelu::new(
                store,
                &format!("{name}.cbl1"),
                skip_channels + deeper_channels,
                out_channels,
                3,
                eps,
            )?,
            cbl2: ConvBnRelu::new(
                store,
                &format!("{name}.cbl2"),
                out_channels,
                out_channels,
                3,
                eps,
            )?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        deeper: Var,
        skip: Var,
    ) -> Result<Var> {
        let (_, _, h, w) = tape.dims4(skip)?;
        let (_, _, dh, dw) = tape.dims4(deeper)?;
        if (dh * 2, dw * 2) != (h, w) {
            return Err(shape_err(
                "decoder",
                format!("deeper feature {dh}x{dw} is not half of skip {h}x{w}"),
            ));
        }
        let up = tape.resample_bilinear(deeper, h, w)?;
        let gated = self.gate.forward(tape, store, up, skip)?;
        let y = tape.concat_channels(&[gated, up])?;
        let y = self.cbl1.forward(tape, store, y)?;
        self.cbl2.forward(tape, store, y)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.gate.macs() + self.cbl1.macs(h, w) + self.cbl2.macs(h, w)
    }
}

/// Saliency heads. With deep supervision every decoder level has a 1x1 head and
/// the five maps are fused by another 1x1 conv; without it a single head reads
/// the finest level.
#[derive(Clone, Debug)]
pub struct Heads {
    pub levels: Vec<Conv2d>,
    pub fuse: Option<Conv2d>,
}

/// Saliency maps at input resolution. `levels` is empty without deep supervision.
#[derive(Clone, Debug)]
pub struct Saliency {
    pub fused: Var,
    pub levels: Vec<Var>,
}

impl Heads {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        widths: &[usize; 5],
        deep_supervision: bool,
    ) -> Result<Self> {
        if !deep_supervision {
            return Ok(Self {
                levels: vec![Conv2d::new(
                    store,
                    "heads.out",
                    ConvSpec::pointwise(widths[0], 1),
                )?],
                fuse: None,
            });
        }
        let levels = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Conv2d::new(
                    store,
                    &format!("heads.level{}", i + 1),
                    ConvSpec::pointwise(c, 1),
                )
            })
            .collect::<Result<_>>()?;
        let fuse = Some(Conv2d::new(
            store,
            "heads.fuse",
            ConvSpec::pointwise(widths.len(), 1),
        )?);
        Ok(Self { levels, fuse })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        decoded: &[Var; 5],
    ) -> Result<Saliency> {
        let (_, _, h, w) = tape.dims4(decoded[0])?;
        let Some(fuse) = &self.fuse else {
            let m = self.levels[0].forward(tape, store, decoded[0])?;
            return Ok(Saliency {
                fused: tape.sigmoid(m),
                levels: Vec::new(),
            });
        };
        let mut maps = Vec::with_capacity(5);
        for (head, &f) in self.levels.iter().zip(decoded) {
            let m = head.forward(tape, store, f)?;
            let m = tape.sigmoid(m);
            maps.push(tape.resample_bilinear(m, h, w)?);
        }
        let cat = tape.concat_channels(&maps)?;
        let fused = fuse.forward(tape, store, cat)?;
        Ok(Saliency {
            fused: tape.sigmoid(fused),
            levels: maps,
        })
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let levels: u64 = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, c)| c.macs(h >> i, w >> i))
            .sum();
        levels + self.fuse.as_ref().map_or(0, |f| f.macs(h, w))
    }
}

/// The scalar training loss and its individually weighted terms.
pub struct Loss {
    pub total: Var,
    pub terms: Vec<(String, Var)>,
}

/// Weighted sum of per-map BCE terms. Level terms are included only when
/// `maps.levels` is nonempty.
pub fn total_loss<T: Float>(
    tape: &mut Tape<T>,
    maps: &Saliency,
    target: &Tensor<T>,
    weights: &LossWeights,
) -> Result<Loss> {
    let mut terms = Vec::new();
    let mut weighted = Vec::new();
    for (i, &m) in maps.levels.iter().enumerate() {
        let l = tape.bce(m, target)?;
        terms.push((format!("level{}", i + 1), l));
        weighted.push((l, T::lit(weights.levels[i])));
    }
    let l = tape.bce(maps.fused, target)?;
    terms.push(("fused".to_string(), l));
    weighted.push((l, T::lit(weights.fused)));
    let total = tape.weighted_sum(&weighted)?;
    Ok(Loss { total, terms })
}

/// Decoder stages for levels 1..4 (index 0 is the finest).
#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
}

impl Decoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let deeper = if i == 3 {
                cfg.bottleneck_channels
            } else {
                cfg.decoder_channels[i + 1]
            };
            stages.push(DecoderStage::new(
                store,
                &format!("decoder.stage{}", i + 1),
                deeper,
                cfg.channels[i],
                cfg.decoder_channels[i],
                cfg.norm_eps,
            )?);
        }
        Ok(Self { stages })
    }

    /// Returns `F1..F5` where `F5` is the bottleneck itself.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        skips: &[Var; 4],
        bottleneck: Var,
    ) -> Result<[Var; 5]> {
        let mut out = [bottleneck; 5];
        for i in (0..4).rev() {
            out[i] = self.stages[i].forward(tape, store, out[i + 1], skips[i])?;
        }
        Ok(out)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.macs(h >> i, w >> i))
            .sum()
    }
}
