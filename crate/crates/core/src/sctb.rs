//! Skip-path transformer: patch embedding, spatial-channel cross transformer
//! blocks and the mapping back to encoder resolution.
//!
//! Every level is embedded to the same token grid (`H/P x W/P`). Inside a block
//! each level's channels act as queries over the concatenation of all levels'
//! channels (cross attention along the channel axis), followed by a multi-scale
//! depthwise feed-forward network with a channel gate.

use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::layers::{BatchNorm2d, Conv2d, LayerNorm2d};
use crate::nn::{Activation, ConvSpec};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Per-level patchifying convolution with kernel = stride, plus optional learned
/// position tensors.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub convs: Vec<Conv2d>,
    pub positions: Vec<ParamId>,
}

impl PatchEmbed {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut positions = Vec::new();
        let grid = cfg.pe_reference_size / cfg.patch_size;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let spec = ConvSpec::patchify(c, c, cfg.patch_for_level(i));
            convs.push(Conv2d::new(store, &format!("embed.level{}", i + 1), spec)?);
            if cfg.positional_encoding {
                positions.push(store.learnable(
                    &format!("embed.position{}", i + 1),
                    &[1, c, grid, grid],
                    Init::Uniform(0.02),
                )?);
            }
        }
        Ok(Self { convs, positions })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        levels: &[Var; 4],
    ) -> Result<[Var; 4]> {
        let mut out = Vec::with_capacity(4);
        for (i, (&e, conv)) in levels.iter().zip(&self.convs).enumerate() {
            let mut t = conv.forward(tape, store, e)?;
            if let Some(&pos) = self.positions.get(i) {
                let (_, _, h, w) = tape.dims4(t)?;
                let p = tape.param(store, pos);
                let p = tape.resample_bilinear(p, h, w)?;
                t = tape.add(t, p)?;
            }
            out.push(t);
        }
        let grid = tape.shape(out[0])[2..].to_vec();
        if out.iter().any(|&t| tape.shape(t)[2..] != grid[..]) {
            return Err(shape_err(
                "patch_embed",
                "levels do not land on one token grid",
            ));
        }
        Ok(out.try_into().expect("four levels"))
    }

    /// Per-batch-element MACs given the encoder input extents.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.convs
            .iter()
            .enumerate()
            .map(|(i, c)| c.macs(h >> i, w >> i))
            .sum()
    }
}

/// Pointwise projection optionally followed by a 3x3 depthwise convolution.
#[derive(Clone, Debug)]
pub struct Projection {
    pub pointwise: Conv2d,
    pub depthwise: Option<Conv2d>,
}

impl Projection {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        spatial: bool,
    ) -> Result<Self> {
        let pointwise = Conv2d::new(
            store,
            &format!("{name}.pointwise"),
            ConvSpec::pointwise(in_channels, out_channels).with_bias(false),
        )?;
        let depthwise = if spatial {
            Some(Conv2d::new(
                store,
                &format!("{name}.depthwise"),
                ConvSpec::depthwise(out_channels, 3).with_bias(false),
            )?)
        } else {
            None
        };
        Ok(Self {
            pointwise,
            depthwise,
        })
    }

    fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.pointwise.forward(tape, store, x)?;
        match &self.depthwise {
            Some(dw) => dw.forward(tape, store, y),
            None => Ok(y),
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.pointwise.macs(h, w) + self.depthwise.as_ref().map_or(0, |d| d.macs(h, w))
    }
}

/// Channel cross attention with spatial embedding.
#[derive(Clone, Debug)]
pub struct Ssca {
    pub channels: [usize; 4],
    pub total: usize,
    pub heads: usize,
    pub eps: f64,
    pub queries: Vec<Projection>,
    pub key: Projection,
    pub value: Projection,
    pub outputs: Vec<Conv2d>,
}

/// Outputs of [`Ssca::forward`]: the attended features and the attention
/// matrices, `(b * heads, C_i / heads, C_total / heads)` per level.
pub struct SscaOutput {
    pub features: [Var; 4],
    pub attention: [Var; 4],
}

impl Ssca {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let total = cfg.total_channels();
        let se = cfg.spatial_embedding;
        let mut queries = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            queries.push(Projection::new(
                store,
                &format!("{name}.query{}", i + 1),
                c,
                c,
                se,
            )?);
        }
        let key = Projection::new(store, &format!("{name}.key"), total, total, se)?;
        let value = Projection::new(store, &format!("{name}.value"), total, total, se)?;
        let mut outputs = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            outputs.push(Conv2d::new(
                store,
                &format!("{name}.out{}", i + 1),
                ConvSpec::pointwise(c, c).with_bias(false),
            )?);
        }
        Ok(Self {
            channels: cfg.channels,
            total,
            heads: cfg.num_heads,
            eps: cfg.norm_eps,
            queries,
            key,
            value,
            outputs,
        })
    }

    /// `levels` are the layer-normed per-level tokens, `all` the layer-normed
    /// concatenation.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        levels: &[Var; 4],
        all: Var,
    ) -> Result<SscaOutput> {
        let (b, _, h, w) = tape.dims4(all)?;
        let n = h * w;
        let heads = self.heads;
        let kc = self.total / heads;
        let k = self.key.forward(tape, store, all)?;
        let k = tape.reshape(k, &[b * heads, kc, n])?;
        let v = self.value.forward(tape, store, all)?;
        let v = tape.reshape(v, &[b * heads, kc, n])?;
        let temperature = T::lit(1.0 / (self.total as f64).sqrt());
        let mut features = Vec::with_capacity(4);
        let mut attention = Vec::with_capacity(4);
        for (i, &x) in levels.iter().enumerate() {
            let c = self.channels[i];
            if tape.shape(x) != [b, c, h, w] {
                return Err(shape_err(
                    "ssca",
                    format!(
                        "level {} has shape {:?}, expected {:?}",
                        i + 1,
                        tape.shape(x),
                        [b, c, h, w]
                    ),
                ));
            }
            let qc = c / heads;
            let q = self.queries[i].forward(tape, store, x)?;
            let q = tape.reshape(q, &[b * heads, qc, n])?;
            let logits = tape.matmul(q, false, k, true)?;
            let logits = tape.scale(logits, temperature);
            let logits = tape.reshape(logits, &[b, heads, qc, kc])?;
            let logits = tape.instance_norm(logits, self.eps)?;
            let logits = tape.reshape(logits, &[b * heads, qc, kc])?;
            let attn = tape.softmax_lastdim(logits)?;
            let ctx = tape.matmul(attn, false, v, false)?;
            let ctx = tape.reshape(ctx, &[b, c, h, w])?;
            features.push(self.outputs[i].forward(tape, store, ctx)?);
            attention.push(attn);
        }
        Ok(SscaOutput {
            features: features.try_into().expect("four levels"),
            attention: attention.try_into().expect("four levels"),
        })
    }

    /// MACs per batch element on an `h x w` token grid.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let n = (h * w) as u64;
        let per_level: u64 = self
            .channels
            .iter()
            .zip(self.queries.iter().zip(&self.outputs))
            .map(|(&c, (q, o))| {
                let products = 2 * (c as u64) * (self.total as u64) * n / self.heads as u64;
                q.macs(h, w) + o.macs(h, w) + products
            })
            .sum();
        per_level + self.key.macs(h, w) + self.value.macs(h, w)
    }
}

/// Feed-forward network: expand, split into 3x3 and 5x5 depthwise branches,
/// contract, then gate channels by a 1-D convolution over pooled channels.
#[derive(Clone, Debug)]
pub struct Cfn {
    pub channels: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub squash_gate: bool,
    pub norm: LayerNorm2d,
    pub expand: Conv2d,
    pub local3: Conv2d,
    pub local5: Conv2d,
    pub contract: Conv2d,
    pub gate: Option<ParamId>,
}

impl Cfn {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let hidden = cfg.expanded_channels(channels);
        let half = hidden / 2;
        let conv = |store: &mut ParamStore<T>, suffix: &str, spec: ConvSpec| {
            Conv2d::new(store, &format!("{name}.{suffix}"), spec.with_bias(false))
        };
        let norm = LayerNorm2d::new(store, &format!("{name}.norm"), channels, cfg.norm_eps)?;
        let expand = conv(store, "expand", ConvSpec::pointwise(channels, hidden))?;
        let local3 = conv(store, "local3", ConvSpec::depthwise(half, 3))?;
        let local5 = conv(store, "local5", ConvSpec::depthwise(half, 5))?;
        let contract = conv(store, "contract", ConvSpec::pointwise(hidden, channels))?;
        let gate = if cfg.gslc {
            Some(store.learnable(
                &format!("{name}.gate"),
                &[3],
                Init::Uniform(1.0 / 3f64.sqrt()),
            )?)
        } else {
            None
        };
        Ok(Self {
            channels,
            hidden,
            activation: cfg.ffn_activation,
            squash_gate: cfg.gslc_sigmoid,
            norm,
            expand,
            local3,
            local5,
            contract,
            gate,
        })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let half = self.hidden / 2;
        let y = self.norm.forward(tape, store, x)?;
        let y = self.expand.forward(tape, store, y)?;
        let a = tape.slice_channels(y, 0, half)?;
        let b = tape.slice_channels(y, half, half)?;
        let a = self.local3.forward(tape, store, a)?;
        let a = tape.activation(a, self.activation);
        let b = self.local5.forward(tape, store, b)?;
        let b = tape.activation(b, self.activation);
        let y = tape.concat_channels(&[a, b])?;
        let mut y = self.contract.forward(tape, store, y)?;
        if let Some(gate) = self.gate {
            let k = tape.param(store, gate);
            let g = tape.global_avg_pool(y)?;
            let g = tape.conv1d_channel(g, k)?;
            let g = if self.squash_gate { tape.sigmoid(g) } else { g };
            y = tape.mul_channel(y, g)?;
        }
        tape.add(y, x)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.expand.macs(h, w)
            + self.local3.macs(h, w)
            + self.local5.macs(h, w)
            + self.contract.macs(h, w)
            + if self.gate.is_some() {
                3 * self.channels as u64
            } else {
                0
            }
    }
}

/// One spatial-channel cross transformer block over all four levels.
#[derive(Clone, Debug)]
pub struct Sctb {
    pub norms: Vec<LayerNorm2d>,
    pub norm_all: LayerNorm2d,
    pub attention: Ssca,
    pub ffns: Vec<Cfn>,
}

pub struct SctbOutput {
    pub tokens: [Var; 4],
    pub attention: [Var; 4],
}

impl Sctb {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut norms = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            norms.push(LayerNorm2d::new(
                store,
                &format!("{name}.norm{}", i + 1),
                c,
                cfg.norm_eps,
            )?);
        }
        let norm_all = LayerNorm2d::new(
            store,
            &format!("{name}.norm_all"),
            cfg.total_channels(),
            cfg.norm_eps,
        )?;
        let attention = Ssca::new(store, &format!("{name}.ssca"), cfg)?;
        let mut ffns = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            ffns.push(Cfn::new(store, &format!("{name}.cfn{}", i + 1), c, cfg)?);
        }
        Ok(Self {
            norms,
            norm_all,
            attention,
            ffns,
        })
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: &[Var; 4],
    ) -> Result<SctbOutput> {
        let mut normed = Vec::with_capacity(4);
        for (norm, &t) in self.norms.iter().zip(tokens) {
            normed.push(norm.forward(tape, store, t)?);
        }
        let cat = tape.concat_channels(tokens)?;
        let all = self.norm_all.forward(tape, store, cat)?;
        let normed: [Var; 4] = normed.try_into().expect("four levels");
        let attended = self.attention.forward(tape, store, &normed, all)?;
        let mut out = Vec::with_capacity(4);
        for ((ffn, &ca), &t) in self.ffns.iter().zip(&attended.features).zip(tokens) {
            let p = tape.add(ca, t)?;
            out.push(ffn.forward(tape, store, p)?);
        }
        Ok(SctbOutput {
            tokens: out.try_into().expect("four levels"),
            attention: attended.attention,
        })
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.attention.macs(h, w) + self.ffns.iter().map(|f| f.macs(h, w)).sum::<u64>()
    }
}

/// Upsamples transformer output to the encoder scale, conv-BN-ReLU, then adds
/// the encoder feature.
#[derive(Clone, Debug)]
pub struct FeatureMapper {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl FeatureMapper {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                ConvSpec::new(channels, channels, cfg.fm_kernel).with_bias(false),
            )?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels, cfg.norm_eps)?,
        })
    }

    /// Returns `encoded + FM(tokens)`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        encoded: Var,
    ) -> Result<Var> {
        let (_, _, h, w) = tape.dims4(encoded)?;
        let y = tape.resample_bilinear(tokens, h, w)?;
        let y = self.conv.forward(tape, store, y)?;
        let y = self.bn.forward(tape, store, y)?;
        let y = tape.relu(y);
        tape.add(encoded, y)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mode;
    use crate::tensor::Tensor;

    fn tokens(tape: &mut Tape<f64>, cfg: &ModelConfig, side: usize) -> [Var; 4] {
        let v: Vec<Var> = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                tape.input(Tensor::from_fn(&[1, c, side, side], |j| {
                    ((j * (i + 3)) as f64 * 0.37).sin()
                }))
            })
            .collect();
        v.try_into().unwrap()
    }

    #[test]
    fn block_preserves_shapes_and_attention_rows_sum_to_one() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::<f64>::new(5);
        let block = Sctb::new(&mut store, "sctb1", &cfg).unwrap();
        let mut tape = Tape::new(Mode::Train);
        let x = tokens(&mut tape, &cfg, 2);
        let out = block.forward(&mut tape, &store, &x).unwrap();
        for (i, &xi) in x.iter().enumerate() {
            assert_eq!(tape.shape(out.tokens[i]), tape.shape(xi));
            let a = tape.value(out.attention[i]);
            assert_eq!(a.shape(), &[1, cfg.channels[i], 480]);
            for row in a.data().chunks(480) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
            }
        }
        assert_eq!(tape.macs(), block.macs(2, 2));
    }

    #[test]
    fn zero_contraction_makes_cfn_an_identity() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::<f32>::new(2);
        let cfn = Cfn::new(&mut store, "cfn", 32, &cfg).unwrap();
        assert_eq!(cfn.hidden, 84);
        store.value_mut(cfn.contract.weight).fill(0.0);
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(Tensor::from_fn(&[1, 32, 3, 3], |i| i as f32 * 0.1 - 4.0));
        let y = cfn.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn patch_embed_lands_on_one_grid() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::<f32>::new(0);
        let embed = PatchEmbed::new(&mut store, &cfg).unwrap();
        let mut tape = Tape::new(Mode::Eval);
        let e: Vec<Var> = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| tape.input(Tensor::zeros(&[1, c, 32 >> i, 32 >> i])))
            .collect();
        let out = embed
            .forward(&mut tape, &store, &e.try_into().unwrap())
            .unwrap();
        for (i, &o) in out.iter().enumerate() {
            assert_eq!(tape.shape(o), &[1, cfg.channels[i], 2, 2]);
        }
    }
}
