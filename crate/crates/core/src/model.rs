//! The full network: encoder, skip-path transformer, decoder and heads.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::decoder::{Decoder, Heads, Saliency};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::ParamStore;
use crate::sctb::{FeatureMapper, PatchEmbed, Sctb};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SCTransNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub embed: PatchEmbed,
    pub blocks: Vec<Sctb>,
    pub mappers: Vec<FeatureMapper>,
    pub decoder: Decoder,
    pub heads: Heads,
}

/// Every intermediate a caller might inspect after [`SCTransNet::forward`].
pub struct ForwardOutput {
    pub encoded: [Var; 5],
    pub embedded: [Var; 4],
    pub transformed: [Var; 4],
    /// Attention matrices per block, per level.
    pub attention: Vec<[Var; 4]>,
    /// Skip features after the residual merge with the encoder.
    pub merged: [Var; 4],
    pub decoded: [Var; 5],
    pub saliency: Saliency,
}

/// Parameter and FLOP totals of one top-level component.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

impl SCTransNet {
    /// Registers all parameters in `store` in canonical order.
    pub fn new<T: Float>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(store, config)?;
        let embed = PatchEmbed::new(store, config)?;
        let blocks = (0..config.num_sctb)
            .map(|b| Sctb::new(store, &format!("sctb{}", b + 1), config))
            .collect::<Result<_>>()?;
        let mappers = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| FeatureMapper::new(store, &format!("fm{}", i + 1), c, config))
            .collect::<Result<_>>()?;
        let decoder = Decoder::new(store, config)?;
        let d = config.decoder_channels;
        let heads = Heads::new(
            store,
            &[d[0], d[1], d[2], d[3], config.bottleneck_channels],
            config.deep_supervision,
        )?;
        Ok(Self {
            config: config.clone(),
            encoder,
            embed,
            blocks,
            mappers,
            decoder,
            heads,
        })
    }

    /// Builds the model with a fresh store seeded from `config.seed`.
    pub fn build<T: Float>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new(config.seed);
        let model = Self::new(config, &mut store)?;
        Ok((model, store))
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Var,
    ) -> Result<ForwardOutput> {
        let (_, _, h, w) = tape.dims4(image)?;
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Precondition(format!(
                "input extents {h}x{w} must be multiples of {m}; pad inputs with data::prepare_eval"
            )));
        }
        let encoded = self.encoder.forward(tape, store, image)?;
        let levels = [encoded[0], encoded[1], encoded[2], encoded[3]];
        let embedded = self.embed.forward(tape, store, &levels)?;
        let mut tokens = embedded;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(tape, store, &tokens)?;
            tokens = out.tokens;
            attention.push(out.attention);
        }
        let mut merged = levels;
        for (i, mapper) in self.mappers.iter().enumerate() {
            merged[i] = mapper.forward(tape, store, tokens[i], levels[i])?;
        }
        let decoded = self.decoder.forward(tape, store, &merged, encoded[4])?;
        let saliency = self.heads.forward(tape, store, &decoded)?;
        Ok(ForwardOutput {
            encoded,
            embedded,
            transformed: tokens,
            attention,
            merged,
            decoded,
            saliency,
        })
    }

    /// Fused saliency map for a `(b, 1, H, W)` batch in evaluation mode.
    pub fn predict<T: Float>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.input(images.clone());
        let out = self.forward(&mut tape, store, x)?;
        Ok(tape.value(out.saliency.fused).clone())
    }

    /// Learnable scalars.
    pub fn count_params<T: Float>(&self, store: &ParamStore<T>) -> usize {
        store.count_learnable()
    }

    /// Multiply-accumulates of one forward pass for a single `h x w` image.
    pub fn count_macs(&self, h: usize, w: usize) -> u64 {
        self.module_macs(h, w).iter().map(|(_, m)| m).sum()
    }

    /// FLOPs as `2 x MACs` over convolutions and matrix products.
    pub fn count_flops(&self, h: usize, w: usize) -> u64 {
        2 * self.count_macs(h, w)
    }

    fn module_macs(&self, h: usize, w: usize) -> Vec<(&'static str, u64)> {
        let (th, tw) = (h / self.config.patch_size, w / self.config.patch_size);
        let fm = self
            .mappers
            .iter()
            .enumerate()
            .map(|(i, m)| m.macs(h >> i, w >> i))
            .sum();
        vec![
            ("encoder", self.encoder.macs(h, w)),
            ("embed", self.embed.macs(h, w)),
            ("sctb", self.blocks.iter().map(|b| b.macs(th, tw)).sum()),
            ("fm", fm),
            ("decoder", self.decoder.macs(h, w)),
            ("heads", self.heads.macs(h, w)),
        ]
    }

    /// Per-component parameter and FLOP counts at input size `h x w`.
    pub fn breakdown<T: Float>(
        &self,
        store: &ParamStore<T>,
        h: usize,
        w: usize,
    ) -> Vec<ModuleCost> {
        self.module_macs(h, w)
            .into_iter()
            .map(|(name, macs)| ModuleCost {
                name: name.to_string(),
                params: store.count_learnable_with_prefix(name),
                flops: 2 * macs,
            })
            .collect()
    }
}
