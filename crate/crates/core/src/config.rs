use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// Weights of the six loss terms: one per supervision level, one for the fused map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub levels: [f64; 5],
    pub fused: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            levels: [1.0; 5],
            fused: 1.0,
        }
    }
}

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr0: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop_size: usize,
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_min: 1e-5,
            batch_size: 16,
            epochs: 1000,
            crop_size: 256,
            augment: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.1,
        }
    }
}

/// Every architectural and training hyperparameter, including ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Encoder widths `C_1..C_4`.
    pub channels: [usize; 4],
    /// Width of the fifth encoder stage that feeds the deepest decoder level.
    pub bottleneck_channels: usize,
    /// Output widths of decoder stages 1..4.
    pub decoder_channels: [usize; 4],
    /// Patch size of the first level; level `i` uses `patch_size / 2^(i-1)`.
    pub patch_size: usize,
    pub num_sctb: usize,
    /// CFN channel expansion factor.
    pub expansion: f64,
    /// Kernel of the convolution that maps transformer outputs back to encoder scale.
    pub fm_kernel: usize,
    pub ffn_activation: Activation,
    pub deep_supervision: bool,
    pub positional_encoding: bool,
    /// Training resolution the learned position tensors are sized for.
    pub pe_reference_size: usize,
    pub num_heads: usize,
    pub spatial_embedding: bool,
    /// Global-spatial/local-channel gate in the CFN.
    pub gslc: bool,
    /// Squash the CFN channel gate with a sigmoid.
    pub gslc_sigmoid: bool,
    pub norm_eps: f64,
    pub loss_weights: LossWeights,
    pub threshold: f64,
    pub seed: u64,
    pub train: TrainHyper,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: [32, 64, 128, 256],
            bottleneck_channels: 512,
            decoder_channels: [32, 32, 64, 128],
            patch_size: 16,
            num_sctb: 4,
            expansion: 2.66,
            fm_kernel: 1,
            ffn_activation: Activation::Gelu,
            deep_supervision: true,
            positional_encoding: false,
            pe_reference_size: 256,
            num_heads: 1,
            spatial_embedding: true,
            gslc: true,
            gslc_sigmoid: true,
            norm_eps: 1e-5,
            loss_weights: LossWeights::default(),
            threshold: 0.5,
            seed: 0,
            train: TrainHyper::default(),
        }
    }
}

impl ModelConfig {
    /// Sum of the four encoder widths (the concatenated token width).
    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    /// CFN hidden width for a level: `floor(expansion * c)` rounded down to even.
    pub fn expanded_channels(&self, c: usize) -> usize {
        ((self.expansion * c as f64).floor() as usize) / 2 * 2
    }

    /// Input extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        self.patch_size.max(16)
    }

    pub fn patch_for_level(&self, level: usize) -> usize {
        self.patch_size >> level
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.in_channels == 0 {
            return fail("in_channels", "must be positive".into());
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return fail(
                "channels",
                format!(
                    "{:?} must be strictly increasing and positive",
                    self.channels
                ),
            );
        }
        if self.bottleneck_channels == 0 || self.decoder_channels.contains(&0) {
            return fail("decoder_channels", "widths must be positive".into());
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < 8 {
            return fail(
                "patch_size",
                format!("{} must be a power of two >= 8", self.patch_size),
            );
        }
        if !(self.expansion > 0.0) || self.channels.iter().any(|&c| self.expanded_channels(c) < 2) {
            return fail(
                "expansion",
                format!("{} leaves a CFN branch empty", self.expansion),
            );
        }
        if self.fm_kernel.is_multiple_of(2) {
            return fail("fm_kernel", format!("{} must be odd", self.fm_kernel));
        }
        if self.num_heads == 0 {
            return fail("num_heads", "must be positive".into());
        }
        if self.num_heads > 1 {
            let all = self.channels.iter().copied().chain([self.total_channels()]);
            if let Some(c) = all.into_iter().find(|c| c % self.num_heads != 0) {
                return fail(
                    "num_heads",
                    format!("{} does not divide width {c}", self.num_heads),
                );
            }
        }
        if self.positional_encoding
            && !self
                .pe_reference_size
                .is_multiple_of(self.spatial_multiple())
        {
            return fail(
                "pe_reference_size",
                format!("must be a multiple of {}", self.spatial_multiple()),
            );
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps", "must be > 0".into());
        }
        if self
            .loss_weights
            .levels
            .iter()
            .chain([&self.loss_weights.fused])
            .any(|w| !(*w >= 0.0))
        {
            return fail("loss_weights", "must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail("threshold", format!("{} outside [0, 1]", self.threshold));
        }
        let t = &self.train;
        if !(t.lr0 > 0.0) || !(t.lr_min >= 0.0) || t.lr_min > t.lr0 {
            return fail(
                "train.lr0/lr_min",
                format!("need 0 <= lr_min <= lr0, got {} / {}", t.lr_min, t.lr0),
            );
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return fail("train.batch_size/epochs", "must be positive".into());
        }
        if t.crop_size == 0 || !t.crop_size.is_multiple_of(self.spatial_multiple()) {
            return fail(
                "train.crop_size",
                format!(
                    "{} must be a positive multiple of {}",
                    t.crop_size,
                    self.spatial_multiple()
                ),
            );
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return fail("train.beta1/beta2/adam_eps", "out of range".into());
        }
        if !(0.0..=1.0).contains(&t.bn_momentum) {
            return fail("train.bn_momentum", "outside [0, 1]".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.total_channels(), 480);
        assert_eq!(cfg.expanded_channels(32), 84);
        assert_eq!(cfg.expanded_channels(64), 170);
        assert_eq!(cfg.expanded_channels(128), 340);
        assert_eq!(cfg.expanded_channels(256), 680);
        assert_eq!(
            (0..4).map(|l| cfg.patch_for_level(l)).collect::<Vec<_>>(),
            vec![16, 8, 4, 2]
        );
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let cfg = ModelConfig {
            num_heads: 8,
            gslc: false,
            ..ModelConfig::default()
        };
        let back = ModelConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(ModelConfig::from_toml("bogus = 1").is_err());
        let partial = ModelConfig::from_toml("num_sctb = 2\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.num_sctb, 2);
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.lr0, 1e-3);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let bad = ModelConfig {
            channels: [32, 32, 64, 128],
            ..ModelConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("channels"));
        let bad = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("num_heads"));
    }
}
