//! The on-disk run configuration: model, data location, outputs and
//! command options in one TOML file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sctransnet::data::SynthSpec;
use sctransnet::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `images/`, `masks/` and `img_idx/`.
    pub root: Option<PathBuf>,
    /// Split files are `img_idx/train_<name>.txt` and `img_idx/test_<name>.txt`.
    pub name: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            name: "dataset".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Write `checkpoints/epoch_NNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Validate (and possibly update `best.ckpt`) every this many epochs.
    pub validate_every: usize,
    /// Evaluation worker threads.
    pub eval_shards: usize,
    /// Input extents used by `analyze`.
    pub analyze_height: usize,
    pub analyze_width: usize,
    /// Test-split size written by `synth` in addition to `synth.count` training images.
    pub synth_test_count: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            checkpoint_every: 10,
            validate_every: 1,
            eval_shards: 1,
            analyze_height: 256,
            analyze_width: 256,
            synth_test_count: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory.
    pub out: Option<PathBuf>,
    /// Checkpoint read by `eval` and `infer`.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub run: RunOptions,
    pub synth: SynthSpec,
}

/// Values given on the command line; each one replaces the file's value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub epochs: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let rc: Self = toml::from_str(text)?;
        Ok(rc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Reads `path`, or starts from defaults when none is given. The flag is
    /// true when the file has a `[model]` table.
    pub fn load(path: Option<&Path>) -> Result<(Self, bool)> {
        match path {
            None => Ok((Self::default(), false)),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let rc = Self::from_toml(&text)
                    .with_context(|| format!("invalid config {}", p.display()))?;
                let table: toml::Table = toml::from_str(&text)?;
                Ok((rc, table.contains_key("model")))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.model.seed = seed;
            self.synth.seed = seed;
        }
        if let Some(t) = o.threshold {
            self.model.threshold = t;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(data) = &o.data {
            self.data.root = Some(data.clone());
        }
        if let Some(ckpt) = &o.checkpoint {
            self.checkpoint = Some(ckpt.clone());
        }
        if let Some(e) = o.epochs {
            self.model.train.epochs = e;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("invalid [model] section")?;
        self.synth.validate().context("invalid [synth] section")?;
        anyhow::ensure!(
            self.run.validate_every > 0,
            "run.validate_every must be positive"
        );
        anyhow::ensure!(self.run.eval_shards > 0, "run.eval_shards must be positive");
        Ok(())
    }
}
