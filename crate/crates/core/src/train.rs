//! Optimization loop with cosine-annealed Adam and line-delimited JSON logs.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{prepare_train, Sample};
use crate::decoder::total_loss;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::SCTransNet;
use crate::optim::{cosine_lr, Adam};
use crate::params::ParamStore;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// One optimizer step as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: f64,
}

pub struct Trainer<T: Float> {
    pub model: SCTransNet,
    pub store: ParamStore<T>,
    pub optimizer: Adam<T>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(29);
    }
    h
}

impl<T: Float> Trainer<T> {
    pub fn new(model: SCTransNet, store: ParamStore<T>) -> Self {
        let t = &model.config.train;
        let optimizer = Adam::new(t.beta1, t.beta2, t.adam_eps);
        Self {
            model,
            store,
            optimizer,
        }
    }

    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        let (model, store) = SCTransNet::build(config)?;
        Ok(Self::new(model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Forward, backward, running-statistics update and one Adam update.
    pub fn step(
        &mut self,
        images: &Tensor<T>,
        masks: &Tensor<T>,
        lr: f64,
        epoch: usize,
    ) -> Result<StepRecord> {
        let cfg = &self.model.config;
        let mut tape = Tape::new(Mode::Train);
        let x = tape.input(images.clone());
        let out = self.model.forward(&mut tape, &self.store, x)?;
        let loss = total_loss(&mut tape, &out.saliency, masks, &cfg.loss_weights)?;
        let value = tape.value(loss.total).data()[0].as_f64();
        if !value.is_finite() {
            let origin = tape.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite(format!(
                "{origin} (step {})",
                self.optimizer.steps() + 1
            )));
        }
        let grads = tape.backward(loss.total)?;
        self.store.zero_grads();
        grads.accumulate_into(&mut self.store);
        tape.commit_running_stats(&mut self.store, cfg.train.bn_momentum);
        self.optimizer.step(&mut self.store, lr);
        Ok(StepRecord {
            epoch,
            step: self.optimizer.steps(),
            lr,
            loss: value,
            terms: loss
                .terms
                .iter()
                .map(|(k, v)| (k.clone(), tape.value(*v).data()[0].as_f64()))
                .collect(),
        })
    }

    /// One pass over `data` in a seeded order, batches of augmented crops.
    /// Each step is appended to `log` as a JSON line.
    pub fn run_epoch(
        &mut self,
        data: &[Sample],
        epoch: usize,
        log: &mut dyn Write,
    ) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let cfg = self.model.config.clone();
        let t = &cfg.train;
        let lr = cosine_lr(epoch, t.epochs, t.lr0, t.lr_min);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            cfg.seed,
            epoch as u64,
            0,
        )));
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(t.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut masks = Vec::with_capacity(batch.len());
            for &i in batch {
                let pair = prepare_train::<T>(
                    &data[i],
                    t.crop_size,
                    mix(cfg.seed, epoch as u64, i as u64 + 1),
                    t.augment,
                );
                images.push(pair.image);
                masks.push(pair.mask);
            }
            let rec = self.step(
                &Tensor::stack_batch(&images)?,
                &Tensor::stack_batch(&masks)?,
                lr,
                epoch,
            )?;
            serde_json::to_writer(&mut *log, &rec).map_err(std::io::Error::other)?;
            writeln!(log)?;
            total += rec.loss;
            steps += 1;
        }
        Ok(EpochRecord {
            epoch,
            lr,
            steps,
            mean_loss: total / steps as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_separates_streams() {
        assert_ne!(mix(0, 1, 2), mix(0, 2, 1));
        assert_ne!(mix(0, 0, 1), mix(1, 0, 1));
    }
}
