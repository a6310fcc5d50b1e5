//! Dataset evaluation, single pass or sharded across threads.

use crate::data::{prepare_eval, Sample};
use crate::error::Result;
use crate::float::Float;
use crate::metrics::{Connectivity, EvalAccumulator};
use crate::model::SCTransNet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Saliency map of one sample at its original extents, shape `(1, 1, h, w)`.
pub fn predict_sample<T: Float>(
    model: &SCTransNet,
    store: &ParamStore<T>,
    sample: &Sample,
) -> Result<Tensor<T>> {
    let input = prepare_eval::<T>(sample, model.config.spatial_multiple());
    let map = model.predict(store, &input.image)?;
    input.crop_back(&map)
}

/// Accumulates metrics over `samples`, keyed by `first_key + index`.
pub fn evaluate_samples<T: Float>(
    model: &SCTransNet,
    store: &ParamStore<T>,
    samples: &[Sample],
    first_key: u64,
    connectivity: Connectivity,
) -> Result<EvalAccumulator> {
    let mut acc = EvalAccumulator::new(connectivity);
    for (i, s) in samples.iter().enumerate() {
        let map = predict_sample(model, store, s)?;
        acc.add_saliency(first_key + i as u64, &map, &s.mask, model.config.threshold)?;
    }
    Ok(acc)
}

/// Splits `samples` into `shards` contiguous parts evaluated on separate threads,
/// then merges. Results equal [`evaluate_samples`] bitwise.
pub fn evaluate_sharded<T: Float>(
    model: &SCTransNet,
    store: &ParamStore<T>,
    samples: &[Sample],
    shards: usize,
    connectivity: Connectivity,
) -> Result<EvalAccumulator> {
    let per = samples.len().div_ceil(shards.max(1)).max(1);
    let parts: Vec<Result<EvalAccumulator>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(per)
            .enumerate()
            .map(|(k, chunk)| {
                s.spawn(move || {
                    evaluate_samples(model, store, chunk, (k * per) as u64, connectivity)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut acc = EvalAccumulator::new(connectivity);
    for p in parts {
        acc = acc.merge(&p?);
    }
    Ok(acc)
}
