//! Infrared small target evaluation: pixel metrics (IoU, nIoU, F-measure),
//! target metrics (Pd, Fa) by centroid matching, ROC sweeps and truncated AUC.

mod accumulator;
mod mask;
mod report;
mod roc;

pub use accumulator::{
    match_targets, EvalAccumulator, Metrics, TargetMatch, MATCH_DISTANCE, ROC_LEVELS,
};
pub use mask::{
    binarize, connected_components, map_extents, BinaryMask, Connectivity, TargetComponent,
};
pub use report::{roc_to_csv, EvalReport};
pub use roc::{auc_truncated, roc_auc, RocPoint};
