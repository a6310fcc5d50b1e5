//! Dataset layout, preprocessing and augmentation, and synthetic scenes.
//!
//! Layout: `<root>/images/<id>.png`, `<root>/masks/<id>.png` and split files
//! `<root>/img_idx/{train,test}_<name>.txt`, all 8-bit grayscale.

mod dataset;
mod preprocess;
mod synth;

pub use dataset::{
    image_path, load_dataset, load_sample, mask_path, mask_to_gray, read_gray, read_split,
    save_gray, save_sample, split_path, to_gray, write_dataset, Sample,
};
pub use preprocess::{
    crop_top_left, mask_of, normalize_intensity, prepare_eval, prepare_train, reflect_index,
    EvalInput, TrainPair,
};
pub use synth::{synth_generate, synth_sample, SynthSpec};
