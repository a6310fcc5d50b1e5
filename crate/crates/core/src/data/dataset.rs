use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// A grayscale image in `[0, 1]` with its target mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f32>,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        image: Vec<f32>,
        mask: BinaryMask,
    ) -> Result<Self> {
        if image.len() != height * width || (mask.height(), mask.width()) != (height, width) {
            return Err(Error::Dataset(format!(
                "sample extents disagree: image {} values, mask {}x{}, declared {height}x{width}",
                image.len(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            image,
            mask,
        })
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads any image as 8-bit grayscale.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(image_err(path))?.to_luma8())
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

/// Split file for a dataset name: `<root>/img_idx/{train,test}_<name>.txt`.
pub fn split_path(root: &Path, split: &str, name: &str) -> PathBuf {
    root.join("img_idx").join(format!("{split}_{name}.txt"))
}

/// Ids listed in a split file, one per line, blank lines ignored.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read split file {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.trim_end_matches(".png").to_string())
        .collect())
}

pub fn load_sample(root: &Path, id: &str) -> Result<Sample> {
    let (ip, mp) = (image_path(root, id), mask_path(root, id));
    for p in [&ip, &mp] {
        if !p.is_file() {
            return Err(Error::Dataset(format!(
                "sample `{id}`: missing {}",
                p.display()
            )));
        }
    }
    let img = read_gray(&ip)?;
    let mask = read_gray(&mp)?;
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Dataset(format!(
            "sample `{id}`: image is {:?} but mask is {:?}",
            img.dimensions(),
            mask.dimensions()
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let image = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
    let mask = BinaryMask::from_vec(h, w, mask.pixels().map(|p| (p.0[0] > 127) as u8).collect())?;
    Sample::new(id, h, w, image, mask)
}

/// Loads the samples listed in `split_file`, in order.
pub fn load_dataset(root: &Path, split_file: &Path) -> Result<Vec<Sample>> {
    read_split(split_file)?
        .iter()
        .map(|id| load_sample(root, id))
        .collect()
}

/// Quantizes `[0, 1]` values to 8 bits.
pub fn to_gray(height: usize, width: usize, values: impl Iterator<Item = f64>) -> GrayImage {
    let mut img = GrayImage::new(width as u32, height as u32);
    for (p, v) in img.pixels_mut().zip(values) {
        *p = Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]);
    }
    img
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(image_err(path))
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    to_gray(
        mask.height(),
        mask.width(),
        mask.data().iter().map(|&v| v as f64),
    )
}

/// Writes image and mask PNGs under `root`.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    let img = to_gray(
        sample.height,
        sample.width,
        sample.image.iter().map(|&v| v as f64),
    );
    save_gray(&img, &image_path(root, &sample.id))?;
    save_gray(&mask_to_gray(&sample.mask), &mask_path(root, &sample.id))
}

/// Writes a dataset in the standard layout with `train_<name>.txt` and
/// `test_<name>.txt` split files.
pub fn write_dataset(root: &Path, name: &str, train: &[Sample], test: &[Sample]) -> Result<()> {
    fs::create_dir_all(root.join("img_idx"))?;
    for (split, samples) in [("train", train), ("test", test)] {
        let mut list = String::new();
        for s in samples {
            save_sample(root, s)?;
            list.push_str(&s.id);
            list.push('\n');
        }
        fs::write(split_path(root, split, name), list)?;
    }
    Ok(())
}
