use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::Sample;
use crate::error::Result;
use crate::float::Float;
use crate::metrics::{map_extents, BinaryMask};
use crate::tensor::Tensor;

/// Maps `[0, 1]` intensities to `[-1, 1]`.
pub fn normalize_intensity(v: f32) -> f64 {
    (v as f64 - 0.5) / 0.5
}

/// Reflection without edge repetition (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// A network-ready image/mask pair, each `(1, 1, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Square 2-D transform shared by image and mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Augment {
    top: usize,
    left: usize,
    flip_h: bool,
    flip_v: bool,
    quarter_turns: u8,
}

/// Random `crop x crop` window (reflect-padded first when the sample is
/// smaller), then independent horizontal flip, vertical flip and a multiple of
/// 90 degrees of rotation. Deterministic in `seed`.
pub fn prepare_train<T: Float>(
    sample: &Sample,
    crop: usize,
    seed: u64,
    augment: bool,
) -> TrainPair<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ph, pw) = (sample.height.max(crop), sample.width.max(crop));
    let top = rng.random_range(0..=ph - crop);
    let left = rng.random_range(0..=pw - crop);
    let aug = if augment {
        Augment {
            top,
            left,
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    } else {
        Augment {
            top,
            left,
            flip_h: false,
            flip_v: false,
            quarter_turns: 0,
        }
    };
    let source = |y: usize, x: usize| -> usize {
        let (mut y, mut x) = (y, x);
        for _ in 0..aug.quarter_turns {
            (y, x) = (x, crop - 1 - y);
        }
        if aug.flip_v {
            y = crop - 1 - y;
        }
        if aug.flip_h {
            x = crop - 1 - x;
        }
        let sy = reflect_index((aug.top + y) as isize, sample.height);
        let sx = reflect_index((aug.left + x) as isize, sample.width);
        sy * sample.width + sx
    };
    let mask_data = sample.mask.data();
    let image = Tensor::from_fn(&[1, 1, crop, crop], |i| {
        T::lit(normalize_intensity(
            sample.image[source(i / crop, i % crop)],
        ))
    });
    let mask = Tensor::from_fn(&[1, 1, crop, crop], |i| {
        T::lit(mask_data[source(i / crop, i % crop)] as f64)
    });
    TrainPair { image, mask }
}

/// A reflect-padded evaluation input and the extents to crop outputs back to.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalInput<T> {
    pub image: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Float> EvalInput<T> {
    /// Crops a `(1, 1, H', W')` network output back to the original extents.
    pub fn crop_back(&self, map: &Tensor<T>) -> Result<Tensor<T>> {
        crop_top_left(map, self.height, self.width)
    }
}

pub fn crop_top_left<T: Float>(map: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (_, w) = map_extents(map)?;
    let data = map.data();
    Tensor::from_vec(
        &[1, 1, height, width],
        (0..height * width)
            .map(|i| data[(i / width) * w + i % width])
            .collect(),
    )
}

/// Normalizes and reflect-pads right and bottom to the next multiple of `multiple`.
pub fn prepare_eval<T: Float>(sample: &Sample, multiple: usize) -> EvalInput<T> {
    let (h, w) = (sample.height, sample.width);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let image = Tensor::from_fn(&[1, 1, ph, pw], |i| {
        let y = reflect_index((i / pw) as isize, h);
        let x = reflect_index((i % pw) as isize, w);
        T::lit(normalize_intensity(sample.image[y * w + x]))
    });
    EvalInput {
        image,
        height: h,
        width: w,
    }
}

/// Ground truth of a training pair as a mask.
pub fn mask_of<T: Float>(pair: &TrainPair<T>) -> BinaryMask {
    let (h, w) = map_extents(&pair.mask).expect("single image");
    BinaryMask::from_vec(
        h,
        w,
        pair.mask
            .data()
            .iter()
            .map(|&v| (v > T::lit(0.5)) as u8)
            .collect(),
    )
    .expect("extents match")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> Sample {
        let image = (0..h * w).map(|i| (i % 251) as f32 / 255.0).collect();
        let mask = BinaryMask::from_fn(h, w, |y, x| (y * 7 + x * 3) % 11 == 0);
        Sample::new("s", h, w, image, mask).unwrap()
    }

    #[test]
    fn reflection() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(7, 4), 1);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn train_crop_shape_determinism_and_mask_count() {
        let s = sample(40, 36);
        let a: TrainPair<f32> = prepare_train(&s, 32, 9, true);
        assert_eq!(a.image.shape(), &[1, 1, 32, 32]);
        assert_eq!(a, prepare_train(&s, 32, 9, true));
        let s = sample(32, 32);
        for seed in 0..100 {
            let p: TrainPair<f64> = prepare_train(&s, 32, seed, true);
            assert_eq!(mask_of(&p).count(), s.mask.count());
        }
    }

    #[test]
    fn eval_padding_and_crop_back() {
        let s = sample(25, 33);
        let e: EvalInput<f64> = prepare_eval(&s, 16);
        assert_eq!(e.image.shape(), &[1, 1, 32, 48]);
        let back = e.crop_back(&e.image).unwrap();
        assert_eq!(back.shape(), &[1, 1, 25, 33]);
        for (i, &v) in back.data().iter().enumerate() {
            assert_eq!(v, normalize_intensity(s.image[i]));
        }
        let s = sample(32, 16);
        let e: EvalInput<f64> = prepare_eval(&s, 16);
        assert_eq!(e.crop_back(&e.image).unwrap(), e.image);
    }
}
