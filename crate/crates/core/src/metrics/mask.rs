use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// A `{0, 1}` grid stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Any nonzero entry becomes 1.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(
                "mask",
                format!("{} values for a {height}x{width} mask", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn area(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Pixels set in both masks.
    pub fn overlap(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.get(self.height - 1 - y, x)
        })
    }

    /// Converts to a `(1, 1, h, w)` tensor of zeros and ones.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| {
            if self.data[i] != 0 {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Extents of a single-image map: shape `(h, w)` or `(1, .., 1, h, w)`.
pub fn map_extents<T: Float>(map: &Tensor<T>) -> Result<(usize, usize)> {
    let s = map.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(shape_err(
            "binarize",
            format!("expected one image, got shape {s:?}"),
        ));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Pixel is 1 iff its value is strictly greater than `threshold`.
pub fn binarize<T: Float>(map: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    let (h, w) = map_extents(map)?;
    let t = T::lit(threshold);
    Ok(BinaryMask {
        height: h,
        width: w,
        data: map.data().iter().map(|&v| (v > t) as u8).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// A connected set of foreground pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetComponent {
    pub pixels: Vec<(usize, usize)>,
    /// Mean `(y, x)` of the pixel coordinates.
    pub centroid: (f64, f64),
}

impl TargetComponent {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Labels connected components in raster order of their first pixel.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<TargetComponent> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            pixels.push((y, x));
            for &(dy, dx) in connectivity.offsets() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.data[j] != 0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        let sy: usize = pixels.iter().map(|p| p.0).sum();
        let sx: usize = pixels.iter().map(|p| p.1).sum();
        out.push(TargetComponent {
            centroid: (sy as f64 / n, sx as f64 / n),
            pixels,
        });
    }
    out
}
