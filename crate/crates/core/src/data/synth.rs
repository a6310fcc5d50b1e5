use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// Parameters of the synthetic infrared scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of targets per image.
    pub targets: (usize, usize),
    /// Range of the Gaussian standard deviation in pixels.
    pub sigma: (f64, f64),
    /// Range of target peak amplitudes.
    pub peak: (f64, f64),
    /// Mean background level.
    pub background: f64,
    /// Amplitude of the smoothed background noise.
    pub clutter: f64,
    /// Box-blur passes applied to the background noise.
    pub smoothing: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 8,
            height: 64,
            width: 64,
            targets: (1, 3),
            sigma: (0.5, 3.0),
            peak: (0.5, 0.9),
            background: 0.25,
            clutter: 0.2,
            smoothing: 3,
            seed: 0,
        }
    }
}

const PLACEMENT_RETRIES: usize = 200;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("extents must be positive");
        }
        if self.targets.0 > self.targets.1 {
            return bad("targets range is reversed");
        }
        if !(self.sigma.0 > 0.0) || self.sigma.0 > self.sigma.1 {
            return bad("sigma range must be positive and ordered");
        }
        if !(self.peak.0 >= 0.0) || self.peak.0 > self.peak.1 {
            return bad("peak range must be nonnegative and ordered");
        }
        Ok(())
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn smoothed_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, passes: usize) -> Vec<f64> {
    let mut field: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    for _ in 0..passes {
        let prev = field.clone();
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        s += prev[yy * w + xx];
                        n += 1.0;
                    }
                }
                field[y * w + x] = s / n;
            }
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    field.iter().map(|v| (v - lo) / span - 0.5).collect()
}

struct Target {
    cy: f64,
    cx: f64,
    sigma: f64,
    peak: f64,
}

/// One synthetic scene: smoothed noise plus pixel-centred Gaussian targets,
/// clipped to `[0, 1]`; the mask marks where a target term exceeds half its peak.
pub fn synth_sample(spec: &SynthSpec, rng: &mut ChaCha8Rng, id: String) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    let noise = smoothed_noise(rng, h, w, spec.smoothing);
    let n_targets = rng.random_range(spec.targets.0..=spec.targets.1);
    let mut targets: Vec<Target> = Vec::with_capacity(n_targets);
    for _ in 0..n_targets {
        let sigma = sample_range(rng, spec.sigma);
        let peak = sample_range(rng, spec.peak);
        let margin = (2.0 * sigma).ceil() + 1.0;
        if 2.0 * margin >= h as f64 || 2.0 * margin >= w as f64 {
            return Err(Error::Dataset(format!(
                "target sigma {sigma} does not fit a {h}x{w} image"
            )));
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let cy = rng.random_range(margin as usize..h - margin as usize) as f64;
            let cx = rng.random_range(margin as usize..w - margin as usize) as f64;
            let clear = targets
                .iter()
                .all(|t| (t.cy - cy).hypot(t.cx - cx) > 3.0 * (t.sigma + sigma) + 2.0);
            if clear {
                placed = Some((cy, cx));
                break;
            }
        }
        let (cy, cx) = placed.ok_or_else(|| {
            Error::Dataset(format!(
                "could not place {n_targets} non-overlapping targets in {h}x{w} after {PLACEMENT_RETRIES} attempts"
            ))
        })?;
        targets.push(Target {
            cy,
            cx,
            sigma,
            peak,
        });
    }
    let mut image = Vec::with_capacity(h * w);
    let mut mask = BinaryMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut v = spec.background + spec.clutter * noise[y * w + x];
            for t in &targets {
                let r2 = (y as f64 - t.cy).powi(2) + (x as f64 - t.cx).powi(2);
                let g = (-r2 / (2.0 * t.sigma * t.sigma)).exp();
                v += t.peak * g;
                if g > 0.5 {
                    mask.set(y, x, true);
                }
            }
            image.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Sample::new(id, h, w, image, mask)
}

/// `spec.count` scenes with ids `synth_0000`, `synth_0001`, ...
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|i| synth_sample(spec, &mut rng, format!("synth_{i:04}")))
        .collect()
}
