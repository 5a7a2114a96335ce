//! Paired geometric and photometric augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::ImageRGB;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotate_prob: f64,
    /// Additive offset range.
    pub brightness: (f64, f64),
    /// Scale range about mid-gray.
    pub contrast: (f64, f64),
    /// Exponent range.
    pub gamma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotate_prob: 0.5,
            brightness: (-0.1, 0.1),
            contrast: (0.8, 1.2),
            gamma: (0.8, 1.25),
        }
    }
}

impl AugmentConfig {
    /// Never changes anything.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            rotate_prob: 0.0,
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            gamma: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !(prob(self.flip_prob) && prob(self.rotate_prob)) {
            return Err(Error::Config("augment: probabilities must lie in [0, 1]".into()));
        }
        if !(range(self.brightness) && range(self.contrast) && range(self.gamma)) {
            return Err(Error::Config("augment: ranges must be finite and ordered".into()));
        }
        if self.contrast.0 < 0.0 || self.gamma.0 <= 0.0 {
            return Err(Error::Config("augment: contrast must be nonnegative and gamma positive".into()));
        }
        Ok(())
    }

    /// Draws every component in a fixed order, whether or not it ends up neutral.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> AugmentDraw {
        let uniform = |rng: &mut R, (a, b): (f64, f64)| if a == b { a } else { rng.gen_range(a..b) };
        AugmentDraw {
            flip: rng.gen::<f64>() < self.flip_prob,
            rotate: rng.gen::<f64>() < self.rotate_prob,
            brightness: uniform(rng, self.brightness),
            contrast: uniform(rng, self.contrast),
            gamma: uniform(rng, self.gamma),
        }
    }
}

/// One concrete transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub rotate: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
}

impl AugmentDraw {
    /// Horizontal flip, 180° rotation, then brightness, contrast and gamma; each
    /// photometric step clamps into `[0, 1]` and is skipped at its neutral value.
    pub fn apply(&self, image: &ImageRGB) -> ImageRGB {
        let mut out = image.clone();
        if self.flip {
            out = out.flip_horizontal();
        }
        if self.rotate {
            out = out.rotate180();
        }
        if self.brightness != 0.0 {
            let b = self.brightness as f32;
            out = out.map(|v| v + b);
        }
        if self.contrast != 1.0 {
            let c = self.contrast as f32;
            out = out.map(|v| (v - 0.5) * c + 0.5);
        }
        if self.gamma != 1.0 {
            let g = self.gamma as f32;
            out = out.map(|v| v.powf(g));
        }
        out
    }
}

/// Applies one draw, seeded by `seed`, identically to both images of a pair.
pub fn augment(degraded: &ImageRGB, gt: &ImageRGB, config: &AugmentConfig, seed: u64) -> (ImageRGB, ImageRGB) {
    let draw = config.draw(&mut ChaCha8Rng::seed_from_u64(seed));
    (draw.apply(degraded), draw.apply(gt))
}
