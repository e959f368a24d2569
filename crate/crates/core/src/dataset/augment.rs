//! Training-time corruptions of resolved reflectance maps that mimic the
//! sparsity and noise of maps aggregated from real photographs. There are
//! no geometric warps: only texel masking, impulse noise, local additive
//! noise and mirror flips.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DatasetError;
use crate::imaging::LinearImage;
use crate::Rgb;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Fraction of occupied texels blanked. With `randomize_mask` the
    /// fraction is drawn uniformly from `[0, mask_fraction]` per call.
    pub mask_fraction: f64,
    pub randomize_mask: bool,
    /// Fraction of all texels replaced by black or white.
    pub salt_pepper_fraction: f64,
    pub noise_patches: usize,
    pub noise_radius: usize,
    pub noise_amplitude: f64,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub seed: u64,
}

impl AugmentConfig {
    /// Every corruption disabled.
    pub fn identity() -> Self {
        Self {
            mask_fraction: 0.0,
            randomize_mask: false,
            salt_pepper_fraction: 0.0,
            noise_patches: 0,
            noise_radius: 0,
            noise_amplitude: 0.0,
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (name, value) in [
            ("mask_fraction", self.mask_fraction),
            ("salt_pepper_fraction", self.salt_pepper_fraction),
            ("noise_amplitude", self.noise_amplitude),
            ("flip_h_prob", self.flip_h_prob),
            ("flip_v_prob", self.flip_v_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DatasetError::AugmentRange { name, value });
            }
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.95,
            randomize_mask: true,
            salt_pepper_fraction: 0.02,
            noise_patches: 3,
            noise_radius: 8,
            noise_amplitude: 0.2,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            seed: 0,
        }
    }
}

/// Per-sample generator derived from `(seed, epoch, index)`, so a sample's
/// corruption does not depend on batch order or thread scheduling.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

/// [`augment_with_rng`] seeded from `cfg.seed`.
pub fn augment(img: &LinearImage, cfg: &AugmentConfig) -> Result<LinearImage, DatasetError> {
    augment_with_rng(img, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Applies masking, salt-and-pepper, local noise patches and flips in that
/// order. Occupied texels are those with any nonzero channel.
pub fn augment_with_rng<R: Rng>(img: &LinearImage, cfg: &AugmentConfig, rng: &mut R) -> Result<LinearImage, DatasetError> {
    cfg.validate()?;
    let mut out = img.clone();
    let (w, h) = out.dims();

    let fraction = if cfg.randomize_mask { rng.gen::<f64>() * cfg.mask_fraction } else { cfg.mask_fraction };
    if fraction > 0.0 {
        let occupied: Vec<usize> =
            out.pixels().iter().enumerate().filter(|(_, p)| p.max() > 0.0).map(|(i, _)| i).collect();
        let n_mask = (fraction * occupied.len() as f64).round() as usize;
        for k in sample(rng, occupied.len(), n_mask) {
            out.pixels_mut()[occupied[k]] = Rgb::zeros();
        }
    }

    if cfg.salt_pepper_fraction > 0.0 {
        let n = (cfg.salt_pepper_fraction * (w * h) as f64).round() as usize;
        for i in sample(rng, w * h, n) {
            out.pixels_mut()[i] = if rng.gen::<bool>() { Rgb::repeat(1.0) } else { Rgb::zeros() };
        }
    }

    for _ in 0..cfg.noise_patches {
        let radius = rng.gen_range(1..=cfg.noise_radius.max(1)) as isize;
        let amplitude = rng.gen::<f64>() * cfg.noise_amplitude;
        let (cx, cy) = (rng.gen_range(0..w) as isize, rng.gen_range(0..h) as isize);
        for y in (cy - radius).max(0)..=(cy + radius).min(h as isize - 1) {
            for x in (cx - radius).max(0)..=(cx + radius).min(w as isize - 1) {
                if (x - cx).pow(2) + (y - cy).pow(2) > radius * radius {
                    continue;
                }
                let noise = Rgb::from_fn(|_, _| rng.gen_range(-1.0..=1.0) * amplitude);
                let v = (out.get(x as usize, y as usize) + noise).map(|c| c.clamp(0.0, 1.0));
                out.set(x as usize, y as usize, v);
            }
        }
    }

    if rng.gen::<f64>() < cfg.flip_h_prob {
        out = out.flip_horizontal();
    }
    if rng.gen::<f64>() < cfg.flip_v_prob {
        out = out.flip_vertical();
    }
    Ok(out)
}
