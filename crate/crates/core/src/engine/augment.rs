use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::imageops::{clamp_unit, gaussian_blur};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Half-width of the multiplicative jitter factors (`1 ± s`).
    pub jitter_strength: f64,
    pub jitter_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_strength: 0.2,
            jitter_prob: 0.8,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.0,
            blur_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            jitter_strength: 0.0,
            jitter_prob: 0.0,
            blur_sigma_min: 0.0,
            blur_sigma_max: 0.0,
            blur_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.jitter_strength >= 0.0 && self.jitter_strength < 1.0) {
            return Err(Error::Config(format!(
                "augment.jitter_strength must lie in [0, 1), got {}",
                self.jitter_strength
            )));
        }
        if !prob(self.jitter_prob) || !prob(self.blur_prob) {
            return Err(Error::Config("augment probabilities must lie in [0, 1]".into()));
        }
        if !(self.blur_sigma_min >= 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            return Err(Error::Config("augment blur sigma range must satisfy 0 ≤ min ≤ max".into()));
        }
        Ok(())
    }
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn factor(rng: &mut impl Rng, s: f64) -> f32 {
    rng.gen_range(1.0 - s..=1.0 + s) as f32
}

/// Photometric jitter (per-channel brightness, contrast, saturation) and
/// Gaussian blur, each applied with its configured probability. Output is
/// clamped to `[0, 1]`.
pub fn augment(image: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("augment", format!("expected 3 channels, got {c}")));
    }
    let mut out = image.clone();
    let n = h * w;
    if cfg.jitter_strength > 0.0 && rng.gen_bool(cfg.jitter_prob) {
        let s = cfg.jitter_strength;
        let bright = [factor(rng, s), factor(rng, s), factor(rng, s)];
        let contrast = factor(rng, s);
        let saturation = factor(rng, s);
        let px = out.data_mut();
        for p in px.chunks_exact_mut(3) {
            for k in 0..3 {
                p[k] *= bright[k];
            }
        }
        let mean =
            px.chunks_exact(3).map(|p| p.iter().zip(LUMA).map(|(v, l)| v * l).sum::<f32>()).sum::<f32>() / n as f32;
        for p in px.chunks_exact_mut(3) {
            let gray: f32 = p.iter().zip(LUMA).map(|(v, l)| v * l).sum();
            for v in p.iter_mut() {
                let sat = gray + (*v - gray) * saturation;
                *v = mean + (sat - mean) * contrast;
            }
        }
        clamp_unit(&mut out);
    }
    if cfg.blur_sigma_max > 0.0 && rng.gen_bool(cfg.blur_prob) {
        let sigma = rng.gen_range(cfg.blur_sigma_min..=cfg.blur_sigma_max);
        out = gaussian_blur(&out, sigma);
        clamp_unit(&mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Tensor<f32> {
        Tensor::from_fn(&[8, 8, 3], |i| ((i * 37) % 101) as f32 / 100.0)
    }

    #[test]
    fn zero_strength_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img(), &AugmentConfig::identity(), &mut rng).unwrap(), img());
    }

    #[test]
    fn stays_in_unit_range_and_is_deterministic() {
        let cfg = AugmentConfig { jitter_strength: 0.9, jitter_prob: 1.0, blur_prob: 1.0, ..AugmentConfig::default() };
        for seed in 0..20 {
            let a = augment(&img(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a, augment(&img(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap());
        }
    }
}
