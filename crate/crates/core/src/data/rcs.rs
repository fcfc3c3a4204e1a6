//! Rare-class sampling of source images.

use rand::Rng;

use super::sample::SegSample;
use crate::error::{Error, Result};

/// `softmax((1 − f_c) / temperature)` over classes.
pub fn rcs_probabilities(frequencies: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("rcs temperature must be > 0, got {temperature}")));
    }
    if frequencies.is_empty() {
        return Err(Error::invalid("rcs: empty frequency vector"));
    }
    let logits: Vec<f64> = frequencies.iter().map(|f| (1.0 - f) / temperature).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Sample a class id with probability `softmax((1 − f_c) / temperature)`.
pub fn rcs_pick(frequencies: &[f64], temperature: f64, rng: &mut impl Rng) -> Result<usize> {
    Ok(draw(&rcs_probabilities(frequencies, temperature)?, rng))
}

/// Picks a class by RCS, then a source image containing it uniformly.
/// Classes absent from every source image are never picked.
#[derive(Clone, Debug)]
pub struct RareClassSampler {
    probs: Vec<f64>,
    images_with: Vec<Vec<usize>>,
}

impl RareClassSampler {
    pub fn new(samples: &[SegSample], frequencies: &[f64], temperature: f64) -> Result<Self> {
        let c = frequencies.len();
        let mut images_with = vec![Vec::new(); c];
        for (i, s) in samples.iter().enumerate() {
            for cls in s.label.present_classes() {
                if let Some(list) = images_with.get_mut(cls as usize) {
                    list.push(i);
                }
            }
        }
        let mut probs = rcs_probabilities(frequencies, temperature)?;
        for (p, imgs) in probs.iter_mut().zip(&images_with) {
            if imgs.is_empty() {
                *p = 0.0;
            }
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("rcs: no class appears in any source image"));
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(RareClassSampler { probs, images_with })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// `(class, image index)`.
    pub fn pick(&self, rng: &mut impl Rng) -> (usize, usize) {
        let class = draw(&self.probs, rng);
        let imgs = &self.images_with[class];
        (class, imgs[rng.gen_range(0..imgs.len())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_frequencies_give_uniform_picks() {
        let p = rcs_probabilities(&[0.25; 4], 0.01).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rare_class_dominates_at_low_temperature() {
        let p = rcs_probabilities(&[0.9, 0.1], 0.01).unwrap();
        // softmax((0.1, 0.9) / 0.01) = (1/(1+e^80), 1/(1+e^-80))
        assert!(p[1] > 0.999);
        assert!((p[0] - 1.0 / (1.0 + 80f64.exp())).abs() < 1e-40);
    }

    #[test]
    fn high_temperature_flattens() {
        let f = [0.7, 0.2, 0.1];
        let p = rcs_probabilities(&f, 1e6).unwrap();
        let kl: f64 = p.iter().map(|&q| q * (q * 3.0).ln()).sum();
        assert!(kl < 1e-3);
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(rcs_pick(&[0.5, 0.5], 0.0, &mut rng).is_err());
        assert!(rcs_pick(&[0.5, 0.5], -1.0, &mut rng).is_err());
    }

    #[test]
    fn empirical_distribution_within_three_sigma() {
        let f = [0.5, 0.3, 0.15, 0.05];
        let t = 0.2;
        let p = rcs_probabilities(&f, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[rcs_pick(&f, t, &mut rng).unwrap()] += 1;
        }
        for k in 0..4 {
            let sigma = (n as f64 * p[k] * (1.0 - p[k])).sqrt();
            assert!((counts[k] as f64 - n as f64 * p[k]).abs() <= 3.0 * sigma, "class {k}");
        }
    }
}
