use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::network::{infer, ModelParams};
use crate::tensor::{Scalar, Tensor};

/// Teacher argmax labels with per-pixel max-softmax confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub labels: LabelMap,
    pub confidence: Vec<f64>,
}

/// Row-wise softmax of `H×W×C` logits, evaluated in f64.
pub fn softmax_probs<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, _, c) = logits.dims3()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let start = out.len();
        out.extend(row.iter().map(|v| (v.as_f64() - m).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|p| *p /= s);
    }
    Ok(out)
}

impl PseudoLabel {
    /// Argmax (ties → lowest class id) and max probability per pixel.
    pub fn from_probs(probs: &[f64], height: usize, width: usize, classes: usize) -> Result<Self> {
        if classes == 0 || classes > 255 || probs.len() != height * width * classes {
            return Err(Error::shape(
                "pseudo-label",
                format!("{} probabilities for {height}×{width}×{classes}", probs.len()),
            ));
        }
        let mut labels = Vec::with_capacity(height * width);
        let mut confidence = Vec::with_capacity(height * width);
        for row in probs.chunks_exact(classes) {
            let mut best = 0;
            for k in 1..classes {
                if row[k] > row[best] {
                    best = k;
                }
            }
            labels.push(best as u8);
            confidence.push(row[best]);
        }
        Ok(PseudoLabel { labels: LabelMap::new(height, width, labels)?, confidence })
    }

    pub fn from_logits<T: Scalar>(logits: &Tensor<T>) -> Result<Self> {
        let (h, w, c) = logits.dims3()?;
        Self::from_probs(&softmax_probs(logits)?, h, w, c)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }
}

/// Teacher prediction on `image` without gradient recording.
pub fn pseudo_label<T: Scalar>(teacher: &ModelParams<T>, image: &Tensor<T>) -> Result<PseudoLabel> {
    let (_, logits) = infer(teacher, image)?;
    PseudoLabel::from_logits(&logits)
}

/// Share of pixels whose confidence exceeds `beta`.
pub fn confidence_fraction(pseudo: &PseudoLabel, beta: f64) -> f64 {
    if pseudo.confidence.is_empty() {
        return 0.0;
    }
    pseudo.confidence.iter().filter(|&&p| p > beta).count() as f64 / pseudo.confidence.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_confidence() {
        let p = PseudoLabel::from_probs(&[0.1, 0.7, 0.2], 1, 1, 3).unwrap();
        assert_eq!(p.labels.data(), &[1]);
        assert_eq!(p.confidence, vec![0.7]);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let p = PseudoLabel::from_probs(&[0.5, 0.5], 1, 1, 2).unwrap();
        assert_eq!(p.labels.data(), &[0]);
    }

    #[test]
    fn one_hot_is_fully_confident() {
        let p = PseudoLabel::from_probs(&[0.0, 0.0, 1.0], 1, 1, 3).unwrap();
        assert_eq!(p.confidence, vec![1.0]);
    }

    #[test]
    fn fraction_examples() {
        let p = PseudoLabel::from_probs(&[0.99, 0.01, 0.5, 0.5, 0.97, 0.03, 0.2, 0.8], 2, 2, 2).unwrap();
        // max probs 0.99, 0.5, 0.97, 0.8
        assert_eq!(confidence_fraction(&p, 0.9), 0.5);
        assert_eq!(confidence_fraction(&p, 0.1), 1.0);
        assert_eq!(confidence_fraction(&p, 0.999), 0.0);
    }
}
