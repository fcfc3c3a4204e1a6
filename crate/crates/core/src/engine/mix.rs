use rand::seq::index::sample as sample_indices;
use rand::Rng;

use super::pseudo::PseudoLabel;
use crate::data::{LabelMap, SegSample, IGNORE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Domain-mixed image: source pixels of selected classes pasted on a target image.
#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    pub image: Tensor<f32>,
    pub label: LabelMap,
    /// `true` where the pixel comes from the source image.
    pub origin: Vec<bool>,
    pub selected: Vec<u8>,
}

/// `⌈n/2⌉` of the classes present in `label`, uniformly without replacement, sorted.
pub fn select_classes(label: &LabelMap, rng: &mut impl Rng) -> Vec<u8> {
    let present = label.present_classes();
    let k = present.len().div_ceil(2);
    let mut out: Vec<u8> = sample_indices(rng, present.len(), k).into_iter().map(|i| present[i]).collect();
    out.sort_unstable();
    out
}

/// Compose a mix from an explicit class selection.
pub fn classmix_with_classes(
    source: &SegSample,
    target_image: &Tensor<f32>,
    pseudo: &LabelMap,
    selected: &[u8],
) -> Result<MixResult> {
    if source.image.shape() != target_image.shape() || source.label.dims() != pseudo.dims() {
        return Err(Error::shape(
            "classmix",
            format!(
                "source {:?} vs target {:?} / pseudo {:?}",
                source.image.shape(),
                target_image.shape(),
                pseudo.dims()
            ),
        ));
    }
    let mut pick = [false; 256];
    for &c in selected {
        if c != IGNORE {
            pick[c as usize] = true;
        }
    }
    let origin: Vec<bool> = source.label.data().iter().map(|&l| pick[l as usize]).collect();
    let c = source.image.shape()[2];
    let mut image = target_image.clone();
    for (i, &o) in origin.iter().enumerate() {
        if o {
            image.data_mut()[i * c..(i + 1) * c].copy_from_slice(&source.image.data()[i * c..(i + 1) * c]);
        }
    }
    let label_data = origin
        .iter()
        .zip(source.label.data().iter().zip(pseudo.data()))
        .map(|(&o, (&s, &t))| if o { s } else { t })
        .collect();
    let (h, w) = pseudo.dims();
    Ok(MixResult { image, label: LabelMap::new(h, w, label_data)?, origin, selected: selected.to_vec() })
}

/// ClassMix with half of the source classes (rounded up) chosen by `rng`.
pub fn classmix(
    source: &SegSample,
    target_image: &Tensor<f32>,
    pseudo: &PseudoLabel,
    rng: &mut impl Rng,
) -> Result<MixResult> {
    let selected = select_classes(&source.label, rng);
    classmix_with_classes(source, target_image, &pseudo.labels, &selected)
}
