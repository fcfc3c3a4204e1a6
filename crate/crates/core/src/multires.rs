//! Multi-resolution geometry: LR/HR crops, grid footprints for δ lookup,
//! sliding-window prediction and entropy-guided crop selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_image, imageops::resize_image};
use crate::engine::PseudoLabel;
use crate::error::{Error, Result};
use crate::network::ENCODER_STRIDE;
use crate::tensor::Tensor;

/// Pixel rectangle in full-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        CropBox { top: 0, left: 0, height, width }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        y >= self.top as f64 && y < self.bottom() as f64 && x >= self.left as f64 && x < self.right() as f64
    }

    /// Error unless the box lies inside `h×w` and has encoder-compatible sides.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bottom() > h || self.right() > w {
            return Err(Error::shape("crop-box", format!("{self:?} outside {h}×{w} image")));
        }
        if !self.height.is_multiple_of(ENCODER_STRIDE) || !self.width.is_multiple_of(ENCODER_STRIDE) {
            return Err(Error::shape(
                "crop-box",
                format!("{}×{} not a multiple of {ENCODER_STRIDE}", self.height, self.width),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiresConfig {
    /// LR image side as a fraction of the full image side.
    pub lr_scale: f64,
    /// HR crop side as a fraction of the full image side.
    pub hr_fraction: f64,
    /// Entropy crop side is `H/entropy_mu × W/entropy_mu`.
    pub entropy_mu: usize,
    /// Entropy crop stride is `H/entropy_stride_div × W/entropy_stride_div`.
    pub entropy_stride_div: usize,
}

impl Default for MultiresConfig {
    fn default() -> Self {
        MultiresConfig { lr_scale: 0.5, hr_fraction: 0.5, entropy_mu: 2, entropy_stride_div: 4 }
    }
}

impl MultiresConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_scale > 0.0 && self.lr_scale <= 1.0) || !(self.hr_fraction > 0.0 && self.hr_fraction <= 1.0) {
            return Err(Error::Config("multires.lr_scale and multires.hr_fraction must lie in (0, 1]".into()));
        }
        if self.entropy_mu == 0 || self.entropy_stride_div == 0 {
            return Err(Error::Config("multires.entropy_mu and entropy_stride_div must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn lr_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h as f64 * self.lr_scale).round() as usize, (w as f64 * self.lr_scale).round() as usize)
    }

    pub fn hr_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h as f64 * self.hr_fraction).round() as usize, (w as f64 * self.hr_fraction).round() as usize)
    }

    pub fn entropy_crop_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.entropy_mu, w / self.entropy_mu)
    }

    pub fn entropy_stride(&self, h: usize, w: usize) -> (usize, usize) {
        ((h / self.entropy_stride_div).max(1), (w / self.entropy_stride_div).max(1))
    }
}

/// Downscaled full view plus a full-resolution crop.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiResBundle {
    pub lr_image: Tensor<f32>,
    pub hr_image: Tensor<f32>,
    pub hr_box: CropBox,
}

/// Uniformly placed box of `hr_h×hr_w` inside `h×w`.
pub fn random_box(h: usize, w: usize, hr_h: usize, hr_w: usize, rng: &mut impl Rng) -> Result<CropBox> {
    if hr_h == 0 || hr_w == 0 || hr_h > h || hr_w > w {
        return Err(Error::shape("make-crops", format!("HR crop {hr_h}×{hr_w} does not fit {h}×{w}")));
    }
    let top = rng.gen_range(0..=h - hr_h);
    let left = rng.gen_range(0..=w - hr_w);
    Ok(CropBox { top, left, height: hr_h, width: hr_w })
}

/// LR view for `lr_scale` and the HR crop at `hr_box`.
pub fn bundle_at(image: &Tensor<f32>, lr_scale: f64, hr_box: CropBox) -> Result<MultiResBundle> {
    let (h, w, _) = image.dims3()?;
    if !(lr_scale > 0.0 && lr_scale <= 1.0) {
        return Err(Error::invalid(format!("lr_scale must lie in (0, 1], got {lr_scale}")));
    }
    hr_box.validate(h, w)?;
    let (lh, lw) = ((h as f64 * lr_scale).round() as usize, (w as f64 * lr_scale).round() as usize);
    let lr_image = resize_image(image, lh, lw);
    let hr_image = crop_image(image, hr_box.top, hr_box.left, hr_box.height, hr_box.width)?;
    Ok(MultiResBundle { lr_image, hr_image, hr_box })
}

/// LR downscale of the whole image and a random full-resolution HR crop.
pub fn make_crops(
    image: &Tensor<f32>,
    lr_scale: f64,
    hr_size: (usize, usize),
    rng: &mut impl Rng,
) -> Result<MultiResBundle> {
    let (h, w, _) = image.dims3()?;
    let b = random_box(h, w, hr_size.0, hr_size.1, rng)?;
    bundle_at(image, lr_scale, b)
}

/// Per-pixel Shannon entropy of `H×W×C` probabilities (natural log).
pub fn entropy_map(probs: &[f64], classes: usize) -> Result<Vec<f64>> {
    if classes == 0 || !probs.len().is_multiple_of(classes) {
        return Err(Error::shape("entropy-map", format!("{} values for {classes} classes", probs.len())));
    }
    probs
        .chunks_exact(classes)
        .enumerate()
        .map(|(i, row)| {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-4 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!("entropy-map: pixel {i} probabilities sum to {s}")));
            }
            Ok(-row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        })
        .collect()
}

/// Window offsets `0, stride, 2·stride, …` plus a final flush position.
pub fn window_starts(extent: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || window > extent || stride == 0 {
        return Err(Error::shape("sliding-window", format!("window {window}, stride {stride}, extent {extent}")));
    }
    let last = extent - window;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    Ok(out)
}

/// Window of the highest mean entropy; ties go to the first in row-major order.
pub fn entropy_crop(ent: &[f64], h: usize, w: usize, crop: (usize, usize), stride: (usize, usize)) -> Result<CropBox> {
    if ent.len() != h * w {
        return Err(Error::shape("entropy-crop", format!("{} values for {h}×{w}", ent.len())));
    }
    // summed-area table for O(1) window sums
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += ent[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let (ch, cw) = crop;
    let mut best: Option<(f64, CropBox)> = None;
    for top in window_starts(h, ch, stride.0)? {
        for left in window_starts(w, cw, stride.1)? {
            let s = sat[(top + ch) * (w + 1) + left + cw]
                - sat[top * (w + 1) + left + cw]
                - sat[(top + ch) * (w + 1) + left]
                + sat[top * (w + 1) + left];
            let mean = s / (ch * cw) as f64;
            if best.is_none_or(|(b, _)| mean > b) {
                best = Some((mean, CropBox { top, left, height: ch, width: cw }));
            }
        }
    }
    Ok(best.expect("at least one window").1)
}

/// Logits of overlapping windows averaged on a full-image canvas.
/// Returns the averaged `H×W×C` logits and the per-pixel window counts.
pub fn sliding_logits(
    image: &Tensor<f32>,
    window: (usize, usize),
    stride: (usize, usize),
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<(Tensor<f32>, Vec<u32>)> {
    let (h, w, _) = image.dims3()?;
    let tops = window_starts(h, window.0, stride.0)?;
    let lefts = window_starts(w, window.1, stride.1)?;
    let mut canvas: Vec<f64> = Vec::new();
    let mut counts = vec![0u32; h * w];
    let mut classes = 0;
    for &top in &tops {
        for &left in &lefts {
            let crop = crop_image(image, top, left, window.0, window.1)?;
            let logits = predict(&crop)?;
            let (lh, lw, c) = logits.dims3()?;
            if (lh, lw) != window {
                return Err(Error::shape("sliding-window", format!("window logits {lh}×{lw} vs window {window:?}")));
            }
            if canvas.is_empty() {
                classes = c;
                canvas = vec![0.0; h * w * c];
            }
            for y in 0..lh {
                for x in 0..lw {
                    let p = (top + y) * w + left + x;
                    counts[p] += 1;
                    let src = &logits.data()[(y * lw + x) * c..][..c];
                    for (dst, &v) in canvas[p * c..][..c].iter_mut().zip(src) {
                        *dst += v as f64;
                    }
                }
            }
        }
    }
    let out: Vec<f32> = canvas
        .chunks_exact(classes)
        .zip(&counts)
        .flat_map(|(row, &n)| row.iter().map(move |v| (v / n as f64) as f32))
        .collect();
    Ok((Tensor::new(vec![h, w, classes], out)?, counts))
}

/// Pseudo-labels from averaged sliding-window logits.
pub fn sliding_pseudo_label(
    image: &Tensor<f32>,
    window: (usize, usize),
    stride: (usize, usize),
    predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<(PseudoLabel, Tensor<f32>)> {
    let (logits, _) = sliding_logits(image, window, stride, predict)?;
    Ok((PseudoLabel::from_logits(&logits)?, logits))
}

/// How an LR contrastive grid relates to the HR crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Footprint {
    /// Per LR cell: does its centre lie inside the HR box?
    pub lr_in_box: Vec<bool>,
    /// Per HR cell: the LR cell containing its centre.
    pub hr_to_lr: Vec<usize>,
}

/// Grid correspondence for an `image_h×image_w` image, an LR grid covering
/// the whole image and an HR grid covering `hr_box`. `None` means no HR crop.
pub fn footprint(
    hr_box: Option<CropBox>,
    image: (usize, usize),
    lr_grid: (usize, usize),
    hr_grid: (usize, usize),
) -> Result<Footprint> {
    let (ih, iw) = image;
    let (lh, lw) = lr_grid;
    if lh == 0 || lw == 0 || ih == 0 || iw == 0 {
        return Err(Error::shape("footprint", "empty grid or image"));
    }
    let Some(b) = hr_box else {
        return Ok(Footprint { lr_in_box: vec![false; lh * lw], hr_to_lr: Vec::new() });
    };
    if b.bottom() > ih || b.right() > iw || b.height == 0 || b.width == 0 {
        return Err(Error::shape("footprint", format!("{b:?} outside {ih}×{iw}")));
    }
    let (cy, cx) = (ih as f64 / lh as f64, iw as f64 / lw as f64);
    let mut lr_in_box = Vec::with_capacity(lh * lw);
    for gy in 0..lh {
        for gx in 0..lw {
            lr_in_box.push(b.contains((gy as f64 + 0.5) * cy, (gx as f64 + 0.5) * cx));
        }
    }
    let (hh, hw) = hr_grid;
    let mut hr_to_lr = Vec::with_capacity(hh * hw);
    for gy in 0..hh {
        let y = b.top as f64 + (gy as f64 + 0.5) * b.height as f64 / hh as f64;
        let ly = ((y / cy).floor() as usize).min(lh - 1);
        for gx in 0..hw {
            let x = b.left as f64 + (gx as f64 + 0.5) * b.width as f64 / hw as f64;
            let lx = ((x / cx).floor() as usize).min(lw - 1);
            hr_to_lr.push(ly * lw + lx);
        }
    }
    Ok(Footprint { lr_in_box, hr_to_lr })
}

/// Numeric δ weights: `(per LR cell, per HR cell)`. LR cells inside the HR
/// footprint take δ, outside 1; HR cells take `1 − δ` of their LR cell.
pub fn align_delta(delta: &[f64], fp: &Footprint) -> Result<(Vec<f64>, Vec<f64>)> {
    if delta.len() != fp.lr_in_box.len() {
        return Err(Error::shape("align-delta", format!("δ has {} cells, grid {}", delta.len(), fp.lr_in_box.len())));
    }
    let lr = delta.iter().zip(&fp.lr_in_box).map(|(&d, &inside)| if inside { d } else { 1.0 }).collect();
    let hr = fp.hr_to_lr.iter().map(|&c| 1.0 - delta[c]).collect();
    Ok((lr, hr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crops_shapes_and_identity() {
        let img = Tensor::from_fn(&[64, 64, 3], |i| (i % 13) as f32 / 13.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_crops(&img, 0.5, (32, 32), &mut rng).unwrap();
        assert_eq!(b.lr_image.shape(), &[32, 32, 3]);
        let full = make_crops(&img, 1.0, (64, 64), &mut rng).unwrap();
        assert_eq!(full.lr_image, img);
        assert_eq!(full.hr_box, CropBox::full(64, 64));
        assert!(make_crops(&img, 0.5, (80, 32), &mut rng).is_err());
    }

    #[test]
    fn entropy_examples() {
        let e = entropy_map(&[1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25], 4).unwrap();
        assert_eq!(e[0], 0.0);
        assert!((e[1] - 4f64.ln()).abs() < 1e-12);
        assert!(entropy_map(&[0.5, 0.6], 2).is_err());
    }

    #[test]
    fn entropy_crop_ties_and_full() {
        let ent = vec![1.0; 64];
        assert_eq!(entropy_crop(&ent, 8, 8, (4, 4), (2, 2)).unwrap(), CropBox { top: 0, left: 0, height: 4, width: 4 });
        assert_eq!(entropy_crop(&ent, 8, 8, (8, 8), (2, 2)).unwrap(), CropBox::full(8, 8));
        assert!(entropy_crop(&ent, 8, 8, (9, 8), (2, 2)).is_err());
    }

    #[test]
    fn flush_final_window() {
        assert_eq!(window_starts(10, 4, 4).unwrap(), vec![0, 4, 6]);
        assert_eq!(window_starts(8, 4, 2).unwrap(), vec![0, 2, 4]);
    }

    #[test]
    fn two_pixel_overlap_average() {
        // 1×3 image, windows of width 2 at 0 and 1; logits = 10·x + left offset
        let img = Tensor::from_fn(&[1, 3, 3], |i| (i / 3) as f32);
        let (avg, counts) =
            sliding_logits(&img, (1, 2), (1, 1), |crop| Ok(Tensor::from_fn(&[1, 2, 1], |x| crop.data()[x * 3] * 10.0)))
                .unwrap();
        assert_eq!(counts, vec![1, 2, 1]);
        assert_eq!(avg.data(), &[0.0, 10.0, 20.0]);
    }

    #[test]
    fn footprint_hand_case() {
        // 16×16 image, 4×4 LR grid (4 px cells), HR box rows/cols 8..16, 2×2 HR grid
        let b = CropBox { top: 8, left: 8, height: 8, width: 8 };
        let fp = footprint(Some(b), (16, 16), (4, 4), (2, 2)).unwrap();
        let inside: Vec<usize> = (0..16).filter(|&i| fp.lr_in_box[i]).collect();
        assert_eq!(inside, vec![10, 11, 14, 15]);
        assert_eq!(fp.hr_to_lr, vec![10, 11, 14, 15]);
        let none = footprint(None, (16, 16), (4, 4), (2, 2)).unwrap();
        let (lr, hr) = align_delta(&[0.3; 16], &none).unwrap();
        assert!(lr.iter().all(|&w| w == 1.0) && hr.is_empty());
        let (lr, hr) = align_delta(&[0.5; 16], &fp).unwrap();
        assert_eq!(hr, vec![0.5; 4]);
        assert_eq!(lr.iter().filter(|&&w| w == 0.5).count(), 4);
    }
}
