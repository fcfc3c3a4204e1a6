use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Dense per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "label-map",
                format!("{height}×{width} needs {} labels, got {}", height * width, data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Sorted distinct non-ignore class ids.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..255u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Nearest-neighbour resample (pixel centres) to `oh×ow`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> LabelMap {
        let mut out = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            let sy = nearest_index(oy, oh, self.height);
            for ox in 0..ow {
                let sx = nearest_index(ox, ow, self.width);
                out.push(self.data[sy * self.width + sx]);
            }
        }
        LabelMap { height: oh, width: ow, data: out }
    }

    /// Sub-window `[top, top+h) × [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> LabelMap {
        let mut out = Vec::with_capacity(h * w);
        for y in top..top + h {
            out.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        LabelMap { height: h, width: w, data: out }
    }
}

/// Source index sampled by output index `o` when mapping `out` cells onto `inp`.
pub fn nearest_index(o: usize, out: usize, inp: usize) -> usize {
    (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
}

/// One segmentation example: `H×W×3` image in `[0,1]` plus its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub domain: Domain,
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

impl SegSample {
    pub fn new(id: impl Into<String>, domain: Domain, image: Tensor<f32>, label: LabelMap) -> Result<Self> {
        let (h, w, c) = image.dims3()?;
        if c != 3 || (h, w) != label.dims() {
            return Err(Error::shape(
                "seg-sample",
                format!("image {:?} vs label {}×{}", image.shape(), label.height(), label.width()),
            ));
        }
        Ok(SegSample { id: id.into(), domain, image, label })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.label.dims()
    }

    /// Checks label range and image range.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.label.data().iter().find(|&&l| l != IGNORE && l as usize >= num_classes) {
            return Err(Error::invalid(format!("{}: label {bad} outside [0, {num_classes})", self.id)));
        }
        if self.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(format!("{}: image values outside [0, 1]", self.id)));
        }
        Ok(())
    }
}

/// Crop an `H×W×C` image tensor.
pub fn crop_image(image: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (ih, iw, c) = image.dims3()?;
    if top + h > ih || left + w > iw {
        return Err(Error::shape("crop", format!("{h}×{w} at ({top},{left}) exceeds {ih}×{iw}")));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in top..top + h {
        out.extend_from_slice(&image.data()[(y * iw + left) * c..(y * iw + left + w) * c]);
    }
    Tensor::new(vec![h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_downsample_picks_block_centres() {
        let l = LabelMap::new(4, 4, (0..16).collect()).unwrap();
        let d = l.resize_nearest(2, 2);
        assert_eq!(d.data(), &[5, 7, 13, 15]);
        assert_eq!(l.resize_nearest(4, 4), l);
    }

    #[test]
    fn present_classes_skip_ignore() {
        let l = LabelMap::new(1, 4, vec![3, IGNORE, 1, 3]).unwrap();
        assert_eq!(l.present_classes(), vec![1, 3]);
    }
}
