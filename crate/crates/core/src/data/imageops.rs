//! Small image-space helpers shared by domain shift and augmentation.

use crate::tensor::Tensor;

/// Separable Gaussian blur with edge replication; `sigma <= 0` is a no-op.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let (h, w, c) = image.dims3().expect("image is H×W×C");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let src = image.data();
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0f64;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * src[(y * w + sx) * c + ch] as f64;
                }
                tmp[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0f64;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[(sy * w + x) * c + ch] as f64;
                }
                out[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    Tensor::new(vec![h, w, c], out).expect("same shape")
}

pub fn clamp_unit(image: &mut Tensor<f32>) {
    image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Bilinear (half-pixel centres) downscale/upscale of an `H×W×C` image.
pub fn resize_image(image: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (h, w, c) = image.dims3().expect("image is H×W×C");
    if (h, w) == (oh, ow) {
        return image.clone();
    }
    let out = crate::tensor::kernels::resize_forward(image.data(), (h, w, c), oh, ow);
    Tensor::new(vec![oh, ow, c], out).expect("resize shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::full(&[6, 5, 3], 0.4f32);
        let b = gaussian_blur(&img, 1.3);
        assert!(b.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn blur_spreads_an_impulse() {
        let mut img = Tensor::zeros(&[9, 9, 1]);
        img.data_mut()[4 * 9 + 4] = 1.0f32;
        let b = gaussian_blur(&img, 1.0);
        let total: f32 = b.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!(b.data()[4 * 9 + 4] < 1.0 && b.data()[4 * 9 + 5] > 0.0);
    }
}
