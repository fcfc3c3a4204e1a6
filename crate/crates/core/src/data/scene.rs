//! Procedural street-like scenes and the colour/noise/blur domain shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::imageops::{clamp_unit, gaussian_blur};
use super::sample::{Domain, LabelMap, SegSample};
use super::taxonomy::ClassTaxonomy;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scene geometry distribution shared by both domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of thing objects per image.
    pub things_per_image: (usize, usize),
    /// Inclusive range of thing radii in pixels.
    pub thing_radius: (usize, usize),
    /// Relative frequency of each thing class, in taxonomy thing order.
    pub thing_weights: Vec<f64>,
}

/// Appearance change that turns source renders into target renders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftParams {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub noise_amplitude: f64,
    pub blur_sigma: f64,
}

impl ShiftParams {
    pub fn identity() -> Self {
        ShiftParams { gain: [1.0; 3], bias: [0.0; 3], noise_amplitude: 0.0, blur_sigma: 0.0 }
    }

    /// Default source→target shift of the desk corpus.
    pub fn desk_target() -> Self {
        ShiftParams { gain: [0.7, 1.1, 1.3], bias: [0.15, -0.08, -0.12], noise_amplitude: 0.08, blur_sigma: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub taxonomy: ClassTaxonomy,
    pub scene: SceneParams,
    pub shift: ShiftParams,
    pub seed: u64,
}

impl DomainSpec {
    /// 64×64 scenes with a long-tailed thing distribution and no shift.
    pub fn desk_source(seed: u64) -> Self {
        DomainSpec {
            taxonomy: ClassTaxonomy::desk_default(),
            scene: SceneParams {
                height: 64,
                width: 64,
                things_per_image: (1, 5),
                thing_radius: (3, 7),
                thing_weights: vec![0.6, 0.3, 0.1],
            },
            shift: ShiftParams::identity(),
            seed,
        }
    }

    /// Same scene distribution with `shift` applied.
    pub fn with_shift(&self, shift: ShiftParams) -> Self {
        DomainSpec { shift, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        let n_things = self.taxonomy.thing_ids().len();
        if self.taxonomy.num_classes() == 0 {
            return Err(Error::invalid("domain spec: zero classes"));
        }
        let s = &self.scene;
        if s.height == 0 || s.width == 0 {
            return Err(Error::invalid("domain spec: empty image size"));
        }
        if s.thing_weights.len() != n_things {
            return Err(Error::invalid(format!(
                "domain spec: {} thing weights for {n_things} thing classes",
                s.thing_weights.len()
            )));
        }
        if s.thing_weights.iter().any(|&w| !(w >= 0.0)) || s.thing_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("domain spec: thing weights must be non-negative, not all zero"));
        }
        if s.things_per_image.0 > s.things_per_image.1 || s.thing_radius.0 > s.thing_radius.1 || s.thing_radius.0 == 0 {
            return Err(Error::invalid("domain spec: empty object count or radius range"));
        }
        Ok(())
    }
}

/// Per-class appearance: base colour plus an oriented stripe texture.
struct Appearance {
    color: [f64; 3],
    freq: f64,
    angle: f64,
    amplitude: f64,
}

const BASE_COLORS: [[f64; 3]; 8] = [
    [0.55, 0.72, 0.92],
    [0.55, 0.45, 0.40],
    [0.28, 0.55, 0.22],
    [0.42, 0.42, 0.44],
    [0.66, 0.58, 0.62],
    [0.22, 0.30, 0.62],
    [0.82, 0.38, 0.32],
    [0.86, 0.80, 0.25],
];

fn appearance(class: usize) -> Appearance {
    let color = if class < BASE_COLORS.len() {
        BASE_COLORS[class]
    } else {
        let h = (class as f64 * 0.618_033_988_75).fract();
        [0.3 + 0.5 * h, 0.3 + 0.5 * (1.0 - h), 0.3 + 0.5 * (h * 3.0).fract()]
    };
    Appearance { color, freq: 0.35 + 0.3 * (class % 4) as f64, angle: class as f64 * 0.7, amplitude: 0.06 }
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Render one source-domain scene. Deterministic in `(spec, seed)`.
///
/// Stuff classes fill a sky band, a mid band with blobs, and a ground band
/// with a side strip; thing classes are discs and bars painted on top. The
/// label map is exactly the painted geometry.
pub fn generate_scene(spec: &DomainSpec, seed: u64) -> Result<SegSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.scene.height, spec.scene.width);
    let stuff = spec.taxonomy.stuff_ids();
    let things = spec.taxonomy.thing_ids();
    let role = |i: usize| stuff[i % stuff.len()] as u8;

    let hf = h as f64;
    let sky_line = (hf * rng.gen_range(0.15..0.35)) as usize;
    let horizon = ((hf * rng.gen_range(0.5..0.65)) as usize).max(sky_line + 1).min(h);
    let mut label = LabelMap::filled(h, w, role(1));
    for y in 0..h {
        let v = if y < sky_line {
            role(0)
        } else if y < horizon {
            role(1)
        } else {
            role(3)
        };
        for x in 0..w {
            label.set(y, x, v);
        }
    }

    // blobs in the mid band
    let n_blobs = rng.gen_range(1..=3);
    for _ in 0..n_blobs {
        let cy = rng.gen_range(sky_line as f64..horizon.max(sky_line + 1) as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = hf * rng.gen_range(0.06..0.16);
        let rx = w as f64 * rng.gen_range(0.08..0.22);
        for y in sky_line.saturating_sub(2)..horizon.min(h) {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    label.set(y, x, role(2));
                }
            }
        }
    }

    // side strip on the ground
    let strip_w = w as f64 * rng.gen_range(0.2..0.45);
    let left_side = rng.gen_bool(0.5);
    let ground_h = (h - horizon).max(1) as f64;
    for y in horizon..h {
        let extent = (strip_w * (0.3 + 0.7 * (y - horizon) as f64 / ground_h)) as usize;
        for x in 0..extent.min(w) {
            let xx = if left_side { x } else { w - 1 - x };
            label.set(y, xx, role(4));
        }
    }

    // thing objects
    let n_things = rng.gen_range(spec.scene.things_per_image.0..=spec.scene.things_per_image.1);
    for _ in 0..n_things {
        let class = things[pick_weighted(&spec.scene.thing_weights, &mut rng)] as u8;
        let r = rng.gen_range(spec.scene.thing_radius.0..=spec.scene.thing_radius.1) as f64;
        let cy = rng.gen_range(sky_line as f64..hf);
        let cx = rng.gen_range(0.0..w as f64);
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside =
                    if disc { dy * dy + dx * dx <= r * r } else { dx.abs() <= 0.5 * r && dy.abs() <= 1.25 * r };
                if inside {
                    label.set(y, x, class);
                }
            }
        }
    }

    // render
    let illum = rng.gen_range(0.9..1.1);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let looks: Vec<Appearance> = (0..spec.taxonomy.num_classes()).map(appearance).collect();
    let mut img = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let a = &looks[label.get(y, x) as usize];
            let t = (a.freq * (x as f64 * a.angle.cos() + y as f64 * a.angle.sin()) + phase).sin();
            for ch in 0..3 {
                let noise = rng.gen_range(-0.02..0.02);
                let v = a.color[ch] * illum + a.amplitude * t + noise;
                img.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let image = Tensor::new(vec![h, w, 3], img)?;
    SegSample::new(format!("scene-{seed:016x}"), Domain::Source, image, label)
}

/// Colour affine, additive noise, then blur; labels untouched.
pub fn apply_domain_shift(sample: &SegSample, shift: &ShiftParams, seed: u64) -> Result<SegSample> {
    if sample.domain != Domain::Source {
        return Err(Error::invalid(format!("{}: domain shift expects a source sample", sample.id)));
    }
    let mut image = sample.image.clone();
    let identity_affine = shift.gain == [1.0; 3] && shift.bias == [0.0; 3];
    if !identity_affine {
        for px in image.data_mut().chunks_exact_mut(3) {
            for ((v, g), b) in px.iter_mut().zip(shift.gain).zip(shift.bias) {
                *v = (g * *v as f64 + b) as f32;
            }
        }
    }
    if shift.noise_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = shift.noise_amplitude;
        image.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-a..a) as f32);
    }
    let mut image = gaussian_blur(&image, shift.blur_sigma);
    clamp_unit(&mut image);
    Ok(SegSample { id: sample.id.clone(), domain: Domain::Target, image, label: sample.label.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::taxonomy::Partition;

    #[test]
    fn same_seed_same_scene() {
        let spec = DomainSpec::desk_source(1);
        assert_eq!(generate_scene(&spec, 42).unwrap(), generate_scene(&spec, 42).unwrap());
        assert_ne!(generate_scene(&spec, 42).unwrap().label, generate_scene(&spec, 43).unwrap().label);
    }

    #[test]
    fn no_things_means_stuff_only() {
        let mut spec = DomainSpec::desk_source(1);
        spec.scene.things_per_image = (0, 0);
        for seed in 0..10 {
            let s = generate_scene(&spec, seed).unwrap();
            assert!(s.label.data().iter().all(|&l| !spec.taxonomy.is_thing(l as usize)));
        }
    }

    #[test]
    fn scenes_are_valid_samples() {
        let spec = DomainSpec::desk_source(3);
        for seed in 0..5 {
            let s = generate_scene(&spec, seed).unwrap();
            s.validate(8).unwrap();
            assert_eq!(s.dims(), (64, 64));
        }
    }

    #[test]
    fn thing_weights_drive_pixel_ratio() {
        let tax = ClassTaxonomy::new(
            vec!["ground".into(), "sky".into(), "a".into(), "b".into()],
            vec![Partition::Stuff, Partition::Stuff, Partition::Thing, Partition::Thing],
        )
        .unwrap();
        let mut spec = DomainSpec::desk_source(0);
        spec.taxonomy = tax;
        spec.scene.height = 32;
        spec.scene.width = 32;
        spec.scene.thing_weights = vec![0.9, 0.1];
        let mut counts = [0u64; 2];
        for seed in 0..1000 {
            let s = generate_scene(&spec, seed).unwrap();
            for &l in s.label.data() {
                if l >= 2 {
                    counts[l as usize - 2] += 1;
                }
            }
        }
        let total = (counts[0] + counts[1]) as f64;
        let ratio = [counts[0] as f64 / total, counts[1] as f64 / total];
        assert!((ratio[0] - 0.9).abs() <= 0.2 * 0.9, "{ratio:?}");
        assert!((ratio[1] - 0.1).abs() <= 0.2 * 0.1, "{ratio:?}");
    }

    #[test]
    fn zero_shift_is_identity_on_pixels() {
        let spec = DomainSpec::desk_source(5);
        let s = generate_scene(&spec, 9).unwrap();
        let t = apply_domain_shift(&s, &ShiftParams::identity(), 1).unwrap();
        assert_eq!(t.image, s.image);
        assert_eq!(t.label, s.label);
        assert_eq!(t.domain, Domain::Target);
    }

    #[test]
    fn affine_on_constant_image() {
        let label = LabelMap::filled(4, 4, 0);
        let s = SegSample::new("c", Domain::Source, Tensor::full(&[4, 4, 3], 0.5f32), label).unwrap();
        let shift = ShiftParams { gain: [0.5; 3], bias: [0.25; 3], noise_amplitude: 0.0, blur_sigma: 0.0 };
        let t = apply_domain_shift(&s, &shift, 0).unwrap();
        assert!(t.image.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn shift_never_touches_labels() {
        let spec = DomainSpec::desk_source(5);
        let s = generate_scene(&spec, 11).unwrap();
        let t = apply_domain_shift(&s, &ShiftParams::desk_target(), 2).unwrap();
        assert_eq!(t.label, s.label);
        assert_ne!(t.image, s.image);
        t.validate(8).unwrap();
    }

    #[test]
    fn shift_requires_source_input() {
        let spec = DomainSpec::desk_source(5);
        let s = generate_scene(&spec, 11).unwrap();
        let t = apply_domain_shift(&s, &ShiftParams::identity(), 2).unwrap();
        assert!(apply_domain_shift(&t, &ShiftParams::identity(), 2).is_err());
    }

    #[test]
    fn mismatched_thing_weights_rejected() {
        let mut spec = DomainSpec::desk_source(5);
        spec.scene.thing_weights = vec![1.0];
        assert!(generate_scene(&spec, 0).is_err());
    }
}
