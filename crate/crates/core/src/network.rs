//! Student/teacher segmentation model.
//!
//! Four-stage convolutional encoder (strides 2, 4, 8, 16), a fusion block
//! that projects every stage to `embed_dim`, resizes to the stride-4 grid,
//! concatenates and mixes with a 3×3 conv, a 1×1 classifier, and a sigmoid
//! weight head used by multi-resolution contrastive learning.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Total downscale of the encoder; input sides must be multiples of it.
pub const ENCODER_STRIDE: usize = 16;
/// Downscale of the fused map relative to the input.
pub const FUSED_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub widths: [usize; 4],
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl NetConfig {
    pub fn desk_default(num_classes: usize) -> Self {
        NetConfig { widths: [32, 64, 128, 256], embed_dim: 512, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "network widths {:?} / embed_dim {} must be ≥ 1",
                self.widths, self.embed_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("network needs ≥ 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` for every parameter, in a fixed order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let e = self.embed_dim;
        let mut out = Vec::new();
        let mut cin = 3;
        for (s, &w) in self.widths.iter().enumerate() {
            out.push((format!("enc{s}.conv1.w"), vec![3, 3, cin, w], 9 * cin));
            out.push((format!("enc{s}.conv1.b"), vec![w], 9 * cin));
            out.push((format!("enc{s}.conv2.w"), vec![3, 3, w, w], 9 * w));
            out.push((format!("enc{s}.conv2.b"), vec![w], 9 * w));
            cin = w;
        }
        for (s, &w) in self.widths.iter().enumerate() {
            out.push((format!("fuse.proj{s}.w"), vec![w, e], w));
            out.push((format!("fuse.proj{s}.b"), vec![e], w));
        }
        out.push(("fuse.mix.w".into(), vec![3, 3, 4 * e, e], 36 * e));
        out.push(("fuse.mix.b".into(), vec![e], 36 * e));
        out.push(("cls.w".into(), vec![e, self.num_classes], e));
        out.push(("cls.b".into(), vec![self.num_classes], e));
        out.push(("weight_head.w".into(), vec![e, 1], e));
        out.push(("weight_head.b".into(), vec![1], e));
        out
    }
}

/// Parameters belonging to the encoder (trained with the encoder learning rate).
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc")
}

/// Named parameter tensors of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: NetConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform `±sqrt(1/fan_in)` init, fully determined by `seed`.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = (1.0 / fan_in as f64).sqrt();
                let t = Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound)));
                (name, t)
            })
            .collect();
        Ok(ModelParams { config: config.clone(), tensors })
    }

    /// Every tensor set to `value`.
    pub fn filled(config: &NetConfig, value: T) -> Result<Self> {
        config.validate()?;
        let tensors = config.layout().into_iter().map(|(name, shape, _)| (name, Tensor::full(&shape, value))).collect();
        Ok(ModelParams { config: config.clone(), tensors })
    }

    /// Assemble from named tensors; names and shapes must match `config` exactly.
    pub fn from_tensors(config: &NetConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if tensors.len() != layout.len() {
            return Err(Error::Checkpoint(format!("{} tensors, model needs {}", tensors.len(), layout.len())));
        }
        for (name, shape, _) in &layout {
            match tensors.get(name) {
                Some(t) if t.shape() == &shape[..] => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!("{name}: shape {:?}, model needs {shape:?}", t.shape())))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
            if !tensors[name].is_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite values")));
            }
        }
        Ok(ModelParams { config: config.clone(), tensors })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Error unless `other` has the same names and shapes.
    pub fn check_same_layout(&self, other: &ModelParams<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape("params", format!("{} vs {} tensors", self.len(), other.len())));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::shape("params", format!("{na} {:?} vs {nb} {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(())
    }

    /// Max elementwise |a − b| over all parameters.
    pub fn max_abs_diff(&self, other: &ModelParams<T>) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|((_, a), (_, b))| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    /// Place every tensor on `g`: as differentiable leaves when `trainable`,
    /// otherwise as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { config: self.config.clone(), vars }
    }
}

/// Parameter handles on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    config: NetConfig,
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for parameters already placed on a graph; names must follow the layout.
    pub fn new(config: NetConfig, vars: BTreeMap<String, Var>) -> Result<Self> {
        let expected = config.layout();
        if vars.len() != expected.len() || expected.iter().any(|(n, _, _)| !vars.contains_key(n)) {
            return Err(Error::invalid(format!("bound parameters do not match the {config:?} layout")));
        }
        Ok(Bound { config, vars })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(ENCODER_STRIDE) || !w.is_multiple_of(ENCODER_STRIDE) {
        return Err(Error::shape("encode", format!("input {h}×{w} must be non-empty multiples of {ENCODER_STRIDE}")));
    }
    Ok(())
}

/// Hierarchical features at strides 2, 4, 8, 16.
pub fn encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, image: Var) -> Result<[Var; 4]> {
    match *g.shape(image) {
        [h, w, 3] => check_input_dims(h, w)?,
        ref s => return Err(Error::shape("encode", format!("image must be H×W×3, got {s:?}"))),
    }
    let mut x = image;
    let mut out = [image; 4];
    for (s, slot) in out.iter_mut().enumerate() {
        let y = g.conv2d(x, p.var(&format!("enc{s}.conv1.w"))?, p.var(&format!("enc{s}.conv1.b"))?, 1)?;
        let y = g.relu(y)?;
        let y = g.conv2d(y, p.var(&format!("enc{s}.conv2.w"))?, p.var(&format!("enc{s}.conv2.b"))?, 2)?;
        x = g.relu(y)?;
        *slot = x;
    }
    Ok(out)
}

/// Fused `H/4 × W/4 × embed_dim` feature map.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, p: &Bound, feats: &[Var; 4]) -> Result<Var> {
    let (gh, gw) = match *g.shape(feats[0]) {
        [h, w, _] => ((h / 2).max(1), (w / 2).max(1)),
        ref s => return Err(Error::shape("fuse", format!("stage-0 features must be H×W×C, got {s:?}"))),
    };
    let mut projected = Vec::with_capacity(4);
    for (s, &f) in feats.iter().enumerate() {
        let y = g.dense(f, p.var(&format!("fuse.proj{s}.w"))?, p.var(&format!("fuse.proj{s}.b"))?)?;
        let y = if g.shape(y)[..2] == [gh, gw] { y } else { g.resize_bilinear(y, gh, gw)? };
        projected.push(y);
    }
    let cat = g.concat_channels(&projected)?;
    g.conv2d(cat, p.var("fuse.mix.w")?, p.var("fuse.mix.b")?, 1)
}

/// Per-pixel class logits at `out_h × out_w`.
pub fn classify<T: Scalar>(g: &mut Graph<T>, p: &Bound, fused: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let logits = g.dense(fused, p.var("cls.w")?, p.var("cls.b")?)?;
    if g.shape(logits)[..2] == [out_h, out_w] {
        return Ok(logits);
    }
    g.resize_bilinear(logits, out_h, out_w)
}

/// `grid_h × grid_w × 1` map in (0, 1), computed from the fused map resized
/// to the contrastive grid.
pub fn predict_weight_map<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    fused: Var,
    grid_h: usize,
    grid_w: usize,
) -> Result<Var> {
    let x = if g.shape(fused)[..2] == [grid_h, grid_w] { fused } else { g.resize_bilinear(fused, grid_h, grid_w)? };
    let z = g.dense(x, p.var("weight_head.w")?, p.var("weight_head.b")?)?;
    g.sigmoid(z)
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub fused: Var,
    pub logits: Var,
}

/// Encoder, fusion and classifier; logits at input resolution.
pub fn forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Forward> {
    let (h, w) = match *g.shape(image) {
        [h, w, _] => (h, w),
        ref s => return Err(Error::shape("forward", format!("image must be H×W×3, got {s:?}"))),
    };
    let feats = encode(g, p, image)?;
    let fused = fuse(g, p, &feats)?;
    let logits = classify(g, p, fused, h, w)?;
    Ok(Forward { fused, logits })
}

/// Gradient-free forward returning `(fused, logits)` values.
pub fn infer<T: Scalar>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::inference();
    let p = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let f = forward(&mut g, &p, x)?;
    Ok((g.value(f.fused).clone(), g.value(f.logits).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig { widths: [4, 4, 8, 8], embed_dim: 6, num_classes: 3 }
    }

    #[test]
    fn desk_shapes() {
        let cfg = NetConfig::desk_default(8);
        let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let mut g = Graph::inference();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[64, 64, 3], 0.5f32));
        let feats = encode(&mut g, &b, x).unwrap();
        let shapes: Vec<_> = feats.iter().map(|&f| g.shape(f).to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 32, 32], vec![16, 16, 64], vec![8, 8, 128], vec![4, 4, 256]]);
        let fused = fuse(&mut g, &b, &feats).unwrap();
        assert_eq!(g.shape(fused), &[16, 16, 512]);
        let logits = classify(&mut g, &b, fused, 64, 64).unwrap();
        assert_eq!(g.shape(logits), &[64, 64, 8]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let p = ModelParams::<f64>::init(&small(), 0).unwrap();
        let mut g = Graph::inference();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[24, 32, 3]));
        assert!(matches!(encode(&mut g, &b, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_params_give_zero_maps_and_half_weights() {
        let p = ModelParams::<f64>::filled(&small(), 0.0).unwrap();
        let mut g = Graph::inference();
        let b = p.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[32, 32, 3]));
        let f = forward(&mut g, &b, x).unwrap();
        assert!(g.value(f.fused).data().iter().all(|&v| v == 0.0));
        let w = predict_weight_map(&mut g, &b, f.fused, 4, 4).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::<f32>::init(&small(), 5).unwrap();
        assert_eq!(a, ModelParams::init(&small(), 5).unwrap());
        assert_ne!(a, ModelParams::init(&small(), 6).unwrap());
        let w = a.get("enc1.conv1.w").unwrap();
        let bound = (1.0f32 / 36.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn from_tensors_validates_layout() {
        let a = ModelParams::<f32>::init(&small(), 5).unwrap();
        let mut map: BTreeMap<_, _> = a.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        assert_eq!(ModelParams::from_tensors(&small(), map.clone()).unwrap(), a);
        map.insert("cls.b".into(), Tensor::zeros(&[4]));
        assert!(ModelParams::from_tensors(&small(), map).is_err());
    }
}
