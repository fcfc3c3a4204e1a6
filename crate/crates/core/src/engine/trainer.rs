use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentConfig};
use super::mix::classmix;
use super::optim::{adamw_step, ema_update, group_lr, lr_at, AdamState, AdamWParams, ScheduleConfig};
use super::pseudo::{confidence_fraction, softmax_probs, PseudoLabel};
use crate::data::{frequencies_of, nearest_index, ClassTaxonomy, Domain, LabelMap, RareClassSampler, SegSample};
use crate::error::{Error, Result};
use crate::losses::{
    feature_distance, gamma_from_confidence, grid_features, info_nce, mixed_cl, mixed_coefficients, mixed_pool_rule,
    multires_cl, sample_pairs, source_cl, total_loss, ClConfig, GridLabels, LossTerms, PairSet, Resolution,
};
use crate::multires::{
    bundle_at, entropy_crop, entropy_map, footprint, random_box, sliding_logits, CropBox, MultiresConfig,
};
use crate::network::{classify, encode, forward, fuse, infer, predict_weight_map, Bound, ModelParams, NetConfig};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiresMode {
    Off,
    LrOnly,
    LrHrSum,
    LrHrWeighted,
}

/// Switches spanning the ablation axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeConfig {
    pub cl_on: bool,
    /// Scale target-anchor terms by Γ; otherwise by 1.
    pub cl_weighted: bool,
    pub multires: MultiresMode,
    /// Choose the HR crop of mixed images by maximum teacher entropy.
    pub entropy_crop: bool,
}

impl Default for ModeConfig {
    fn default() -> Self {
        ModeConfig { cl_on: true, cl_weighted: true, multires: MultiresMode::Off, entropy_crop: false }
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub net: NetConfig,
    pub cl: ClConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub mode: ModeConfig,
    pub multires: MultiresConfig,
    /// Contrastive grid `[rows, cols]`.
    pub cl_grid: [usize; 2],
    pub rcs_temperature: f64,
}

impl TrainConfig {
    pub fn desk_default(num_classes: usize) -> Self {
        TrainConfig {
            seed: 0,
            net: NetConfig::desk_default(num_classes),
            cl: ClConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
            mode: ModeConfig::default(),
            multires: MultiresConfig::default(),
            cl_grid: [16, 16],
            rcs_temperature: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.cl.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        self.multires.validate()?;
        if self.cl_grid.contains(&0) {
            return Err(Error::Config("cl_grid dims must be ≥ 1".into()));
        }
        if !(self.rcs_temperature > 0.0) {
            return Err(Error::Config(format!("rcs_temperature must be > 0, got {}", self.rcs_temperature)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub ce_s: f64,
    pub ce_t: f64,
    pub cl_s: f64,
    pub cl_m: f64,
    pub fd: f64,
    pub total: f64,
    /// Mean Γ of the batch's teacher predictions (reported whether or not it is applied).
    pub gamma: f64,
    pub conf_frac: f64,
    pub lr_enc: f64,
    pub lr_dec: f64,
}

/// Student, EMA teacher, frozen reference, optimizer moments, step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub reference: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub iteration: u64,
}

impl TrainerState {
    /// Student, teacher and reference all start from the seeded init.
    pub fn init(net: &NetConfig, seed: u64) -> Result<Self> {
        let student = ModelParams::init(net, seed)?;
        Ok(TrainerState {
            teacher: student.clone(),
            reference: student.clone(),
            adam: AdamState::zeros(&student),
            student,
            iteration: 0,
        })
    }
}

/// Random stream of iteration `iteration`; stream 0 is left to parameter init.
pub fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(iteration + 1);
    r
}

fn resize_origin(origin: &[bool], h: usize, w: usize, oh: usize, ow: usize) -> Vec<Domain> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = nearest_index(oy, oh, h);
        for ox in 0..ow {
            let sx = nearest_index(ox, ow, w);
            out.push(if origin[sy * w + sx] { Domain::Source } else { Domain::Target });
        }
    }
    out
}

fn crop_mask(mask: &[bool], w: usize, b: CropBox) -> Vec<bool> {
    (b.top..b.bottom()).flat_map(|y| mask[y * w + b.left..y * w + b.right()].iter().copied()).collect()
}

/// Teacher view of one target image: pseudo-labels plus the probabilities behind them.
pub struct TeacherView {
    pub pseudo: PseudoLabel,
    pub probs: Vec<f64>,
}

/// Teacher prediction used for pseudo-labels: plain forward, or sliding
/// HR windows in multi-resolution modes.
pub fn teacher_view(teacher: &ModelParams<f32>, image: &Tensor<f32>, cfg: &TrainConfig) -> Result<TeacherView> {
    let logits = match cfg.mode.multires {
        MultiresMode::Off => infer(teacher, image)?.1,
        _ => {
            let (h, w, _) = image.dims3()?;
            let win = cfg.multires.hr_dims(h, w);
            let stride = ((win.0 / 2).max(1), (win.1 / 2).max(1));
            sliding_logits(image, win, stride, |crop| Ok(infer(teacher, crop)?.1))?.0
        }
    };
    let (h, w, c) = logits.dims3()?;
    let probs = softmax_probs(&logits)?;
    Ok(TeacherView { pseudo: PseudoLabel::from_probs(&probs, h, w, c)?, probs })
}

/// Student logits used for evaluation: plain forward, or in multi-resolution
/// modes the mean of the upsampled LR prediction and sliding HR windows.
pub fn predict_logits(params: &ModelParams<f32>, image: &Tensor<f32>, cfg: &TrainConfig) -> Result<Tensor<f32>> {
    if cfg.mode.multires == MultiresMode::Off {
        return Ok(infer(params, image)?.1);
    }
    let (h, w, _) = image.dims3()?;
    let win = cfg.multires.hr_dims(h, w);
    let stride = ((win.0 / 2).max(1), (win.1 / 2).max(1));
    let (slide, _) = sliding_logits(image, win, stride, |crop| Ok(infer(params, crop)?.1))?;
    let bundle = bundle_at(image, cfg.multires.lr_scale, CropBox::full(h, w))?;
    let mut g = Graph::inference();
    let p = params.bind(&mut g, false);
    let x = g.constant(bundle.lr_image);
    let feats = encode(&mut g, &p, x)?;
    let fused = fuse(&mut g, &p, &feats)?;
    let lr = classify(&mut g, &p, fused, h, w)?;
    let data = g.value(lr).data().iter().zip(slide.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    Tensor::new(vec![h, w, slide.shape()[2]], data)
}

#[derive(Clone, Copy)]
enum ClKind {
    Source,
    Mixed { gamma: f64 },
}

struct BranchOut {
    ce: Var,
    cl: Option<Var>,
    /// Student features and the input they came from, for the feature-distance term.
    fused: Var,
    fd_input: Tensor<f32>,
}

struct Ctx<'a> {
    cfg: &'a TrainConfig,
    taxonomy: &'a ClassTaxonomy,
    /// Every pair set sampled during the step.
    pairs: RefCell<Vec<PairSet>>,
}

impl Ctx<'_> {
    fn grid_labels(&self, label: &LabelMap, origin: &[bool], resolution: Resolution) -> Result<GridLabels> {
        let [gh, gw] = self.cfg.cl_grid;
        let (h, w) = label.dims();
        let labels = label.resize_nearest(gh, gw).data().to_vec();
        GridLabels::new(gh, gw, labels, resize_origin(origin, h, w, gh, gw), resolution)
    }

    #[allow(clippy::too_many_arguments)]
    fn single_res(
        &self,
        g: &mut Graph<f32>,
        sp: &Bound,
        image: &Tensor<f32>,
        label: &LabelMap,
        origin: &[bool],
        kind: ClKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<BranchOut> {
        let x = g.constant(image.clone());
        let f = forward(g, sp, x)?;
        let ce = g.cross_entropy(f.logits, label.data())?;
        let cl = if self.cfg.mode.cl_on {
            let [gh, gw] = self.cfg.cl_grid;
            let feats = grid_features(g, f.fused, gh, gw)?;
            let grid = self.grid_labels(label, origin, Resolution::Lr)?;
            let (loss, pairs) = match kind {
                ClKind::Source => source_cl(g, feats, &grid, self.taxonomy, &self.cfg.cl, rng)?,
                ClKind::Mixed { gamma } => mixed_cl(g, feats, &grid, gamma, self.taxonomy, &self.cfg.cl, rng)?,
            };
            self.pairs.borrow_mut().push(pairs);
            Some(loss)
        } else {
            None
        };
        Ok(BranchOut { ce, cl, fused: f.fused, fd_input: image.clone() })
    }

    #[allow(clippy::too_many_arguments)]
    fn multi_res(
        &self,
        g: &mut Graph<f32>,
        sp: &Bound,
        image: &Tensor<f32>,
        label: &LabelMap,
        origin: &[bool],
        kind: ClKind,
        hr_box: Option<CropBox>,
        rng: &mut ChaCha8Rng,
    ) -> Result<BranchOut> {
        let mr = &self.cfg.multires;
        let (h, w) = label.dims();
        let (hh, hw) = mr.hr_dims(h, w);
        let hr_box = match hr_box {
            Some(b) => b,
            None => random_box(h, w, hh, hw, rng)?,
        };
        let bundle = bundle_at(image, mr.lr_scale, hr_box)?;

        let x_lr = g.constant(bundle.lr_image.clone());
        let feats_lr = encode(g, sp, x_lr)?;
        let fused_lr = fuse(g, sp, &feats_lr)?;
        let logits_lr = classify(g, sp, fused_lr, h, w)?;
        let ce_lr = g.cross_entropy(logits_lr, label.data())?;

        let x_hr = g.constant(bundle.hr_image.clone());
        let f_hr = forward(g, sp, x_hr)?;
        let hr_label = label.crop(hr_box.top, hr_box.left, hr_box.height, hr_box.width);
        let ce_hr = g.cross_entropy(f_hr.logits, hr_label.data())?;
        let ce_sum = g.add(ce_lr, ce_hr)?;
        let ce = g.scale(ce_sum, 0.5)?;

        let cl = if self.cfg.mode.cl_on {
            let [gh, gw] = self.cfg.cl_grid;
            let a_lr = gh * gw;
            let (gamma, source_only) = match kind {
                ClKind::Source => (1.0, true),
                ClKind::Mixed { gamma } => (gamma, false),
            };
            let mixed_rule = mixed_pool_rule(self.cfg.cl.mixed_source_pool);
            let rule = |a: Domain, p: Domain| if source_only { p == Domain::Source } else { mixed_rule(a, p) };
            let lr_grid = self.grid_labels(label, origin, Resolution::Lr)?;
            let lr_feats = grid_features(g, fused_lr, gh, gw)?;
            let pairs_lr = sample_pairs(&lr_grid, &lr_grid, self.taxonomy, &self.cfg.cl, rule, |c| c, rng)?;
            Some(match self.cfg.mode.multires {
                MultiresMode::LrOnly | MultiresMode::Off => {
                    let coeffs = mixed_coefficients(&pairs_lr, gamma, a_lr);
                    let loss = info_nce(g, lr_feats, lr_feats, None, &pairs_lr, &coeffs, self.cfg.cl.tau)?;
                    self.pairs.borrow_mut().push(pairs_lr);
                    loss
                }
                MultiresMode::LrHrSum | MultiresMode::LrHrWeighted => {
                    let hr_origin = crop_mask(origin, w, hr_box);
                    let hr_grid = self.grid_labels(&hr_label, &hr_origin, Resolution::Hr)?;
                    let hr_feats = grid_features(g, f_hr.fused, gh, gw)?;
                    let fp = footprint(Some(hr_box), (h, w), (gh, gw), (gh, gw))?;
                    let pairs_hr =
                        sample_pairs(&hr_grid, &lr_grid, self.taxonomy, &self.cfg.cl, rule, |c| fp.hr_to_lr[c], rng)?;
                    let mut pairs = pairs_lr;
                    pairs.extend_from(pairs_hr, a_lr)?;
                    let store = g.concat_rows(&[lr_feats, hr_feats])?;
                    let delta = if self.cfg.mode.multires == MultiresMode::LrHrWeighted {
                        Some(predict_weight_map(g, sp, fused_lr, gh, gw)?)
                    } else {
                        None
                    };
                    let loss = multires_cl(
                        g,
                        store,
                        lr_feats,
                        &pairs,
                        delta.map(|d| (d, &fp.lr_in_box[..])),
                        gamma,
                        a_lr,
                        self.cfg.cl.tau,
                    )?;
                    self.pairs.borrow_mut().push(pairs);
                    loss
                }
            })
        } else {
            None
        };
        Ok(BranchOut { ce, cl, fused: fused_lr, fd_input: bundle.lr_image })
    }
}

fn mean_var(g: &mut Graph<f32>, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else { return Ok(None) };
    let mut acc = first;
    for &v in rest {
        acc = g.add(acc, v)?;
    }
    Ok(Some(g.scale(acc, 1.0 / vars.len() as f32)?))
}

/// One optimisation step on explicit batches. Target ground truth is never
/// an input: only target images are passed.
pub fn train_step(
    state: &mut TrainerState,
    source_batch: &[&SegSample],
    target_batch: &[&Tensor<f32>],
    cfg: &TrainConfig,
    taxonomy: &ClassTaxonomy,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    Ok(train_step_traced(state, source_batch, target_batch, cfg, taxonomy, rng)?.0)
}

/// [`train_step`] that also returns every contrastive pair set it sampled.
pub fn train_step_traced(
    state: &mut TrainerState,
    source_batch: &[&SegSample],
    target_batch: &[&Tensor<f32>],
    cfg: &TrainConfig,
    taxonomy: &ClassTaxonomy,
    rng: &mut ChaCha8Rng,
) -> Result<(StepMetrics, Vec<PairSet>)> {
    if source_batch.is_empty() || source_batch.len() != target_batch.len() {
        return Err(Error::invalid(format!(
            "train-step: {} source vs {} target images",
            source_batch.len(),
            target_batch.len()
        )));
    }
    let (lr_enc, lr_dec) = lr_at(state.iteration, &cfg.schedule)?;
    let ctx = Ctx { cfg, taxonomy, pairs: RefCell::new(Vec::new()) };
    let multires = cfg.mode.multires != MultiresMode::Off;

    let mut g = Graph::<f32>::new();
    let sp = state.student.bind(&mut g, true);
    let (mut ce_s, mut ce_t, mut cl_s, mut cl_m, mut fd) = (vec![], vec![], vec![], vec![], vec![]);
    let (mut gamma_sum, mut conf_sum) = (0.0, 0.0);

    for (&src, &tgt) in source_batch.iter().zip(target_batch) {
        // teacher first: pseudo-labels and Γ never see the student
        let view = teacher_view(&state.teacher, tgt, cfg)?;
        let gamma = gamma_from_confidence(&view.pseudo.confidence, cfg.cl.beta)?;
        gamma_sum += gamma;
        conf_sum += confidence_fraction(&view.pseudo, cfg.cl.beta);
        let gamma_used = if cfg.mode.cl_weighted { gamma } else { 1.0 };

        let all_source = vec![true; src.label.data().len()];
        let s = if multires {
            ctx.multi_res(&mut g, &sp, &src.image, &src.label, &all_source, ClKind::Source, None, rng)?
        } else {
            ctx.single_res(&mut g, &sp, &src.image, &src.label, &all_source, ClKind::Source, rng)?
        };
        ce_s.push(s.ce);
        cl_s.extend(s.cl);
        let (ref_fused, _) = infer(&state.reference, &s.fd_input)?;
        let ref_var = g.constant(ref_fused);
        let rows = g.value(s.fused).len() / g.shape(s.fused)[2];
        fd.push(feature_distance(&mut g, s.fused, ref_var, &vec![true; rows])?);

        let mix = classmix(src, tgt, &view.pseudo, rng)?;
        let mixed_image = augment(&mix.image, &cfg.augment, rng)?;
        let kind = ClKind::Mixed { gamma: gamma_used };
        let m = if multires {
            let hr_box = if cfg.mode.entropy_crop {
                let (h, w) = mix.label.dims();
                let ent = entropy_map(&view.probs, cfg.net.num_classes)?;
                Some(entropy_crop(&ent, h, w, cfg.multires.entropy_crop_dims(h, w), cfg.multires.entropy_stride(h, w))?)
            } else {
                None
            };
            ctx.multi_res(&mut g, &sp, &mixed_image, &mix.label, &mix.origin, kind, hr_box, rng)?
        } else {
            ctx.single_res(&mut g, &sp, &mixed_image, &mix.label, &mix.origin, kind, rng)?
        };
        ce_t.push(m.ce);
        cl_m.extend(m.cl);
    }

    let terms = LossTerms {
        ce_s: mean_var(&mut g, &ce_s)?,
        ce_t: mean_var(&mut g, &ce_t)?,
        cl_s: mean_var(&mut g, &cl_s)?,
        cl_m: mean_var(&mut g, &cl_m)?,
        fd: if cfg.cl.lambda_fd > 0.0 { mean_var(&mut g, &fd)? } else { None },
    };
    let total = total_loss(&mut g, &terms, &(&cfg.cl).into())?;
    let value = |g: &Graph<f32>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0] as f64);
    let n = source_batch.len() as f64;
    let metrics = StepMetrics {
        iteration: state.iteration + 1,
        ce_s: value(&g, terms.ce_s),
        ce_t: value(&g, terms.ce_t),
        cl_s: value(&g, terms.cl_s),
        cl_m: value(&g, terms.cl_m),
        fd: value(&g, terms.fd),
        total: value(&g, Some(total)),
        gamma: gamma_sum / n,
        conf_frac: conf_sum / n,
        lr_enc,
        lr_dec,
    };

    let mut grads = g.backward(total)?;
    let named: BTreeMap<String, Tensor<f32>> =
        sp.iter().filter_map(|(name, v)| grads.take(v).map(|t| (name.to_string(), t))).collect();
    adamw_step(
        &mut state.student,
        &named,
        &mut state.adam,
        group_lr(lr_enc, lr_dec),
        &AdamWParams::from(&cfg.schedule),
    )?;
    ema_update(&mut state.teacher, &state.student, cfg.schedule.ema_alpha)?;
    state.iteration += 1;
    Ok((metrics, ctx.pairs.into_inner()))
}

/// Training loop over a labelled source set and unlabelled target images.
pub struct Trainer {
    cfg: TrainConfig,
    taxonomy: ClassTaxonomy,
    source: Vec<SegSample>,
    targets: Vec<Tensor<f32>>,
    sampler: RareClassSampler,
    state: TrainerState,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        taxonomy: ClassTaxonomy,
        source: Vec<SegSample>,
        targets: Vec<Tensor<f32>>,
    ) -> Result<Self> {
        let state = TrainerState::init(&cfg.net, cfg.seed)?;
        Self::with_state(cfg, taxonomy, source, targets, state)
    }

    pub fn with_state(
        cfg: TrainConfig,
        taxonomy: ClassTaxonomy,
        source: Vec<SegSample>,
        targets: Vec<Tensor<f32>>,
        state: TrainerState,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.net.num_classes != taxonomy.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes, taxonomy {}",
                cfg.net.num_classes,
                taxonomy.num_classes()
            )));
        }
        if source.is_empty() || targets.is_empty() {
            return Err(Error::invalid("training needs at least one source and one target image"));
        }
        let freqs = frequencies_of(source.iter().map(|s| &s.label), taxonomy.num_classes())?;
        let sampler = RareClassSampler::new(&source, &freqs, cfg.rcs_temperature)?;
        Ok(Trainer { cfg, taxonomy, source, targets, sampler, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn taxonomy(&self) -> &ClassTaxonomy {
        &self.taxonomy
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.schedule.total_iters
    }

    /// RCS-picked source batch, uniform target batch, one update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        Ok(self.step_traced()?.0)
    }

    /// [`Trainer::step`] plus the contrastive pair sets it sampled.
    pub fn step_traced(&mut self) -> Result<(StepMetrics, Vec<PairSet>)> {
        let mut rng = step_rng(self.cfg.seed, self.state.iteration);
        let b = self.cfg.schedule.batch_size;
        let src: Vec<usize> = (0..b).map(|_| self.sampler.pick(&mut rng).1).collect();
        let tgt: Vec<usize> = (0..b).map(|_| rng.gen_range(0..self.targets.len())).collect();
        let src_batch: Vec<&SegSample> = src.iter().map(|&i| &self.source[i]).collect();
        let tgt_batch: Vec<&Tensor<f32>> = tgt.iter().map(|&i| &self.targets[i]).collect();
        train_step_traced(&mut self.state, &src_batch, &tgt_batch, &self.cfg, &self.taxonomy, &mut rng)
    }
}
