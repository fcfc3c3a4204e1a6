//! Self-checks behind `cluda grad-check` and `cluda oracle-check`.
//!
//! Gradient checks compare tape gradients with central differences in f64.
//! Oracle checks compare library results with direct re-computations.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ClassTaxonomy, Domain, LabelMap, SegSample, IGNORE};
use crate::engine::{classmix_with_classes, ema_update};
use crate::error::Result;
use crate::eval::{confusion, miou};
use crate::losses::{
    gamma_from_confidence, grid_features, info_nce_mean, mixed_cl, multires_cl, sample_pairs, ClConfig, GridLabels,
    PairSet, Resolution,
};
use crate::multires::{entropy_crop, window_starts};
use crate::network::{classify, encode, forward, fuse, predict_weight_map, Bound, ModelParams, NetConfig};
use crate::tensor::{check_gradients, Graph, PairIndex, Tensor, Var};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    /// Worst error seen: relative for gradients, absolute for oracles.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn pass(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} instances={} worst={:.3e} tol={:.0e}",
            if self.pass() { "pass" } else { "FAIL" },
            self.name,
            self.instances,
            self.worst,
            self.tolerance
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ w ⊙ y` with fixed random `w`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = g.constant(w.clone());
    let p = g.mul(y, c)?;
    g.sum(p)
}

fn tiny_taxonomy() -> ClassTaxonomy {
    ClassTaxonomy::desk_default()
}

/// Labels drawn from two stuff and two thing classes so every class has company.
fn grid_labels(rng: &mut ChaCha8Rng, cells: usize) -> Vec<u8> {
    (0..cells).map(|_| *[0u8, 1, 5, 6].choose(rng).expect("non-empty")).collect()
}

fn small_cl() -> ClConfig {
    ClConfig { anchors_per_class: 3, positives_per_anchor: 3, negatives_per_anchor: 5, ..ClConfig::default() }
}

/// Tiny network: every head stays cheap enough for finite differences.
fn tiny_net() -> NetConfig {
    NetConfig { widths: [2, 2, 3, 3], embed_dim: 3, num_classes: 3 }
}

/// Bind `params` on `g`: names in `live` map to the given leaves, the rest are constants.
fn bind_mixed(g: &mut Graph<f64>, params: &ModelParams<f64>, live: &[(&str, Var)]) -> Result<Bound> {
    let mut vars = BTreeMap::new();
    for (name, t) in params.iter() {
        let v = match live.iter().find(|(n, _)| *n == name) {
            Some(&(_, v)) => v,
            None => g.constant(t.clone()),
        };
        vars.insert(name.to_string(), v);
    }
    Bound::new(params.config().clone(), vars)
}

type GradCase = fn(&mut ChaCha8Rng) -> Result<f64>;

fn kernel_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("kernel conv2d", |r| {
            let (h, w, ci, co) = (r.gen_range(2..6), r.gen_range(2..6), r.gen_range(1..4), r.gen_range(1..4));
            let stride = r.gen_range(1..3);
            let x = uniform(r, &[h, w, ci], -1.0, 1.0);
            let k = uniform(r, &[3, 3, ci, co], -1.0, 1.0);
            let b = uniform(r, &[co], -1.0, 1.0);
            let wt = uniform(r, &[h.div_ceil(stride), w.div_ceil(stride), co], -1.0, 1.0);
            check_gradients(&[x, k, b], GRAD_EPS, |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride)?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel dense", |r| {
            let (n, ci, co) = (r.gen_range(1..6), r.gen_range(1..5), r.gen_range(1..5));
            let x = uniform(r, &[2, n, ci], -1.0, 1.0);
            let k = uniform(r, &[ci, co], -1.0, 1.0);
            let b = uniform(r, &[co], -1.0, 1.0);
            let wt = uniform(r, &[2, n, co], -1.0, 1.0);
            check_gradients(&[x, k, b], GRAD_EPS, |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel matmul", |r| {
            let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            let t = r.gen_bool(0.5);
            let a = uniform(r, &[m, k], -1.0, 1.0);
            let b = uniform(r, &if t { [n, k] } else { [k, n] }, -1.0, 1.0);
            let wt = uniform(r, &[m, n], -1.0, 1.0);
            check_gradients(&[a, b], GRAD_EPS, |g, v| {
                let y = g.matmul(v[0], v[1], t)?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel relu", |r| {
            // keep clear of the kink
            let x = Tensor::from_fn(&[7], |_| {
                let m = r.gen_range(0.05..1.0);
                if r.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            let wt = uniform(r, &[7], -1.0, 1.0);
            check_gradients(&[x], GRAD_EPS, |g, v| {
                let y = g.relu(v[0])?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel sigmoid", |r| unary(r, -3.0, 3.0, |g, x| g.sigmoid(x))),
        ("kernel exp", |r| unary(r, -2.0, 2.0, |g, x| g.exp(x))),
        ("kernel log", |r| unary(r, 0.2, 3.0, |g, x| g.log(x))),
        ("kernel affine", |r| {
            let (a, b) = (r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.0));
            unary(r, -1.0, 1.0, move |g, x| g.affine(x, a, b))
        }),
        ("kernel scale", |r| {
            let a = r.gen_range(-2.0..2.0);
            unary(r, -1.0, 1.0, move |g, x| g.scale(x, a))
        }),
        ("kernel add", |r| binary(r, |g, a, b| g.add(a, b))),
        ("kernel mul", |r| binary(r, |g, a, b| g.mul(a, b))),
        ("kernel concat-channels", |r| {
            let (h, w) = (r.gen_range(1..4), r.gen_range(1..4));
            let (c1, c2) = (r.gen_range(1..4), r.gen_range(1..4));
            let a = uniform(r, &[h, w, c1], -1.0, 1.0);
            let b = uniform(r, &[h, w, c2], -1.0, 1.0);
            let wt = uniform(r, &[h, w, c1 + c2], -1.0, 1.0);
            check_gradients(&[a, b], GRAD_EPS, |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel concat-rows", |r| {
            let (n1, n2, c) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
            let a = uniform(r, &[n1, c], -1.0, 1.0);
            let b = uniform(r, &[n2, c], -1.0, 1.0);
            let wt = uniform(r, &[n1 + n2, c], -1.0, 1.0);
            check_gradients(&[a, b], GRAD_EPS, |g, v| {
                let y = g.concat_rows(&[v[0], v[1]])?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel softmax", |r| unary(r, -2.0, 2.0, |g, x| g.softmax(x))),
        ("kernel l2-normalize", |r| unary(r, -1.0, 1.0, |g, x| g.l2_normalize(x))),
        ("kernel bilinear-resize", |r| {
            let (h, w, c) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..3));
            let (oh, ow) = (r.gen_range(1..7), r.gen_range(1..7));
            let x = uniform(r, &[h, w, c], -1.0, 1.0);
            let wt = uniform(r, &[oh, ow, c], -1.0, 1.0);
            check_gradients(&[x], GRAD_EPS, |g, v| {
                let y = g.resize_bilinear(v[0], oh, ow)?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel sum", |r| {
            let x = uniform(r, &[3, 4], -1.0, 1.0);
            check_gradients(&[x], GRAD_EPS, |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            })
        }),
        ("kernel mean", |r| {
            let x = uniform(r, &[2, 5], -1.0, 1.0);
            check_gradients(&[x], GRAD_EPS, |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.mean(sq)
            })
        }),
        ("kernel gather-rows", |r| {
            let (n, c) = (r.gen_range(1..5), r.gen_range(1..4));
            let rows: Vec<usize> = (0..r.gen_range(1..7)).map(|_| r.gen_range(0..n)).collect();
            let x = uniform(r, &[n, c], -1.0, 1.0);
            let wt = uniform(r, &[rows.len(), c], -1.0, 1.0);
            check_gradients(&[x], GRAD_EPS, |g, v| {
                let y = g.gather_rows(v[0], &rows)?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel max-pool2", |r| {
            let (h, w, c) = (2 * r.gen_range(1..4), 2 * r.gen_range(1..4), r.gen_range(1..3));
            // distinct, well separated values so the arg-max is stable under ±eps
            let mut vals: Vec<f64> = (0..h * w * c).map(|i| i as f64 * 0.01).collect();
            vals.shuffle(r);
            let x = Tensor::new(vec![h, w, c], vals)?;
            let wt = uniform(r, &[h / 2, w / 2, c], -1.0, 1.0);
            check_gradients(&[x], GRAD_EPS, |g, v| {
                let y = g.max_pool2(v[0])?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel reshape", |r| {
            let x = uniform(r, &[2, 3, 2], -1.0, 1.0);
            let wt = uniform(r, &[6, 2], -1.0, 1.0);
            check_gradients(&[x], GRAD_EPS, |g, v| {
                let y = g.reshape(v[0], &[6, 2])?;
                weighted_sum(g, y, &wt)
            })
        }),
        ("kernel cross-entropy", |r| ce_instance(r)),
        ("kernel info-nce", |r| {
            let (n, m, c) = (r.gen_range(1..4), r.gen_range(2..6), r.gen_range(2..5));
            let anchors: Vec<usize> = (0..n).map(|_| r.gen_range(0..n)).collect();
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for _ in 0..n {
                let mut rows: Vec<usize> = (0..m).collect();
                rows.shuffle(r);
                let k = r.gen_range(1..m);
                positives.push(rows[..k].to_vec());
                negatives.push(rows[k..].to_vec());
            }
            let index = PairIndex { anchors, positives, negatives };
            let coeffs: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..1.0)).collect();
            let tau = r.gen_range(0.1..1.0);
            let a = uniform(r, &[n, c], -1.0, 1.0);
            let p = uniform(r, &[m, c], -1.0, 1.0);
            let w = uniform(r, &[n], 0.1, 1.0);
            check_gradients(&[a, p, w], GRAD_EPS, |g, v| g.info_nce(v[0], v[1], Some(v[2]), &index, &coeffs, tau))
        }),
        ("kernel row-distance", |r| {
            let (n, c) = (r.gen_range(2..6), r.gen_range(1..4));
            let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.6)).collect();
            mask[0] = true;
            let a = uniform(r, &[n, c], -1.0, 1.0);
            let b = uniform(r, &[n, c], -1.0, 1.0);
            check_gradients(&[a, b], GRAD_EPS, |g, v| g.masked_row_distance(v[0], v[1], &mask))
        }),
    ]
}

fn unary(r: &mut ChaCha8Rng, lo: f64, hi: f64, op: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<f64> {
    let shape = [r.gen_range(1..4), r.gen_range(2..5)];
    let x = uniform(r, &shape, lo, hi);
    let wt = uniform(r, &shape, -1.0, 1.0);
    check_gradients(&[x], GRAD_EPS, |g, v| {
        let y = op(g, v[0])?;
        weighted_sum(g, y, &wt)
    })
}

fn binary(r: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let shape = [r.gen_range(1..4), r.gen_range(1..5)];
    let a = uniform(r, &shape, -1.0, 1.0);
    let b = uniform(r, &shape, -1.0, 1.0);
    let wt = uniform(r, &shape, -1.0, 1.0);
    check_gradients(&[a, b], GRAD_EPS, |g, v| {
        let y = op(g, v[0], v[1])?;
        weighted_sum(g, y, &wt)
    })
}

fn random_ce_labels(r: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|_| if r.gen_bool(0.2) { IGNORE } else { r.gen_range(0..c) as u8 }).collect();
    labels[0] = r.gen_range(0..c) as u8;
    labels
}

fn ce_instance(r: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, c) = (r.gen_range(1..8), r.gen_range(1..8), r.gen_range(2..6));
    let labels = random_ce_labels(r, h * w, c);
    let logits = uniform(r, &[h, w, c], -3.0, 3.0);
    check_gradients(&[logits], GRAD_EPS, |g, v| g.cross_entropy(v[0], &labels))
}

struct ClInstance {
    fused: Tensor<f64>,
    grid: GridLabels,
    grid_dims: (usize, usize),
    pair_seed: u64,
}

/// Random feature map at up to 8×8, embedding ≤ 8, labels on a grid ≤ its size.
fn cl_instance(r: &mut ChaCha8Rng, mixed: bool) -> Result<ClInstance> {
    let (fh, fw) = (r.gen_range(3..9), r.gen_range(3..9));
    let (gh, gw) = (r.gen_range(2..=fh), r.gen_range(2..=fw));
    let e = r.gen_range(2..9);
    let labels = grid_labels(r, gh * gw);
    let origins =
        (0..gh * gw).map(|_| if !mixed || r.gen_bool(0.5) { Domain::Source } else { Domain::Target }).collect();
    Ok(ClInstance {
        fused: uniform(r, &[fh, fw, e], -1.0, 1.0),
        grid: GridLabels::new(gh, gw, labels, origins, Resolution::Lr)?,
        grid_dims: (gh, gw),
        pair_seed: r.gen(),
    })
}

fn eq_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("cross-entropy (source/target CE)", |r| ce_instance(r)),
        ("info-nce (mean over sampled anchors)", |r| {
            let inst = cl_instance(r, false)?;
            let tax = tiny_taxonomy();
            let cfg = small_cl();
            let tau = r.gen_range(0.05..1.0);
            let (gh, gw) = inst.grid_dims;
            let pairs = sample_pairs(
                &inst.grid,
                &inst.grid,
                &tax,
                &cfg,
                |_, _| true,
                |c| c,
                &mut ChaCha8Rng::seed_from_u64(inst.pair_seed),
            )?;
            check_gradients(&[inst.fused], GRAD_EPS, |g, v| {
                let f = grid_features(g, v[0], gh, gw)?;
                info_nce_mean(g, f, f, &pairs, tau)
            })
        }),
        ("source contrastive loss", |r| {
            let inst = cl_instance(r, false)?;
            let (tax, cfg) = (tiny_taxonomy(), small_cl());
            let (gh, gw) = inst.grid_dims;
            check_gradients(&[inst.fused], GRAD_EPS, |g, v| {
                let f = grid_features(g, v[0], gh, gw)?;
                let mut rng = ChaCha8Rng::seed_from_u64(inst.pair_seed);
                Ok(crate::losses::source_cl(g, f, &inst.grid, &tax, &cfg, &mut rng)?.0)
            })
        }),
        ("mixed contrastive loss", |r| {
            let inst = cl_instance(r, true)?;
            let (tax, cfg) = (tiny_taxonomy(), small_cl());
            let gamma = r.gen_range(0.0..1.0);
            let (gh, gw) = inst.grid_dims;
            check_gradients(&[inst.fused], GRAD_EPS, |g, v| {
                let f = grid_features(g, v[0], gh, gw)?;
                let mut rng = ChaCha8Rng::seed_from_u64(inst.pair_seed);
                Ok(mixed_cl(g, f, &inst.grid, gamma, &tax, &cfg, &mut rng)?.0)
            })
        }),
        ("total loss", total_instance),
        ("multi-resolution contrastive loss", multires_instance),
    ]
}

fn total_instance(r: &mut ChaCha8Rng) -> Result<f64> {
    let src = cl_instance(r, false)?;
    let mix = cl_instance(r, true)?;
    let (tax, cfg) = (tiny_taxonomy(), small_cl());
    let gamma = r.gen_range(0.0..1.0);
    let lambda = r.gen_range(0.0..1.0);
    let c = r.gen_range(2..5);
    let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
    let (ls, lm) = (random_ce_labels(r, h * w, c), random_ce_labels(r, h * w, c));
    let logits_s = uniform(r, &[h, w, c], -2.0, 2.0);
    let logits_m = uniform(r, &[h, w, c], -2.0, 2.0);
    let reference = uniform(r, src.fused.shape(), -1.0, 1.0);
    let fd_mask = vec![true; src.fused.len() / src.fused.shape()[2]];
    let inputs = [logits_s, logits_m, src.fused.clone(), mix.fused.clone(), reference];
    check_gradients(&inputs, GRAD_EPS, |g, v| {
        let ce_s = g.cross_entropy(v[0], &ls)?;
        let ce_t = g.cross_entropy(v[1], &lm)?;
        let fs = grid_features(g, v[2], src.grid_dims.0, src.grid_dims.1)?;
        let cl_s =
            crate::losses::source_cl(g, fs, &src.grid, &tax, &cfg, &mut ChaCha8Rng::seed_from_u64(src.pair_seed))?.0;
        let fm = grid_features(g, v[3], mix.grid_dims.0, mix.grid_dims.1)?;
        let cl_m = mixed_cl(g, fm, &mix.grid, gamma, &tax, &cfg, &mut ChaCha8Rng::seed_from_u64(mix.pair_seed))?.0;
        let fd = g.masked_row_distance(v[2], v[4], &fd_mask)?;
        let terms = crate::losses::LossTerms {
            ce_s: Some(ce_s),
            ce_t: Some(ce_t),
            cl_s: Some(cl_s),
            cl_m: Some(cl_m),
            fd: Some(fd),
        };
        crate::losses::total_loss(g, &terms, &crate::losses::LossCoefficients::unit(lambda))
    })
}

/// LR and HR feature maps, a pre-sigmoid δ map, a random footprint.
fn multires_instance(r: &mut ChaCha8Rng) -> Result<f64> {
    let (gh, gw) = (r.gen_range(2..5), r.gen_range(2..5));
    let e = r.gen_range(2..9);
    let a = gh * gw;
    let tax = tiny_taxonomy();
    let cfg = small_cl();
    let origins = |r: &mut ChaCha8Rng| -> Vec<Domain> {
        (0..a).map(|_| if r.gen_bool(0.5) { Domain::Source } else { Domain::Target }).collect()
    };
    let lr_origin = origins(r);
    let hr_origin = origins(r);
    let lr_grid = GridLabels::new(gh, gw, grid_labels(r, a), lr_origin, Resolution::Lr)?;
    let hr_grid = GridLabels::new(gh, gw, grid_labels(r, a), hr_origin, Resolution::Hr)?;
    let hr_to_lr: Vec<usize> = (0..a).map(|_| r.gen_range(0..a)).collect();
    let lr_in_box: Vec<bool> = (0..a).map(|_| r.gen_bool(0.5)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(r.gen());
    let mut pairs = sample_pairs(&lr_grid, &lr_grid, &tax, &cfg, |_, _| true, |c| c, &mut rng)?;
    let hr_pairs = sample_pairs(&hr_grid, &lr_grid, &tax, &cfg, |_, _| true, |c| hr_to_lr[c], &mut rng)?;
    pairs.extend_from(hr_pairs, a)?;
    let gamma = r.gen_range(0.0..1.0);
    let tau = r.gen_range(0.05..1.0);
    let inputs = [
        uniform(r, &[gh + 1, gw + 1, e], -1.0, 1.0),
        uniform(r, &[gh, gw, e], -1.0, 1.0),
        uniform(r, &[gh, gw, 1], -2.0, 2.0),
    ];
    check_gradients(&inputs, GRAD_EPS, |g, v| {
        let lr = grid_features(g, v[0], gh, gw)?;
        let hr = grid_features(g, v[1], gh, gw)?;
        let store = g.concat_rows(&[lr, hr])?;
        let delta = g.sigmoid(v[2])?;
        multires_cl(g, store, lr, &pairs, Some((delta, &lr_in_box[..])), gamma, a, tau)
    })
}

fn head_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("head encoder", |r| {
            let p = ModelParams::<f64>::init(&tiny_net(), r.gen())?;
            let names = ["enc0.conv1.w", "enc1.conv2.b", "enc3.conv1.w"];
            let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).expect("layout").clone()).collect();
            inputs.push(uniform(r, &[16, 16, 3], 0.0, 1.0));
            let wts: Vec<Tensor<f64>> =
                [(8, 2), (4, 2), (2, 3), (1, 3)].iter().map(|&(s, c)| uniform(r, &[s, s, c], -1.0, 1.0)).collect();
            check_gradients(&inputs, GRAD_EPS, |g, v| {
                let live: Vec<(&str, Var)> = names.iter().copied().zip(v.iter().copied()).collect();
                let b = bind_mixed(g, &p, &live)?;
                let feats = encode(g, &b, v[3])?;
                let mut total = weighted_sum(g, feats[0], &wts[0])?;
                for (f, wt) in feats.iter().zip(&wts).skip(1) {
                    let s = weighted_sum(g, *f, wt)?;
                    total = g.add(total, s)?;
                }
                Ok(total)
            })
        }),
        ("head fusion", |r| {
            let net = tiny_net();
            let p = ModelParams::<f64>::init(&net, r.gen())?;
            let names = ["fuse.proj0.w", "fuse.proj2.b", "fuse.mix.w", "fuse.mix.b"];
            let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).expect("layout").clone()).collect();
            for (s, &c) in net.widths.iter().enumerate() {
                let side = 8 >> s;
                inputs.push(uniform(r, &[side, side, c], 0.0, 1.0));
            }
            let wt = uniform(r, &[4, 4, net.embed_dim], -1.0, 1.0);
            check_gradients(&inputs, GRAD_EPS, |g, v| {
                let live: Vec<(&str, Var)> = names.iter().copied().zip(v.iter().copied()).collect();
                let b = bind_mixed(g, &p, &live)?;
                let fused = fuse(g, &b, &[v[4], v[5], v[6], v[7]])?;
                weighted_sum(g, fused, &wt)
            })
        }),
        ("head classifier", |r| {
            let net = tiny_net();
            let p = ModelParams::<f64>::init(&net, r.gen())?;
            let (fh, fw) = (r.gen_range(2..5), r.gen_range(2..5));
            let (oh, ow) = (fh * 4, fw * 4);
            let labels = random_ce_labels(r, oh * ow, net.num_classes);
            let inputs = [
                p.get("cls.w").expect("layout").clone(),
                p.get("cls.b").expect("layout").clone(),
                uniform(r, &[fh, fw, net.embed_dim], -1.0, 1.0),
            ];
            check_gradients(&inputs, GRAD_EPS, |g, v| {
                let b = bind_mixed(g, &p, &[("cls.w", v[0]), ("cls.b", v[1])])?;
                let logits = classify(g, &b, v[2], oh, ow)?;
                g.cross_entropy(logits, &labels)
            })
        }),
        ("head feature weight", |r| {
            let net = tiny_net();
            let p = ModelParams::<f64>::init(&net, r.gen())?;
            let (fh, fw) = (r.gen_range(2..6), r.gen_range(2..6));
            let (gh, gw) = (r.gen_range(1..8), r.gen_range(1..8));
            let wt = uniform(r, &[gh, gw, 1], -1.0, 1.0);
            let inputs = [
                p.get("weight_head.w").expect("layout").clone(),
                p.get("weight_head.b").expect("layout").clone(),
                uniform(r, &[fh, fw, net.embed_dim], -1.0, 1.0),
            ];
            check_gradients(&inputs, GRAD_EPS, |g, v| {
                let b = bind_mixed(g, &p, &[("weight_head.w", v[0]), ("weight_head.b", v[1])])?;
                let d = predict_weight_map(g, &b, v[2], gh, gw)?;
                weighted_sum(g, d, &wt)
            })
        }),
        ("head full forward", |r| {
            let net = tiny_net();
            let p = ModelParams::<f64>::init(&net, r.gen())?;
            let names = ["enc2.conv2.w", "fuse.proj1.w", "cls.b"];
            let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).expect("layout").clone()).collect();
            inputs.push(uniform(r, &[16, 16, 3], 0.0, 1.0));
            let labels = random_ce_labels(r, 256, net.num_classes);
            check_gradients(&inputs, GRAD_EPS, |g, v| {
                let live: Vec<(&str, Var)> = names.iter().copied().zip(v.iter().copied()).collect();
                let b = bind_mixed(g, &p, &live)?;
                let f = forward(g, &b, v[3])?;
                g.cross_entropy(f.logits, &labels)
            })
        }),
    ]
}

/// Every gradient case at `instances` random instances each.
pub fn grad_check(seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    let cases = kernel_cases().into_iter().chain(eq_cases()).chain(head_cases());
    let mut out = Vec::new();
    for (i, (name, case)) in cases.enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(case(&mut rng)?);
        }
        out.push(CheckOutcome { name: name.to_string(), instances, worst, tolerance: GRAD_TOL });
    }
    Ok(out)
}

/// Plain double-loop InfoNCE over a pair set: `Σ_i coeff_i · mean_p -log(e^{s_p} / (e^{s_p} + Σ_n e^{s_n}))`.
fn brute_force_nce(anchors: &Tensor<f64>, pool: &Tensor<f64>, pairs: &PairSet, coeffs: &[f64], tau: f64) -> f64 {
    let c = anchors.shape()[1];
    let dot = |i: usize, j: usize| -> f64 {
        (0..c).map(|k| anchors.data()[i * c + k] * pool.data()[j * c + k]).sum::<f64>() / tau
    };
    let mut total = 0.0;
    for (k, a) in pairs.anchors.iter().enumerate() {
        let neg: f64 = pairs.negatives[k].iter().map(|&n| dot(a.row, n).exp()).sum();
        let mut acc = 0.0;
        for &p in &pairs.positives[k] {
            let e = dot(a.row, p).exp();
            acc += -(e / (e + neg)).ln();
        }
        total += coeffs[k] * acc / pairs.positives[k].len() as f64;
    }
    total
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor<f64> {
    let mut t = uniform(r, &[n, c], -1.0, 1.0);
    for row in t.data_mut().chunks_mut(c) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn oracle_infonce(r: &mut ChaCha8Rng) -> Result<f64> {
    let side = r.gen_range(3..7);
    let a = side * side;
    let e = r.gen_range(2..9);
    let grid = GridLabels::uniform(side, side, grid_labels(r, a), Domain::Source, Resolution::Lr)?;
    let pairs = sample_pairs(&grid, &grid, &tiny_taxonomy(), &small_cl(), |_, _| true, |c| c, r)?;
    let feats = unit_rows(r, a, e);
    let coeffs: Vec<f64> = (0..pairs.len()).map(|_| r.gen_range(0.0..1.0)).collect();
    let tau = r.gen_range(0.05..1.0);
    let mut g = Graph::inference();
    let f = g.constant(feats.clone());
    let l = crate::losses::info_nce(&mut g, f, f, None, &pairs, &coeffs, tau)?;
    Ok((g.value(l).data()[0] - brute_force_nce(&feats, &feats, &pairs, &coeffs, tau)).abs())
}

fn oracle_gamma(r: &mut ChaCha8Rng) -> Result<f64> {
    let n = r.gen_range(1..200);
    let beta = r.gen_range(0.1..0.99);
    let conf: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
    let count = conf.iter().filter(|&&p| p > beta).count();
    let gamma = gamma_from_confidence(&conf, beta)?;
    Ok(if gamma == count as f64 / n as f64 { 0.0 } else { 1.0 })
}

fn oracle_entropy_crop(r: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (r.gen_range(2..12), r.gen_range(2..12));
    let (ch, cw) = (r.gen_range(1..=h), r.gen_range(1..=w));
    let (sh, sw) = (r.gen_range(1..=ch), r.gen_range(1..=cw));
    // integer-valued entropies keep window sums exact, so ties are real ties
    let ent: Vec<f64> = (0..h * w).map(|_| r.gen_range(0..4) as f64).collect();
    let got = entropy_crop(&ent, h, w, (ch, cw), (sh, sw))?;
    let mut best: Option<(f64, usize, usize)> = None;
    for top in window_starts(h, ch, sh)? {
        for left in window_starts(w, cw, sw)? {
            let mut s = 0.0;
            for y in top..top + ch {
                for x in left..left + cw {
                    s += ent[y * w + x];
                }
            }
            if best.is_none_or(|(b, _, _)| s > b) {
                best = Some((s, top, left));
            }
        }
    }
    let (_, top, left) = best.expect("one window");
    Ok(if (got.top, got.left, got.height, got.width) == (top, left, ch, cw) { 0.0 } else { 1.0 })
}

fn oracle_miou(r: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, c) = (r.gen_range(1..8), r.gen_range(1..8), r.gen_range(2..6));
    let draw = |r: &mut ChaCha8Rng, ignore: bool| -> Vec<u8> {
        (0..h * w).map(|_| if ignore && r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..c) as u8 }).collect()
    };
    let mut gt = draw(r, true);
    gt[0] = 0;
    let pred = draw(r, false);
    let report = miou(&confusion(&LabelMap::new(h, w, pred.clone())?, &LabelMap::new(h, w, gt.clone())?, c)?)?;
    let mut ious = Vec::new();
    for k in 0..c as u8 {
        let valid = |i: &usize| gt[*i] != IGNORE;
        let in_gt: Vec<usize> = (0..h * w).filter(valid).filter(|&i| gt[i] == k).collect();
        let in_pred: Vec<usize> = (0..h * w).filter(valid).filter(|&i| pred[i] == k).collect();
        let inter = in_gt.iter().filter(|i| in_pred.contains(i)).count();
        let union = in_gt.len() + in_pred.len() - inter;
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let expect = ious.iter().sum::<f64>() / ious.len() as f64;
    Ok((report.miou - expect).abs())
}

fn oracle_ema(r: &mut ChaCha8Rng) -> Result<f64> {
    let net = tiny_net();
    let alpha = r.gen_range(0.5..0.999);
    let k = r.gen_range(1..40);
    let mut teacher = ModelParams::<f64>::init(&net, r.gen())?;
    let student = ModelParams::<f64>::init(&net, r.gen())?;
    let t0 = teacher.clone();
    for _ in 0..k {
        ema_update(&mut teacher, &student, alpha)?;
    }
    // θ_k − θ_S = α^k (θ_0 − θ_S)
    let ak = alpha.powi(k);
    let mut worst = 0.0f64;
    for (((_, t), (_, s)), (_, t0)) in teacher.iter().zip(student.iter()).zip(t0.iter()) {
        for ((&t, &s), &t0) in t.data().iter().zip(s.data()).zip(t0.data()) {
            worst = worst.max(((t - s) - ak * (t0 - s)).abs());
        }
    }
    Ok(worst)
}

fn oracle_classmix(r: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (r.gen_range(1..8), r.gen_range(1..8));
    let src_label =
        LabelMap::new(h, w, (0..h * w).map(|_| if r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..6) }).collect())?;
    let pseudo = LabelMap::new(h, w, (0..h * w).map(|_| r.gen_range(0..6)).collect())?;
    let src_img = Tensor::<f32>::from_fn(&[h, w, 3], |_| r.gen_range(0.0..1.0));
    let tgt_img = Tensor::<f32>::from_fn(&[h, w, 3], |_| r.gen_range(0.0..1.0));
    let selected: Vec<u8> = (0..6).filter(|_| r.gen_bool(0.5)).collect();
    let source = SegSample::new("s", Domain::Source, src_img.clone(), src_label.clone())?;
    let mix = classmix_with_classes(&source, &tgt_img, &pseudo, &selected)?;
    let mut bad = 0usize;
    for i in 0..h * w {
        let from_src = selected.contains(&src_label.data()[i]);
        let (img, lab) = if from_src { (&src_img, src_label.data()[i]) } else { (&tgt_img, pseudo.data()[i]) };
        bad += usize::from(mix.origin[i] != from_src || mix.label.data()[i] != lab);
        bad += usize::from(mix.image.data()[i * 3..i * 3 + 3] != img.data()[i * 3..i * 3 + 3]);
    }
    Ok(bad as f64)
}

/// The multi-resolution loss with δ ≡ 1 on LR-only anchors equals the mixed loss.
fn oracle_multires_reduces(r: &mut ChaCha8Rng) -> Result<f64> {
    let side = r.gen_range(3..7);
    let a = side * side;
    let e = r.gen_range(2..9);
    let origins = (0..a).map(|_| if r.gen_bool(0.5) { Domain::Source } else { Domain::Target }).collect();
    let grid = GridLabels::new(side, side, grid_labels(r, a), origins, Resolution::Lr)?;
    let gamma = r.gen_range(0.0..1.0);
    let cfg = small_cl();
    let seed: u64 = r.gen();
    let feats = unit_rows(r, a, e);
    let mut g = Graph::inference();
    let f = g.constant(feats);
    let (eq5, pairs) = mixed_cl(&mut g, f, &grid, gamma, &tiny_taxonomy(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let ones = g.constant(Tensor::full(&[side, side, 1], 1.0));
    let inside = vec![true; a];
    let eq7 = multires_cl(&mut g, f, f, &pairs, Some((ones, &inside[..])), gamma, a, cfg.tau)?;
    Ok((g.value(eq5).data()[0] - g.value(eq7).data()[0]).abs())
}

/// Every oracle at `instances` random instances each.
pub fn oracle_check(seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    let cases: [(&str, GradCase, f64); 7] = [
        ("info-nce vs double loop", oracle_infonce, 1e-10),
        ("confidence weight vs integer count", oracle_gamma, 0.0),
        ("entropy crop vs exhaustive search", oracle_entropy_crop, 0.0),
        ("miou vs set intersection", oracle_miou, 1e-12),
        ("ema contraction alpha^k", oracle_ema, 1e-12),
        ("classmix pixel composition", oracle_classmix, 0.0),
        ("multires loss with unit weights vs mixed loss", oracle_multires_reduces, 1e-12),
    ];
    let mut out = Vec::new();
    for (i, (name, case, tol)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(case(&mut rng)?);
        }
        out.push(CheckOutcome { name: name.to_string(), instances, worst, tolerance: tol });
    }
    Ok(out)
}
