//! Training objectives: cross-entropy, InfoNCE with class-aware pair
//! sampling, confidence weighting, feature distance, and the multi-resolution
//! weighted contrastive loss.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassTaxonomy, Domain, Partition, IGNORE};
use crate::error::{Error, Result};
use crate::tensor::{Graph, PairIndex, Scalar, Tensor, Var};

/// Allowed deviation of a feature norm from 1 before InfoNCE refuses it.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Which class pairs a contrastive loss may compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// Every class against every other class.
    AllPairs,
    /// Stuff classes only; thing pixels neither anchor nor serve as pairs.
    StuffOnly,
    /// Stuff against stuff and thing against thing, never across.
    Masked,
}

/// Which pool origins a source-origin anchor of a mixed image may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixedSourcePool {
    /// Source-origin pixels only (target anchors still use both origins).
    SourceOnly,
    /// Both origins for every anchor.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClConfig {
    pub tau: f64,
    pub anchors_per_class: usize,
    pub positives_per_anchor: usize,
    pub negatives_per_anchor: usize,
    pub pair_mode: PairMode,
    pub mixed_source_pool: MixedSourcePool,
    pub beta: f64,
    pub lambda_fd: f64,
    /// Coefficient on both cross-entropy terms.
    pub ce_weight: f64,
    /// Coefficient on both contrastive terms.
    pub cl_weight: f64,
}

impl Default for ClConfig {
    fn default() -> Self {
        ClConfig {
            tau: 0.1,
            anchors_per_class: 32,
            positives_per_anchor: 16,
            negatives_per_anchor: 64,
            pair_mode: PairMode::Masked,
            mixed_source_pool: MixedSourcePool::SourceOnly,
            beta: 0.968,
            lambda_fd: 0.005,
            ce_weight: 1.0,
            cl_weight: 1.0,
        }
    }
}

impl ClConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("cl.tau must be > 0, got {}", self.tau)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("cl.beta must lie in (0, 1), got {}", self.beta)));
        }
        if self.anchors_per_class == 0 || self.positives_per_anchor == 0 || self.negatives_per_anchor == 0 {
            return Err(Error::Config("cl pair caps must all be ≥ 1".into()));
        }
        if !(self.lambda_fd >= 0.0) {
            return Err(Error::Config(format!("cl.lambda_fd must be ≥ 0, got {}", self.lambda_fd)));
        }
        if !(self.ce_weight >= 0.0 && self.cl_weight >= 0.0) {
            return Err(Error::Config("cl.ce_weight and cl.cl_weight must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resolution {
    Lr,
    Hr,
}

/// Per-cell class and origin of one contrastive grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLabels {
    pub height: usize,
    pub width: usize,
    /// Class per cell; [`IGNORE`] cells never take part.
    pub labels: Vec<u8>,
    pub origins: Vec<Domain>,
    pub resolution: Resolution,
}

impl GridLabels {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        origins: Vec<Domain>,
        resolution: Resolution,
    ) -> Result<Self> {
        if labels.len() != height * width || origins.len() != labels.len() {
            return Err(Error::shape(
                "grid-labels",
                format!("{height}×{width} grid with {} labels / {} origins", labels.len(), origins.len()),
            ));
        }
        Ok(GridLabels { height, width, labels, origins, resolution })
    }

    /// Every cell carries the same origin.
    pub fn uniform(
        height: usize,
        width: usize,
        labels: Vec<u8>,
        origin: Domain,
        resolution: Resolution,
    ) -> Result<Self> {
        let n = labels.len();
        Self::new(height, width, labels, vec![origin; n], resolution)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    /// Row in the anchor feature store.
    pub row: usize,
    pub class: u8,
    pub origin: Domain,
    pub resolution: Resolution,
    /// Cell of the low-resolution grid this anchor lies on (for δ lookup).
    pub lr_cell: usize,
}

/// Metadata of one row of the pool feature store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolEntry {
    pub class: u8,
    pub origin: Domain,
    pub resolution: Resolution,
}

/// Anchors with their positive and negative pool rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub anchors: Vec<Anchor>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
    pub pool: Vec<PoolEntry>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn index(&self) -> PairIndex {
        PairIndex {
            anchors: self.anchors.iter().map(|a| a.row).collect(),
            positives: self.positives.clone(),
            negatives: self.negatives.clone(),
        }
    }

    /// Every (anchor, pool-row) pair, positives and negatives alike.
    pub fn pairs(&self) -> impl Iterator<Item = (&Anchor, &PoolEntry)> + '_ {
        self.anchors.iter().enumerate().flat_map(move |(i, a)| {
            self.positives[i].iter().chain(&self.negatives[i]).map(move |&p| (a, &self.pool[p]))
        })
    }

    /// Append `other`, shifting its anchor rows by `row_offset`. Both sets
    /// must index the same pool.
    pub fn extend_from(&mut self, other: PairSet, row_offset: usize) -> Result<()> {
        if !self.pool.is_empty() && !other.pool.is_empty() && self.pool != other.pool {
            return Err(Error::invalid("pair sets index different pools"));
        }
        if self.pool.is_empty() {
            self.pool = other.pool;
        }
        self.anchors.extend(other.anchors.into_iter().map(|mut a| {
            a.row += row_offset;
            a
        }));
        self.positives.extend(other.positives);
        self.negatives.extend(other.negatives);
        Ok(())
    }
}

fn class_allowed(taxonomy: &ClassTaxonomy, mode: PairMode, class: u8) -> bool {
    mode != PairMode::StuffOnly || taxonomy.partition(class as usize) == Partition::Stuff
}

fn pair_allowed(taxonomy: &ClassTaxonomy, mode: PairMode, a: u8, b: u8) -> bool {
    match mode {
        PairMode::AllPairs => true,
        PairMode::StuffOnly => class_allowed(taxonomy, mode, a) && class_allowed(taxonomy, mode, b),
        PairMode::Masked => taxonomy.partition(a as usize) == taxonomy.partition(b as usize),
    }
}

fn take_sorted(candidates: &[usize], cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    if candidates.len() <= cap {
        return candidates.to_vec();
    }
    let mut out: Vec<usize> = sample_indices(rng, candidates.len(), cap).into_iter().map(|i| candidates[i]).collect();
    out.sort_unstable();
    out
}

/// Sample anchors from `anchor_grid` and their positives/negatives from
/// `pool_grid`.
///
/// Per class present in the anchor grid, up to `anchors_per_class` cells are
/// drawn without replacement. `pool_origin_allowed(anchor_origin, pool_origin)`
/// restricts which pool cells an anchor may see. `lr_cell_of` maps an anchor
/// cell to its low-resolution grid cell (identity for LR grids). Anchors
/// left without a positive or without a negative are dropped. When both
/// grids are the same object the anchor's own cell is never its positive.
#[allow(clippy::too_many_arguments)]
pub fn sample_pairs(
    anchor_grid: &GridLabels,
    pool_grid: &GridLabels,
    taxonomy: &ClassTaxonomy,
    cfg: &ClConfig,
    pool_origin_allowed: impl Fn(Domain, Domain) -> bool,
    lr_cell_of: impl Fn(usize) -> usize,
    rng: &mut impl Rng,
) -> Result<PairSet> {
    let num_classes = taxonomy.num_classes();
    let check = |g: &GridLabels| -> Result<()> {
        match g.labels.iter().find(|&&l| l != IGNORE && l as usize >= num_classes) {
            Some(&bad) => Err(Error::invalid(format!("grid label {bad} outside [0, {num_classes})"))),
            None => Ok(()),
        }
    };
    check(anchor_grid)?;
    check(pool_grid)?;
    let same_grid = std::ptr::eq(anchor_grid, pool_grid);
    let pool: Vec<PoolEntry> = pool_grid
        .labels
        .iter()
        .zip(&pool_grid.origins)
        .map(|(&class, &origin)| PoolEntry { class, origin, resolution: pool_grid.resolution })
        .collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (cell, &l) in anchor_grid.labels.iter().enumerate() {
        if l != IGNORE && class_allowed(taxonomy, cfg.pair_mode, l) {
            by_class[l as usize].push(cell);
        }
    }

    let mut set = PairSet { pool, ..PairSet::default() };
    let mut pos_cand = Vec::new();
    let mut neg_cand = Vec::new();
    for (class, cells) in by_class.iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        let class = class as u8;
        for cell in take_sorted(cells, cfg.anchors_per_class, rng) {
            let origin = anchor_grid.origins[cell];
            pos_cand.clear();
            neg_cand.clear();
            for (p, e) in set.pool.iter().enumerate() {
                if e.class == IGNORE || !pool_origin_allowed(origin, e.origin) {
                    continue;
                }
                if e.class == class {
                    if !(same_grid && p == cell) {
                        pos_cand.push(p);
                    }
                } else if pair_allowed(taxonomy, cfg.pair_mode, class, e.class) {
                    neg_cand.push(p);
                }
            }
            if pos_cand.is_empty() || neg_cand.is_empty() {
                continue;
            }
            let positives = take_sorted(&pos_cand, cfg.positives_per_anchor, rng);
            let negatives = take_sorted(&neg_cand, cfg.negatives_per_anchor, rng);
            set.anchors.push(Anchor {
                row: cell,
                class,
                origin,
                resolution: anchor_grid.resolution,
                lr_cell: lr_cell_of(cell),
            });
            set.positives.push(positives);
            set.negatives.push(negatives);
        }
    }
    Ok(set)
}

/// Pool rule of the mixed loss: target anchors see both origins, source
/// anchors see source pixels only unless `MixedSourcePool::Both`.
pub fn mixed_pool_rule(mode: MixedSourcePool) -> impl Fn(Domain, Domain) -> bool {
    move |anchor, pool| match (anchor, mode) {
        (Domain::Target, _) | (_, MixedSourcePool::Both) => true,
        (Domain::Source, MixedSourcePool::SourceOnly) => pool == Domain::Source,
    }
}

/// `[H, W, C]` feature map → `[gh·gw, C]` unit rows on the contrastive grid.
pub fn grid_features<T: Scalar>(g: &mut Graph<T>, fused: Var, gh: usize, gw: usize) -> Result<Var> {
    let c = match *g.shape(fused) {
        [_, _, c] => c,
        ref s => return Err(Error::shape("grid-features", format!("expected H×W×C, got {s:?}"))),
    };
    let x = if g.shape(fused)[..2] == [gh, gw] { fused } else { g.resize_bilinear(fused, gh, gw)? };
    let rows = g.reshape(x, &[gh * gw, c])?;
    g.l2_normalize(rows)
}

fn check_unit_rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    let c = *t.shape().last().unwrap_or(&1);
    for (i, row) in t.data().chunks(c.max(1)).enumerate() {
        let n = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!("info-nce: {what} row {i} has norm {n}, expected unit length")));
        }
    }
    Ok(())
}

/// Weighted InfoNCE sum `Σ_i coeffs[i] · w_i · NCE_i`.
///
/// Both feature stores must hold unit-length rows.
pub fn info_nce<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    pool: Var,
    weights: Option<Var>,
    pairs: &PairSet,
    coeffs: &[f64],
    tau: f64,
) -> Result<Var> {
    check_unit_rows(g.value(anchors), "anchor")?;
    check_unit_rows(g.value(pool), "pool")?;
    let coeffs: Vec<T> = coeffs.iter().map(|&c| T::of(c)).collect();
    g.info_nce(anchors, pool, weights, &pairs.index(), &coeffs, T::of(tau))
}

/// Plain InfoNCE mean over anchors, the unit of the other contrastive losses.
pub fn info_nce_mean<T: Scalar>(g: &mut Graph<T>, anchors: Var, pool: Var, pairs: &PairSet, tau: f64) -> Result<Var> {
    let coeff = if pairs.is_empty() { 0.0 } else { 1.0 / pairs.len() as f64 };
    info_nce(g, anchors, pool, None, pairs, &vec![coeff; pairs.len()], tau)
}

/// `(1/A) Σ_anchors NCE` over anchors sampled from one labelled source grid.
pub fn source_cl<T: Scalar>(
    g: &mut Graph<T>,
    feats: Var,
    grid: &GridLabels,
    taxonomy: &ClassTaxonomy,
    cfg: &ClConfig,
    rng: &mut impl Rng,
) -> Result<(Var, PairSet)> {
    let pairs = sample_pairs(grid, grid, taxonomy, cfg, |_, p| p == Domain::Source, |c| c, rng)?;
    let a = grid.len() as f64;
    let loss = info_nce(g, feats, feats, None, &pairs, &vec![1.0 / a; pairs.len()], cfg.tau)?;
    Ok((loss, pairs))
}

/// Γ = (1/A) · #{pixels whose max probability exceeds β}.
pub fn confidence_weight<T: Scalar>(probs: &Tensor<T>, beta: f64) -> Result<f64> {
    let c = *probs.shape().last().ok_or_else(|| Error::shape("confidence-weight", "scalar probabilities"))?;
    if c == 0 || probs.is_empty() {
        return Err(Error::invalid("confidence-weight: no target pixels"));
    }
    let conf: Vec<f64> =
        probs.data().chunks_exact(c).map(|r| r.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()))).collect();
    gamma_from_confidence(&conf, beta)
}

/// Γ from per-pixel max-probabilities.
pub fn gamma_from_confidence(confidence: &[f64], beta: f64) -> Result<f64> {
    if confidence.is_empty() {
        return Err(Error::invalid("confidence-weight: no target pixels"));
    }
    let count = confidence.iter().filter(|&&p| p > beta).count();
    Ok(count as f64 / confidence.len() as f64)
}

/// Coefficients of the mixed loss: `1/A` for source anchors, `Γ/A` for target anchors.
pub fn mixed_coefficients(pairs: &PairSet, gamma: f64, grid_cells: usize) -> Vec<f64> {
    let a = grid_cells as f64;
    pairs
        .anchors
        .iter()
        .map(|an| match an.origin {
            Domain::Source => 1.0 / a,
            Domain::Target => gamma / a,
        })
        .collect()
}

/// Mixed-image contrastive loss with the target term scaled by `gamma`.
#[allow(clippy::too_many_arguments)]
pub fn mixed_cl<T: Scalar>(
    g: &mut Graph<T>,
    feats: Var,
    grid: &GridLabels,
    gamma: f64,
    taxonomy: &ClassTaxonomy,
    cfg: &ClConfig,
    rng: &mut impl Rng,
) -> Result<(Var, PairSet)> {
    let pairs = sample_pairs(grid, grid, taxonomy, cfg, mixed_pool_rule(cfg.mixed_source_pool), |c| c, rng)?;
    let coeffs = mixed_coefficients(&pairs, gamma, grid.len());
    let loss = info_nce(g, feats, feats, None, &pairs, &coeffs, cfg.tau)?;
    Ok((loss, pairs))
}

/// Mean masked Euclidean distance between student and reference features.
pub fn feature_distance<T: Scalar>(g: &mut Graph<T>, student: Var, reference: Var, mask: &[bool]) -> Result<Var> {
    g.masked_row_distance(student, reference, mask)
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<V> {
    pub ce_s: V,
    pub ce_t: V,
    pub cl_s: V,
    pub cl_m: V,
    pub fd: V,
}

/// Coefficients of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    pub ce: f64,
    pub cl: f64,
    pub fd: f64,
}

impl LossCoefficients {
    /// Unit CE and CL coefficients, `λ` on the feature distance.
    pub fn unit(lambda_fd: f64) -> Self {
        LossCoefficients { ce: 1.0, cl: 1.0, fd: lambda_fd }
    }
}

impl From<&ClConfig> for LossCoefficients {
    fn from(c: &ClConfig) -> Self {
        LossCoefficients { ce: c.ce_weight, cl: c.cl_weight, fd: c.lambda_fd }
    }
}

/// `a·(ce_s + ce_t) + b·(cl_s + cl_m) + λ·fd`.
pub fn total_loss_value(t: &LossTerms<f64>, k: &LossCoefficients) -> f64 {
    k.ce * (t.ce_s + t.ce_t) + k.cl * (t.cl_s + t.cl_m) + k.fd * t.fd
}

/// Graph form of [`total_loss_value`]; absent terms are skipped.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, t: &LossTerms<Option<Var>>, k: &LossCoefficients) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (v, c) in [(t.ce_s, k.ce), (t.ce_t, k.ce), (t.cl_s, k.cl), (t.cl_m, k.cl), (t.fd, k.fd)] {
        let Some(v) = v else { continue };
        let v = if c == 1.0 { v } else { g.scale(v, T::of(c))? };
        acc = Some(match acc {
            None => v,
            Some(a) => g.add(a, v)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("total loss with no terms"))
}

/// Anchor weights of the multi-resolution loss as an affine map of δ:
/// `w_i = slope_i · δ[cell_i] + offset_i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeltaWeights {
    pub cells: Vec<usize>,
    pub slope: Vec<f64>,
    pub offset: Vec<f64>,
}

impl DeltaWeights {
    /// LR anchors inside the HR footprint get δ, outside 1; HR anchors get 1 − δ.
    pub fn for_pairs(pairs: &PairSet, lr_in_box: &[bool]) -> Result<Self> {
        let mut w = DeltaWeights::default();
        for a in &pairs.anchors {
            let inside = *lr_in_box
                .get(a.lr_cell)
                .ok_or_else(|| Error::shape("delta-weights", format!("lr cell {} outside grid", a.lr_cell)))?;
            let (s, o) = match (a.resolution, inside) {
                (Resolution::Lr, true) => (1.0, 0.0),
                (Resolution::Lr, false) => (0.0, 1.0),
                (Resolution::Hr, _) => (-1.0, 1.0),
            };
            w.cells.push(a.lr_cell);
            w.slope.push(s);
            w.offset.push(o);
        }
        Ok(w)
    }

    pub fn evaluate(&self, delta: &[f64]) -> Vec<f64> {
        self.cells.iter().zip(&self.slope).zip(&self.offset).map(|((&c, s), o)| s * delta[c] + o).collect()
    }

    /// Weight vector as a graph value differentiable in `delta` (`[A_lr, 1]` or `[gh, gw, 1]`).
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, delta: Var) -> Result<Var> {
        let n = g.value(delta).len();
        let flat = g.reshape(delta, &[n, 1])?;
        let picked = g.gather_rows(flat, &self.cells)?;
        let m = self.cells.len();
        let picked = g.reshape(picked, &[m])?;
        let slope = g.constant(Tensor::new(vec![m], self.slope.iter().map(|&v| T::of(v)).collect())?);
        let offset = g.constant(Tensor::new(vec![m], self.offset.iter().map(|&v| T::of(v)).collect())?);
        let scaled = g.mul(picked, slope)?;
        g.add(scaled, offset)
    }
}

/// Multi-resolution contrastive loss: LR and HR anchors against the LR pool.
///
/// `store` holds LR rows first (`lr_rows` of them), then HR rows; `lr_pool`
/// holds the LR rows alone. Target anchors are scaled by `gamma`. With
/// `delta = None` every weight is 1.
#[allow(clippy::too_many_arguments)]
pub fn multires_cl<T: Scalar>(
    g: &mut Graph<T>,
    store: Var,
    lr_pool: Var,
    pairs: &PairSet,
    delta: Option<(Var, &[bool])>,
    gamma: f64,
    lr_cells: usize,
    tau: f64,
) -> Result<Var> {
    if pairs.pairs().any(|(a, p)| a.resolution == Resolution::Hr && p.resolution == Resolution::Hr) {
        return Err(Error::invalid("multires-cl: HR anchor paired with an HR pool row"));
    }
    let coeffs = mixed_coefficients(pairs, gamma, lr_cells);
    let weights = match delta {
        Some((d, lr_in_box)) => {
            if g.value(d).data().iter().any(|v| !(0.0..=1.0).contains(&v.as_f64())) {
                return Err(Error::invalid("multires-cl: δ outside [0, 1]"));
            }
            if pairs.is_empty() {
                None
            } else {
                Some(DeltaWeights::for_pairs(pairs, lr_in_box)?.apply(g, d)?)
            }
        }
        None => None,
    };
    info_nce(g, store, lr_pool, weights, pairs, &coeffs, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tax() -> ClassTaxonomy {
        ClassTaxonomy::desk_default()
    }

    fn grid(labels: Vec<u8>, side: usize) -> GridLabels {
        GridLabels::uniform(side, side, labels, Domain::Source, Resolution::Lr).unwrap()
    }

    #[test]
    fn eq2_scalar_example() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let pool = g.param(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let anchor = Anchor { row: 0, class: 0, origin: Domain::Source, resolution: Resolution::Lr, lr_cell: 0 };
        let pe = PoolEntry { class: 0, origin: Domain::Source, resolution: Resolution::Lr };
        let set =
            PairSet { anchors: vec![anchor], positives: vec![vec![0]], negatives: vec![vec![1]], pool: vec![pe; 2] };
        let l = info_nce_mean(&mut g, a, pool, &set, 1.0).unwrap();
        assert!((g.value(l).item().unwrap() - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_features_are_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
        let err = info_nce_mean(&mut g, a, a, &PairSet::default(), 0.1).unwrap_err();
        assert!(err.to_string().contains("norm"));
    }

    #[test]
    fn single_class_grid_gives_empty_set() {
        let gl = grid(vec![3; 16], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_pairs(&gl, &gl, &tax(), &ClConfig::default(), |_, _| true, |c| c, &mut rng).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn masking_keeps_partitions_apart() {
        // stuff 0..5, thing 5..8
        let labels: Vec<u8> = (0..64).map(|i| (i % 8) as u8).collect();
        let gl = grid(labels, 8);
        let cfg = ClConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_pairs(&gl, &gl, &tax(), &cfg, |_, _| true, |c| c, &mut rng).unwrap();
        assert!(!s.is_empty());
        let t = tax();
        for (a, p) in s.pairs() {
            assert_eq!(t.partition(a.class as usize), t.partition(p.class as usize));
        }
    }

    #[test]
    fn caps_are_respected() {
        let labels: Vec<u8> = (0..36).map(|i| (i % 3) as u8).collect();
        let gl = grid(labels, 6);
        let cfg = ClConfig {
            anchors_per_class: 2,
            positives_per_anchor: 4,
            negatives_per_anchor: 8,
            pair_mode: PairMode::AllPairs,
            ..ClConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_pairs(&gl, &gl, &tax(), &cfg, |_, _| true, |c| c, &mut rng).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.positives.iter().all(|p| p.len() == 4));
        assert!(s.negatives.iter().all(|n| n.len() == 8));
        for (i, a) in s.anchors.iter().enumerate() {
            assert!(s.positives[i].iter().all(|&p| s.pool[p].class == a.class && p != a.row));
            assert!(s.negatives[i].iter().all(|&n| s.pool[n].class != a.class));
        }
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_from_confidence(&[0.99, 0.5, 0.97, 0.2], 0.9).unwrap(), 0.5);
        assert_eq!(gamma_from_confidence(&[0.99; 3], 0.9).unwrap(), 1.0);
        assert_eq!(gamma_from_confidence(&[0.1; 3], 0.9).unwrap(), 0.0);
        assert!(gamma_from_confidence(&[], 0.9).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = LossTerms { ce_s: 1.0, ce_t: 1.0, cl_s: 1.0, cl_m: 1.0, fd: 1.0 };
        assert!((total_loss_value(&t, &LossCoefficients::unit(0.005)) - 4.005).abs() < 1e-15);
        assert_eq!(total_loss_value(&LossTerms::default(), &LossCoefficients::unit(0.005)), 0.0);
        let k = LossCoefficients { ce: 2.0, cl: 0.5, fd: 0.0 };
        assert!((total_loss_value(&t, &k) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn feature_distance_hand_norm() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1, 1, 2]));
        let d = feature_distance(&mut g, a, b, &[true]).unwrap();
        assert_eq!(g.value(d).item().unwrap(), 5.0);
    }
}
