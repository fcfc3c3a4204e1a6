//! Forward and adjoint math for every kernel, on raw row-major slices.

use super::Scalar;

// ---------------------------------------------------------------- conv 3×3

/// Geometry of a 3×3, zero-padded (pad 1) convolution on an `H×W×Cin` map.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, cin: usize, cout: usize, stride: usize) -> Self {
        ConvGeom { h, w, cin, cout, stride, oh: (h - 1) / stride + 1, ow: (w - 1) / stride + 1 }
    }

    fn patch(&self) -> usize {
        9 * self.cin
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.oh * g.ow * patch];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * 3 + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * patch..][..patch];
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * 3 + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let p = g.oh * g.ow;
    let mut out = Vec::with_capacity(p * g.cout);
    for _ in 0..p {
        out.extend_from_slice(b);
    }
    T::gemm(p, g.patch(), g.cout, &cols, false, w, false, &mut out, true);
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    dy: &[T],
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let p = g.oh * g.ow;
    let cols = im2col(x, g);
    let mut dw = vec![T::zero(); g.patch() * g.cout];
    T::gemm(g.patch(), p, g.cout, &cols, true, dy, false, &mut dw, false);
    let mut db = vec![T::zero(); g.cout];
    for row in dy.chunks_exact(g.cout) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); p * g.patch()];
        T::gemm(p, g.cout, g.patch(), dy, false, w, true, &mut dcols, false);
        let mut dx = vec![T::zero(); x.len()];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

// ---------------------------------------------------------------- bilinear

/// Per-axis sampling table for half-pixel-center bilinear interpolation.
#[derive(Clone, Debug)]
pub struct AxisTable<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

pub fn axis_table<T: Scalar>(input: usize, output: usize) -> AxisTable<T> {
    let scale = input as f64 / output as f64;
    let mut lo = Vec::with_capacity(output);
    let mut hi = Vec::with_capacity(output);
    let mut frac = Vec::with_capacity(output);
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let l = src.floor() as usize;
        let h = (l + 1).min(input - 1);
        lo.push(l);
        hi.push(h);
        frac.push(T::of(src - l as f64));
    }
    AxisTable { lo, hi, frac }
}

pub fn resize_forward<T: Scalar>(x: &[T], (h, w, c): (usize, usize, usize), oh: usize, ow: usize) -> Vec<T> {
    let ty = axis_table::<T>(h, oh);
    let tx = axis_table::<T>(w, ow);
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
        for ox in 0..ow {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            let o = (oy * ow + ox) * c;
            let a = (y0 * w + x0) * c;
            let b = (y0 * w + x1) * c;
            let d = (y1 * w + x0) * c;
            let e = (y1 * w + x1) * c;
            for k in 0..c {
                out[o + k] = w00 * x[a + k] + w01 * x[b + k] + w10 * x[d + k] + w11 * x[e + k];
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(dy: &[T], (h, w, c): (usize, usize, usize), oh: usize, ow: usize) -> Vec<T> {
    let ty = axis_table::<T>(h, oh);
    let tx = axis_table::<T>(w, ow);
    let mut dx = vec![T::zero(); h * w * c];
    for oy in 0..oh {
        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
        for ox in 0..ow {
            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            let o = (oy * ow + ox) * c;
            let a = (y0 * w + x0) * c;
            let b = (y0 * w + x1) * c;
            let d = (y1 * w + x0) * c;
            let e = (y1 * w + x1) * c;
            for k in 0..c {
                let g = dy[o + k];
                dx[a + k] += w00 * g;
                dx[b + k] += w01 * g;
                dx[d + k] += w10 * g;
                dx[e + k] += w11 * g;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- row-wise

pub fn softmax_rows<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - m).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi = *oi / s;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], c: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks_exact(c).zip(dy.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for k in 0..c {
            dr[k] = yr[k] * (gr[k] - dot);
        }
    }
    dx
}

pub const NORM_EPS: f64 = 1e-12;

pub fn l2_normalize_rows<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let eps = T::of(NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = v / n;
        }
    }
    out
}

pub fn l2_normalize_rows_backward<T: Scalar>(x: &[T], y: &[T], dy: &[T], c: usize) -> Vec<T> {
    let eps = T::of(NORM_EPS);
    let mut dx = vec![T::zero(); x.len()];
    for (((xr, yr), gr), dr) in
        x.chunks_exact(c).zip(y.chunks_exact(c)).zip(dy.chunks_exact(c)).zip(dx.chunks_exact_mut(c))
    {
        let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n <= eps {
            for k in 0..c {
                dr[k] = gr[k] / eps;
            }
            continue;
        }
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for k in 0..c {
            dr[k] = (gr[k] - yr[k] * dot) / n;
        }
    }
    dx
}

// ---------------------------------------------------------------- pooling

/// 2×2 max-pool on `H×W×C`; returns values and the flat argmax per output.
pub fn max_pool2_forward<T: Scalar>(x: &[T], (h, w, c): (usize, usize, usize)) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for k in 0..c {
                let mut best = (2 * oy * w + 2 * ox) * c + k;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + k;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (oy * ow + ox) * c + k;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

// ---------------------------------------------------------------- losses

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub const IGNORE_LABEL: u8 = 255;

/// Mean over non-ignored rows of `logsumexp(row) - row[label]`.
pub fn cross_entropy_forward<T: Scalar>(logits: &[T], labels: &[u8], c: usize) -> (T, usize) {
    let mut total = T::zero();
    let mut count = 0usize;
    for (row, &lab) in logits.chunks_exact(c).zip(labels) {
        if lab == IGNORE_LABEL {
            continue;
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[lab as usize];
        count += 1;
    }
    (total / T::of(count as f64), count)
}

pub fn cross_entropy_backward<T: Scalar>(logits: &[T], labels: &[u8], c: usize, count: usize, g: T) -> Vec<T> {
    let scale = g / T::of(count as f64);
    let mut dx = vec![T::zero(); logits.len()];
    for ((row, &lab), dr) in logits.chunks_exact(c).zip(labels).zip(dx.chunks_exact_mut(c)) {
        if lab == IGNORE_LABEL {
            continue;
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = row.iter().map(|&v| (v - m).exp()).sum();
        for k in 0..c {
            dr[k] = (row[k] - m).exp() / s * scale;
        }
        dr[lab as usize] -= scale;
    }
    dx
}

/// Anchor/positive/negative row indices for one InfoNCE evaluation.
///
/// `anchors[i]` indexes the anchor feature matrix; `positives[i]` and
/// `negatives[i]` index the pool matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairIndex {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Canonical accumulation order: by anchor row, then by pair lists.
    pub fn sorted_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.anchors.len()).collect();
        order.sort_by(|&a, &b| {
            self.anchors[a]
                .cmp(&self.anchors[b])
                .then_with(|| self.positives[a].cmp(&self.positives[b]))
                .then_with(|| self.negatives[a].cmp(&self.negatives[b]))
        });
        order
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn log_sum_exp<T: Scalar>(vals: &[T]) -> T {
    if vals.is_empty() {
        return T::neg_infinity();
    }
    let m = vals.iter().copied().fold(T::neg_infinity(), T::max);
    m + vals.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Per-anchor InfoNCE value, in the pair index's own anchor order.
pub fn info_nce_per_anchor<T: Scalar>(anchors: &[T], pool: &[T], c: usize, pairs: &PairIndex, tau: T) -> Vec<T> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut neg = Vec::new();
    for i in 0..pairs.len() {
        let a = &anchors[pairs.anchors[i] * c..][..c];
        let pos = &pairs.positives[i];
        if pos.is_empty() {
            out.push(T::zero());
            continue;
        }
        neg.clear();
        neg.extend(pairs.negatives[i].iter().map(|&n| dot(a, &pool[n * c..][..c]) / tau));
        if neg.is_empty() {
            out.push(T::zero());
            continue;
        }
        let nl = log_sum_exp(&neg);
        let mut acc = T::zero();
        for &p in pos {
            let s = dot(a, &pool[p * c..][..c]) / tau;
            acc += softplus(nl - s);
        }
        out.push(acc / T::of(pos.len() as f64));
    }
    out
}

/// Gradients of `g · Σ_i coeff_i · weight_i · nce_i` w.r.t. anchors and pool.
#[allow(clippy::too_many_arguments)]
pub fn info_nce_backward<T: Scalar>(
    anchors: &[T],
    pool: &[T],
    c: usize,
    pairs: &PairIndex,
    tau: T,
    anchor_scale: &[T],
    g: T,
    d_anchor: &mut [T],
    d_pool: &mut [T],
) {
    let mut neg = Vec::new();
    for i in pairs.sorted_order() {
        let pos = &pairs.positives[i];
        let negs = &pairs.negatives[i];
        if pos.is_empty() || negs.is_empty() {
            continue;
        }
        let gi = g * anchor_scale[i];
        if gi == T::zero() {
            continue;
        }
        let ar = pairs.anchors[i];
        let a = &anchors[ar * c..][..c];
        neg.clear();
        neg.extend(negs.iter().map(|&n| dot(a, &pool[n * c..][..c]) / tau));
        let nl = log_sum_exp(&neg);
        let inv_p = T::one() / T::of(pos.len() as f64);
        let mut d_nl = T::zero();
        let mut da = vec![T::zero(); c];
        for &p in pos {
            let b = &pool[p * c..][..c];
            let s = dot(a, b) / tau;
            let sig = sigmoid(nl - s);
            let ds = -sig * inv_p * gi / tau;
            d_nl += sig * inv_p * gi;
            for k in 0..c {
                da[k] += ds * b[k];
                d_pool[p * c + k] += ds * a[k];
            }
        }
        for (&n, &sn) in negs.iter().zip(&neg) {
            let w = (sn - nl).exp() * d_nl / tau;
            let b = &pool[n * c..][..c];
            for k in 0..c {
                da[k] += w * b[k];
                d_pool[n * c + k] += w * a[k];
            }
        }
        for k in 0..c {
            d_anchor[ar * c + k] += da[k];
        }
    }
}

/// Mean Euclidean distance between masked rows of two `P×C` matrices.
pub fn row_distance_forward<T: Scalar>(a: &[T], b: &[T], c: usize, mask: &[bool]) -> T {
    let mut total = T::zero();
    let mut n = 0usize;
    for ((ra, rb), &m) in a.chunks_exact(c).zip(b.chunks_exact(c)).zip(mask) {
        if !m {
            continue;
        }
        total += ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt();
        n += 1;
    }
    total / T::of(n as f64)
}

pub fn row_distance_backward<T: Scalar>(a: &[T], b: &[T], c: usize, mask: &[bool], g: T) -> Vec<T> {
    let n = mask.iter().filter(|&&m| m).count();
    let scale = g / T::of(n as f64);
    let mut da = vec![T::zero(); a.len()];
    for (((ra, rb), &m), dr) in a.chunks_exact(c).zip(b.chunks_exact(c)).zip(mask).zip(da.chunks_exact_mut(c)) {
        if !m {
            continue;
        }
        let d = ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt();
        if d == T::zero() {
            continue;
        }
        for k in 0..c {
            dr[k] = (ra[k] - rb[k]) / d * scale;
        }
    }
    da
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_table_identity_has_zero_fraction() {
        let t = axis_table::<f64>(5, 5);
        assert_eq!(t.lo, vec![0, 1, 2, 3, 4]);
        assert!(t.frac.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn conv_output_dims() {
        let g = ConvGeom::new(64, 64, 3, 8, 2);
        assert_eq!((g.oh, g.ow), (32, 32));
        let g = ConvGeom::new(7, 5, 3, 8, 1);
        assert_eq!((g.oh, g.ow), (7, 5));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
