//! Brute-force references for the optimized kernels.
//!
//! Everything here is transcribed directly from the defining formulas with
//! plain nested loops. Nothing in this module calls into `nn`, `partition`,
//! `losses` or `metrics`; the kernels are checked against these, never the
//! other way round.

use crate::error::{param_err, shape_err, Error, Result};
use crate::losses::{ContrastConfig, DistanceKind};
use crate::nn::ConvLayer;
use crate::partition::PoolCoupling;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffSpec {
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-5,
        }
    }
}

/// Elementwise `|a − b| / max(|a|, |b|, 1e-8)`, maximised over the slices.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative error of unequal lengths");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8)`: relative error of whole gradient
/// vectors, insensitive to rounding noise on individual near-zero entries.
pub fn relative_error_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative error of unequal lengths");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-8)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "abs diff of unequal lengths");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central differences of a scalar function of a feature map.
pub fn grad_finite_diff(
    mut f: impl FnMut(&FeatureMap) -> Result<f64>,
    at: &FeatureMap,
    spec: &FiniteDiffSpec,
) -> Result<FeatureMap> {
    let (h, w, c) = at.dims();
    let data = grad_finite_diff_slice(
        |v| f(&FeatureMap::new(h, w, c, v.to_vec()).expect("same extents")),
        at.data(),
        spec,
    )?;
    FeatureMap::new(h, w, c, data)
}

/// Central differences of a scalar function of a flat parameter vector.
pub fn grad_finite_diff_slice(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    at: &[f64],
    spec: &FiniteDiffSpec,
) -> Result<Vec<f64>> {
    let eps = spec.epsilon;
    let mut x = at.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x)?;
        x[i] = orig - eps;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite evaluation at coordinate {i}")));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Direct same-padding 3×3 convolution: out, y, x, in, ky, kx loops.
pub fn conv_bruteforce(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    let (h, w, cin) = input.dims();
    if cin != layer.in_channels() {
        return shape_err("conv_bruteforce: channel mismatch");
    }
    let cout = layer.out_channels();
    let k = layer.kernel().data();
    let b = layer.bias().data();
    let mut out = FeatureMap::zeros(h, w, cout);
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = b[o];
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = x as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k[((o * cin + i) * 3 + ky) * 3 + kx] * input.get(iy as usize, ix as usize, i);
                        }
                    }
                }
                out.set(y, x, o, acc);
            }
        }
    }
    Ok(out)
}

/// Window-scan max pool returning values only.
pub fn max_pool_bruteforce(x: &FeatureMap, k: usize) -> Result<FeatureMap> {
    Ok(pool_with_positions(x, k)?.0)
}

/// Pooled values and, per pooled entry, the `(y, x)` of the first maximum.
fn pool_with_positions(x: &FeatureMap, k: usize) -> Result<(FeatureMap, Vec<(usize, usize)>)> {
    let (h, w, c) = x.dims();
    if k == 0 || h % k != 0 || w % k != 0 {
        return shape_err(format!("pool oracle: {h}x{w} not divisible by {k}"));
    }
    let mut out = FeatureMap::zeros(h / k, w / k, c);
    let mut pos = Vec::new();
    for py in 0..h / k {
        for px in 0..w / k {
            for ch in 0..c {
                let mut best = (py * k, px * k);
                for y in py * k..py * k + k {
                    for xx in px * k..px * k + k {
                        if x.get(y, xx, ch) > x.get(best.0, best.1, ch) {
                            best = (y, xx);
                        }
                    }
                }
                out.set(py, px, ch, x.get(best.0, best.1, ch));
                pos.push(best);
            }
        }
    }
    Ok((out, pos))
}

fn transcribed_distance(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<f64> {
    match kind {
        DistanceKind::L2Squared => {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += (a[i] - b[i]) * (a[i] - b[i]);
            }
            Ok(s)
        }
        DistanceKind::L1 => {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += (a[i] - b[i]).abs();
            }
            Ok(s)
        }
        DistanceKind::CosineDistance => {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for i in 0..a.len() {
                ab += a[i] * b[i];
                aa += a[i] * a[i];
                bb += b[i] * b[i];
            }
            if aa == 0.0 || bb == 0.0 {
                return Err(Error::DegenerateInput("cosine of zero vector".into()));
            }
            Ok(1.0 - ab / (aa.sqrt() * bb.sqrt()))
        }
    }
}

/// `−log( exp(−dPos/τ) / Σ exp(−dNeg/τ) )`, written out literally.
fn literal_sample_loss(d_pos: f64, d_negs: &[f64], tau: f64, include_positive: bool) -> f64 {
    let numerator = (-d_pos / tau).exp();
    let mut denominator = 0.0;
    for &d in d_negs {
        denominator += (-d / tau).exp();
    }
    if include_positive {
        denominator += numerator;
    }
    -(numerator / denominator).ln()
}

/// Omni-contrasting by enumeration over p, i, j, k and u, v, w.
pub fn oc_bruteforce(student: &FeatureMap, teacher: &FeatureMap, cfg: &ContrastConfig) -> Result<f64> {
    let kind = cfg.distance;
    oc_enumerate(student, teacher, cfg, |a, b| transcribed_distance(a, b, kind))
}

/// [`oc_bruteforce`] with an arbitrary distance function.
pub fn oc_bruteforce_with(
    student: &FeatureMap,
    teacher: &FeatureMap,
    cfg: &ContrastConfig,
    d: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    oc_enumerate(student, teacher, cfg, |a, b| Ok(d(a, b)))
}

fn oc_enumerate(
    student: &FeatureMap,
    teacher: &FeatureMap,
    cfg: &ContrastConfig,
    d: impl Fn(&[f64], &[f64]) -> Result<f64>,
) -> Result<f64> {
    if student.dims() != teacher.dims() {
        return shape_err("oc oracle: student and teacher differ in shape");
    }
    if !(cfg.tau > 0.0) {
        return param_err("oc oracle: temperature must be positive");
    }
    let q = cfg.pool_factor;
    let (fs, positions) = pool_with_positions(student, q)?;
    let ft = match cfg.pool_coupling {
        PoolCoupling::Independent => pool_with_positions(teacher, q)?.0,
        PoolCoupling::StudentIndices => {
            let (h, w, c) = fs.dims();
            let mut t = FeatureMap::zeros(h, w, c);
            let mut at = 0;
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let (sy, sx) = positions[at];
                        t.set(y, x, ch, teacher.get(sy, sx, ch));
                        at += 1;
                    }
                }
            }
            t
        }
    };
    let (h, w, c) = fs.dims();
    let n = cfg.patch_side;
    let m = cfg.groups;
    if n == 0 || m == 0 || h % n != 0 || w % n != 0 || c % m != 0 {
        return shape_err("oc oracle: patch side or group count does not divide the pooled map");
    }
    if n * n * m < 2 {
        return param_err("oc oracle: no negatives");
    }
    let len = c / m;
    let rep = |f: &FeatureMap, p: usize, i: usize, j: usize, k: usize| -> Vec<f64> {
        let py = (p / (w / n)) * n;
        let px = (p % (w / n)) * n;
        (0..len).map(|e| f.get(py + i, px + j, k * len + e)).collect()
    };
    let patches = (h / n) * (w / n);
    let mut total = 0.0;
    for p in 0..patches {
        for i in 0..n {
            for j in 0..n {
                for k in 0..m {
                    let s = rep(&fs, p, i, j, k);
                    let d_pos = d(&s, &rep(&ft, p, i, j, k))?;
                    let mut d_negs = Vec::new();
                    for u in 0..n {
                        for v in 0..n {
                            for ww in 0..m {
                                if (u, v, ww) != (i, j, k) {
                                    d_negs.push(d(&s, &rep(&ft, p, u, v, ww))?);
                                }
                            }
                        }
                    }
                    total += literal_sample_loss(d_pos, &d_negs, cfg.tau, cfg.include_positive);
                }
            }
        }
    }
    Ok(total / (h * w * m) as f64)
}

/// Spatial contrasting over whole-pixel vectors, mean over pixels.
pub fn sc_bruteforce(student: &FeatureMap, teacher: &FeatureMap, tau: f64, kind: DistanceKind, include_positive: bool) -> Result<f64> {
    if student.dims() != teacher.dims() {
        return shape_err("sc oracle: shape mismatch");
    }
    let (h, w, _) = student.dims();
    if h * w < 2 {
        return param_err("sc oracle: no negatives");
    }
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let s = student.pixel(i, j);
            let d_pos = transcribed_distance(s, teacher.pixel(i, j), kind)?;
            let mut d_negs = Vec::new();
            for u in 0..h {
                for v in 0..w {
                    if (u, v) != (i, j) {
                        d_negs.push(transcribed_distance(s, teacher.pixel(u, v), kind)?);
                    }
                }
            }
            total += literal_sample_loss(d_pos, &d_negs, tau, include_positive);
        }
    }
    Ok(total / (h * w) as f64)
}

/// Channel contrasting among groups of one pixel, mean over `H·W·M`.
pub fn cc_bruteforce(
    student: &FeatureMap,
    teacher: &FeatureMap,
    groups: usize,
    tau: f64,
    kind: DistanceKind,
    include_positive: bool,
) -> Result<f64> {
    if student.dims() != teacher.dims() {
        return shape_err("cc oracle: shape mismatch");
    }
    let (h, w, c) = student.dims();
    if groups == 0 || c % groups != 0 {
        return shape_err("cc oracle: groups do not divide channels");
    }
    if groups < 2 {
        return param_err("cc oracle: no negatives");
    }
    let len = c / groups;
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let sp = student.pixel(i, j);
            let tp = teacher.pixel(i, j);
            for k in 0..groups {
                let s = &sp[k * len..(k + 1) * len];
                let d_pos = transcribed_distance(s, &tp[k * len..(k + 1) * len], kind)?;
                let mut d_negs = Vec::new();
                for ww in 0..groups {
                    if ww != k {
                        d_negs.push(transcribed_distance(s, &tp[ww * len..(ww + 1) * len], kind)?);
                    }
                }
                total += literal_sample_loss(d_pos, &d_negs, tau, include_positive);
            }
        }
    }
    Ok(total / (h * w * groups) as f64)
}

/// Every same-position same-group squared distance, in (y, x, group) order.
pub fn ts_distances_bruteforce(student: &FeatureMap, teacher: &FeatureMap, groups: usize) -> Result<Vec<f64>> {
    if student.dims() != teacher.dims() {
        return shape_err("ts oracle: shape mismatch");
    }
    let (h, w, c) = student.dims();
    if groups == 0 || c % groups != 0 {
        return shape_err("ts oracle: groups do not divide channels");
    }
    let len = c / groups;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for k in 0..groups {
                let mut s = 0.0;
                for e in k * len..(k + 1) * len {
                    let diff = student.get(y, x, e) - teacher.get(y, x, e);
                    s += diff * diff;
                }
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Every unordered pair of distinct fine-grained representations inside
/// each `window×window` area, squared distance.
pub fn self_similarity_bruteforce(f: &FeatureMap, window: usize, groups: usize) -> Result<Vec<f64>> {
    let (h, w, c) = f.dims();
    if window == 0 || h % window != 0 || w % window != 0 || groups == 0 || c % groups != 0 {
        return shape_err("self-similarity oracle: divisibility");
    }
    let len = c / groups;
    let mut out = Vec::new();
    for wy in (0..h).step_by(window) {
        for wx in (0..w).step_by(window) {
            let mut reps: Vec<Vec<f64>> = Vec::new();
            for y in wy..wy + window {
                for x in wx..wx + window {
                    for k in 0..groups {
                        reps.push((0..len).map(|e| f.get(y, x, k * len + e)).collect());
                    }
                }
            }
            for a in 0..reps.len() {
                for b in a + 1..reps.len() {
                    let mut s = 0.0;
                    for e in 0..len {
                        s += (reps[a][e] - reps[b][e]) * (reps[a][e] - reps[b][e]);
                    }
                    out.push(s);
                }
            }
        }
    }
    Ok(out)
}
