//! Loss terms of the distillation objective with analytic gradients
//! with respect to the student side. Teacher inputs never receive gradient.
//!
//! The dense contrastive family shares one engine: a feature map is cut into
//! *sets* of fine-grained representations (equal-length channel slices); each
//! student slice is contrasted against every teacher slice of its set, with
//! the teacher slice at the same index as the positive and all others as
//! negatives. The three variants differ only in how sets are formed:
//!
//! * spatial: one set holding every pixel's full channel vector,
//! * channel: one set per pixel holding that pixel's channel groups,
//! * omni: one set per local patch holding every (pixel, group) slice,
//!   computed on the max-pooled maps.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::max_pool_backward;
use crate::partition::{pool_pre_reduce, ChannelGrouping, PatchGrid, PoolCoupling};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceKind {
    /// `Σ (aᵢ − bᵢ)²`
    #[default]
    #[serde(rename = "l2")]
    L2Squared,
    /// `Σ |aᵢ − bᵢ|`
    #[serde(rename = "l1")]
    L1,
    /// `1 − ⟨a, b⟩ / (‖a‖ ‖b‖)`
    #[serde(rename = "cosine")]
    CosineDistance,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 3] = [DistanceKind::L2Squared, DistanceKind::L1, DistanceKind::CosineDistance];
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Self::L2Squared),
            "l1" => Ok(Self::L1),
            "cosine" => Ok(Self::CosineDistance),
            other => Err(Error::Config(format!("unknown distance {other:?}"))),
        }
    }
}

pub fn distance(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err(format!("distance: lengths {} and {}", a.len(), b.len()));
    }
    match kind {
        DistanceKind::L2Squared => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()),
        DistanceKind::L1 => Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()),
        DistanceKind::CosineDistance => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::DegenerateInput("cosine distance of a zero vector".into()));
            }
            Ok(1.0 - dot(a, b) / (na * nb))
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out += scale · ∂d(a, b)/∂a`.
fn accumulate_distance_grad(a: &[f64], b: &[f64], kind: DistanceKind, scale: f64, out: &mut [f64]) {
    match kind {
        DistanceKind::L2Squared => {
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                *o += scale * 2.0 * (x - y);
            }
        }
        DistanceKind::L1 => {
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                let diff = x - y;
                if diff > 0.0 {
                    *o += scale;
                } else if diff < 0.0 {
                    *o -= scale;
                }
            }
        }
        DistanceKind::CosineDistance => {
            let (na, nb) = (norm(a), norm(b));
            let ab = dot(a, b);
            let inv = 1.0 / (na * nb);
            let radial = ab / (na * na * na * nb);
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                *o -= scale * (y * inv - x * radial);
            }
        }
    }
}

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_CHANNEL_GROUPS: usize = 16;
pub const DEFAULT_PATCH_SIDE: usize = 4;
pub const DEFAULT_POOL_FACTOR: usize = 4;
pub const DEFAULT_KD_TEMPERATURE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub groups: usize,
    pub patch_side: usize,
    pub pool_factor: usize,
    pub distance: DistanceKind,
    /// Adds the positive pair to the denominator (standard InfoNCE).
    pub include_positive: bool,
    pub pool_coupling: PoolCoupling,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            groups: DEFAULT_CHANNEL_GROUPS,
            patch_side: DEFAULT_PATCH_SIDE,
            pool_factor: DEFAULT_POOL_FACTOR,
            distance: DistanceKind::L2Squared,
            include_positive: false,
            pool_coupling: PoolCoupling::Independent,
        }
    }
}

impl ContrastConfig {
    fn check_tau(&self) -> Result<()> {
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return param_err(format!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

/// Per-sample contrastive loss and its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLoss {
    pub loss: f64,
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
}

/// `dPos/τ + log Σⱼ exp(−dNegⱼ/τ)`, evaluated with max-subtraction.
pub fn contrast_sample(d_pos: f64, d_negs: &[f64], tau: f64, include_positive: bool) -> Result<SampleLoss> {
    check_tau(tau)?;
    if d_negs.is_empty() {
        return param_err("contrastive sample needs at least one negative");
    }
    let mut d_negs_grad = vec![0.0; d_negs.len()];
    let (loss, d_pos_grad) = contrast_into(d_pos, d_negs, tau, include_positive, &mut d_negs_grad);
    Ok(SampleLoss {
        loss,
        d_pos: d_pos_grad,
        d_negs: d_negs_grad,
    })
}

/// Allocation-free core of [`contrast_sample`]; returns `(loss, ∂/∂dPos)`.
fn contrast_into(d_pos: f64, d_negs: &[f64], tau: f64, include_positive: bool, neg_grad: &mut [f64]) -> (f64, f64) {
    let pos_logit = -d_pos / tau;
    let mut max = d_negs.iter().map(|d| -d / tau).fold(f64::NEG_INFINITY, f64::max);
    if include_positive {
        max = max.max(pos_logit);
    }
    let mut sum = 0.0;
    for (g, d) in neg_grad.iter_mut().zip(d_negs) {
        let e = (-d / tau - max).exp();
        *g = e;
        sum += e;
    }
    let pos_weight = if include_positive {
        let e = (pos_logit - max).exp();
        sum += e;
        e
    } else {
        0.0
    };
    let lse = max + sum.ln();
    for g in neg_grad.iter_mut() {
        *g = -(*g / sum) / tau;
    }
    let d_pos_grad = (1.0 - pos_weight / sum) / tau;
    (d_pos / tau + lse, d_pos_grad)
}

/// Sum of per-sample losses over one set, accumulating `∂/∂student` into
/// `grad`. `offsets` are start indices of the set's slices in both maps.
fn contrast_set(
    student: &[f64],
    teacher: &[f64],
    offsets: &[usize],
    len: usize,
    kind: DistanceKind,
    tau: f64,
    include_positive: bool,
    grad: &mut [f64],
    scratch: &mut SetScratch,
) -> Result<f64> {
    let k = offsets.len();
    scratch.dists.resize(k, 0.0);
    scratch.negs.resize(k - 1, 0.0);
    scratch.neg_grad.resize(k - 1, 0.0);
    let mut total = 0.0;
    for (a, &oa) in offsets.iter().enumerate() {
        let s = &student[oa..oa + len];
        for (b, &ob) in offsets.iter().enumerate() {
            scratch.dists[b] = distance(s, &teacher[ob..ob + len], kind)?;
        }
        let d_pos = scratch.dists[a];
        let mut n = 0;
        for (b, &d) in scratch.dists.iter().enumerate() {
            if b != a {
                scratch.negs[n] = d;
                n += 1;
            }
        }
        let (loss, pos_grad) = contrast_into(d_pos, &scratch.negs, tau, include_positive, &mut scratch.neg_grad);
        total += loss;

        let g = &mut grad[oa..oa + len];
        let mut n = 0;
        for (b, &ob) in offsets.iter().enumerate() {
            let coef = if b == a {
                pos_grad
            } else {
                n += 1;
                scratch.neg_grad[n - 1]
            };
            accumulate_distance_grad(s, &teacher[ob..ob + len], kind, coef, g);
        }
    }
    Ok(total)
}

#[derive(Default)]
struct SetScratch {
    dists: Vec<f64>,
    negs: Vec<f64>,
    neg_grad: Vec<f64>,
}

/// Mean over all samples of all sets; returns `(loss, grad, per-set sums)`.
fn contrast_sets(
    student: &FeatureMap,
    teacher: &FeatureMap,
    sets: &[Vec<usize>],
    len: usize,
    kind: DistanceKind,
    tau: f64,
    include_positive: bool,
) -> Result<(f64, FeatureMap, Vec<f64>)> {
    let mut grad = FeatureMap::zeros(student.height(), student.width(), student.channels());
    let mut scratch = SetScratch::default();
    let mut per_set = Vec::with_capacity(sets.len());
    let mut samples = 0usize;
    for offsets in sets {
        per_set.push(contrast_set(
            student.data(),
            teacher.data(),
            offsets,
            len,
            kind,
            tau,
            include_positive,
            grad.data_mut(),
            &mut scratch,
        )?);
        samples += offsets.len();
    }
    let inv = 1.0 / samples as f64;
    let total: f64 = per_set.iter().sum();
    for g in grad.data_mut() {
        *g *= inv;
    }
    Ok((total * inv, grad, per_set))
}

/// Feature imitation: unnormalised sum of squared differences.
pub fn l_fd(teacher: &FeatureMap, student: &FeatureMap) -> Result<(f64, FeatureMap)> {
    teacher.ensure_congruent(student, "l_fd")?;
    let mut grad = student.clone();
    let mut loss = 0.0;
    for (g, &t) in grad.data_mut().iter_mut().zip(teacher.data()) {
        let diff = t - *g;
        loss += diff * diff;
        *g = -2.0 * diff;
    }
    Ok((loss, grad))
}

/// Spatial contrasting over all `H·W` pixels; mean over pixels.
pub fn loss_sc(student: &FeatureMap, teacher: &FeatureMap, tau: f64, kind: DistanceKind) -> Result<(f64, FeatureMap)> {
    loss_sc_with(student, teacher, tau, kind, false)
}

pub fn loss_sc_with(
    student: &FeatureMap,
    teacher: &FeatureMap,
    tau: f64,
    kind: DistanceKind,
    include_positive: bool,
) -> Result<(f64, FeatureMap)> {
    student.ensure_congruent(teacher, "loss_sc")?;
    check_tau(tau)?;
    let (h, w, c) = student.dims();
    if h * w < 2 {
        return param_err("spatial contrasting needs at least two pixels");
    }
    let set: Vec<usize> = (0..h * w).map(|p| p * c).collect();
    let (loss, grad, _) = contrast_sets(student, teacher, &[set], c, kind, tau, include_positive)?;
    Ok((loss, grad))
}

/// Channel contrasting among the `M` groups of each pixel; mean over `H·W·M`.
pub fn loss_cc(student: &FeatureMap, teacher: &FeatureMap, groups: usize, tau: f64, kind: DistanceKind) -> Result<(f64, FeatureMap)> {
    loss_cc_with(student, teacher, groups, tau, kind, false)
}

pub fn loss_cc_with(
    student: &FeatureMap,
    teacher: &FeatureMap,
    groups: usize,
    tau: f64,
    kind: DistanceKind,
    include_positive: bool,
) -> Result<(f64, FeatureMap)> {
    student.ensure_congruent(teacher, "loss_cc")?;
    check_tau(tau)?;
    let (h, w, c) = student.dims();
    let grouping = ChannelGrouping::new(c, groups)?;
    if groups < 2 {
        return param_err("channel contrasting needs at least two groups");
    }
    let sets: Vec<Vec<usize>> = (0..h * w)
        .map(|p| (0..groups).map(|k| p * c + k * grouping.group_len).collect())
        .collect();
    let (loss, grad, _) = contrast_sets(student, teacher, &sets, grouping.group_len, kind, tau, include_positive)?;
    Ok((loss, grad))
}

/// Omni-contrasting output, including per-patch sums for diagnostics.
#[derive(Debug, Clone)]
pub struct OmniLoss {
    pub loss: f64,
    /// Gradient with respect to the unpooled student map.
    pub grad: FeatureMap,
    /// Sum of per-sample losses inside each patch, in row-major patch order.
    pub patch_sums: Vec<f64>,
    pub samples: usize,
}

/// Omni-contrasting: pool, tile into patches, group channels, contrast every
/// fine-grained slice against all slices of its patch; mean over samples.
pub fn loss_oc(student: &FeatureMap, teacher: &FeatureMap, cfg: &ContrastConfig) -> Result<(f64, FeatureMap)> {
    let out = loss_oc_detailed(student, teacher, cfg)?;
    Ok((out.loss, out.grad))
}

pub fn loss_oc_detailed(student: &FeatureMap, teacher: &FeatureMap, cfg: &ContrastConfig) -> Result<OmniLoss> {
    student.ensure_congruent(teacher, "loss_oc")?;
    cfg.check_tau()?;
    let pooled = pool_pre_reduce(student, teacher, cfg.pool_factor, cfg.pool_coupling)?;
    let (h, w, c) = pooled.student.dims();
    let grid = PatchGrid::new(h, w, cfg.patch_side, cfg.patch_side)?;
    let grouping = ChannelGrouping::new(c, cfg.groups)?;
    if cfg.patch_side * cfg.patch_side * cfg.groups < 2 {
        return param_err("omni-contrasting needs at least two representations per patch");
    }
    let sets: Vec<Vec<usize>> = grid
        .origins()
        .iter()
        .map(|&(oy, ox)| {
            let mut offsets = Vec::with_capacity(cfg.patch_side * cfg.patch_side * cfg.groups);
            for i in 0..cfg.patch_side {
                for j in 0..cfg.patch_side {
                    let base = pooled.student.index(oy + i, ox + j, 0);
                    offsets.extend((0..cfg.groups).map(|k| base + k * grouping.group_len));
                }
            }
            offsets
        })
        .collect();
    let (loss, pooled_grad, patch_sums) = contrast_sets(
        &pooled.student,
        &pooled.teacher,
        &sets,
        grouping.group_len,
        cfg.distance,
        cfg.tau,
        cfg.include_positive,
    )?;
    let grad = max_pool_backward(&pooled.student_record, &pooled_grad)?;
    Ok(OmniLoss {
        loss,
        grad,
        patch_sums,
        samples: h * w * cfg.groups,
    })
}

/// Which contrastive variant the distillation objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AfdcdVariant {
    Sc,
    Cc,
    #[default]
    Oc,
}

/// Dispatches to the selected contrastive variant. SC and CC run on the
/// unpooled maps.
pub fn afdcd_loss(student: &FeatureMap, teacher: &FeatureMap, variant: AfdcdVariant, cfg: &ContrastConfig) -> Result<(f64, FeatureMap)> {
    match variant {
        AfdcdVariant::Sc => loss_sc_with(student, teacher, cfg.tau, cfg.distance, cfg.include_positive),
        AfdcdVariant::Cc => loss_cc_with(student, teacher, cfg.groups, cfg.tau, cfg.distance, cfg.include_positive),
        AfdcdVariant::Oc => loss_oc(student, teacher, cfg),
    }
}

/// Temperature-softened KL(teacher ‖ student) per pixel, times `T²`,
/// averaged over pixels.
pub fn loss_kd(student_logits: &FeatureMap, teacher_logits: &FeatureMap, temperature: f64) -> Result<(f64, FeatureMap)> {
    student_logits.ensure_congruent(teacher_logits, "loss_kd")?;
    if !(temperature > 0.0) {
        return param_err(format!("KD temperature must be positive, got {temperature}"));
    }
    let (h, w, k) = student_logits.dims();
    let pixels = (h * w) as f64;
    let mut grad = FeatureMap::zeros(h, w, k);
    let mut total = 0.0;
    let mut ps = vec![0.0; k];
    let mut pt = vec![0.0; k];
    for y in 0..h {
        for x in 0..w {
            let log_zs = log_softmax_into(student_logits.pixel(y, x), temperature, &mut ps);
            let log_zt = log_softmax_into(teacher_logits.pixel(y, x), temperature, &mut pt);
            let mut kl = 0.0;
            for c in 0..k {
                let lt = teacher_logits.get(y, x, c) / temperature - log_zt;
                let ls = student_logits.get(y, x, c) / temperature - log_zs;
                kl += pt[c] * (lt - ls);
            }
            total += kl;
            let g = grad.pixel_mut(y, x);
            for c in 0..k {
                g[c] = temperature * (ps[c] - pt[c]) / pixels;
            }
        }
    }
    let t2 = temperature * temperature;
    Ok((total * t2 / pixels, grad))
}

/// Writes `softmax(z/T)` into `probs` and returns `log Σ exp(z/T)`.
fn log_softmax_into(z: &[f64], temperature: f64, probs: &mut [f64]) -> f64 {
    let max = z.iter().map(|v| v / temperature).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, v) in probs.iter_mut().zip(z) {
        *p = (v / temperature - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
}

/// `λ1`, `λ2`, `λ3` of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kd: f64,
    pub fd: f64,
    pub afdcd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kd: 1.0,
            fd: 2e-5,
            afdcd: 5e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub task: f64,
    pub kd: f64,
    pub fd: f64,
    pub afdcd: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBundle {
    /// The weighted combination, in the fixed evaluation order used for `total`.
    pub fn combine(task: f64, kd: f64, fd: f64, afdcd: f64, weights: &LossWeights) -> f64 {
        task + weights.kd * kd + weights.fd * fd + weights.afdcd * afdcd
    }
}

pub fn total_loss(task: f64, kd: f64, fd: f64, afdcd: f64, weights: LossWeights) -> Result<LossBundle> {
    for (name, v) in [("lambda1", weights.kd), ("lambda2", weights.fd), ("lambda3", weights.afdcd)] {
        if !(v >= 0.0) {
            return param_err(format!("{name} must be non-negative, got {v}"));
        }
    }
    Ok(LossBundle {
        task,
        kd,
        fd,
        afdcd,
        total: LossBundle::combine(task, kd, fd, afdcd, &weights),
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{self, FiniteDiffSpec};
    use crate::partition::{reassemble_patches, split_patches};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn pair(h: usize, w: usize, c: usize, seed: u64) -> (FeatureMap, FeatureMap) {
        let mut r = Rng::new(seed);
        (
            FeatureMap::random_normal(h, w, c, 1.0, &mut r),
            FeatureMap::random_normal(h, w, c, 1.0, &mut r),
        )
    }

    fn oc_cfg(tau: f64, groups: usize, n: usize, q: usize, distance: DistanceKind) -> ContrastConfig {
        ContrastConfig {
            tau,
            groups,
            patch_side: n,
            pool_factor: q,
            distance,
            ..ContrastConfig::default()
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], DistanceKind::L2Squared).unwrap(), 25.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], DistanceKind::L1).unwrap(), 7.0);
        assert!(close(distance(&[1.0, 0.0], &[0.0, 1.0], DistanceKind::CosineDistance).unwrap(), 1.0, 1e-15));
        assert!(matches!(
            distance(&[0.0, 0.0], &[0.0, 1.0], DistanceKind::CosineDistance),
            Err(Error::DegenerateInput(_))
        ));
        assert!(distance(&[1.0], &[1.0, 2.0], DistanceKind::L1).is_err());
    }

    #[test]
    fn contrast_sample_examples() {
        let l = contrast_sample(0.0, &[0.0; 7], 1.0, false).unwrap();
        assert!(close(l.loss, 7f64.ln(), 1e-12));
        assert!(close(l.loss, 1.945910, 1e-6));

        let l = contrast_sample(0.0, &[2.0], 1.0, false).unwrap();
        assert!(close(l.loss, -2.0, 1e-15));

        // direct evaluation of 1/0.5 + ln(e^-4 + e^-6)
        let l = contrast_sample(1.0, &[2.0, 3.0], 0.5, false).unwrap();
        let direct = 2.0 + ((-4.0f64).exp() + (-6.0f64).exp()).ln();
        assert!(close(l.loss, direct, 1e-14));
        assert!(close(l.loss, -1.873071988, 1e-9));

        assert!(contrast_sample(0.0, &[], 1.0, false).is_err());
        assert!(contrast_sample(0.0, &[1.0], 0.0, false).is_err());
    }

    #[test]
    fn contrast_sample_is_stable_at_small_tau() {
        let l = contrast_sample(90.0, &[100.0, 120.0], 0.07, false).unwrap();
        let expected = 90.0 / 0.07 - 100.0 / 0.07 + (1.0 + (-20.0f64 / 0.07).exp()).ln();
        assert!(l.loss.is_finite());
        assert!(close(l.loss, expected, 1e-9));
    }

    #[test]
    fn contrast_sample_gradient_signs_and_values() {
        let l = contrast_sample(0.3, &[0.5, 1.5, 0.2], 0.7, false).unwrap();
        assert!(l.d_pos > 0.0);
        assert!(l.d_negs.iter().all(|&g| g < 0.0));
        let eps = 1e-6;
        let f = |dp: f64, dn: &[f64]| contrast_sample(dp, dn, 0.7, false).unwrap().loss;
        let num_pos = (f(0.3 + eps, &[0.5, 1.5, 0.2]) - f(0.3 - eps, &[0.5, 1.5, 0.2])) / (2.0 * eps);
        assert!(close(num_pos, l.d_pos, 1e-8));
        let num_neg = (f(0.3, &[0.5, 1.5 + eps, 0.2]) - f(0.3, &[0.5, 1.5 - eps, 0.2])) / (2.0 * eps);
        assert!(close(num_neg, l.d_negs[1], 1e-8));

        let inc = contrast_sample(0.3, &[0.5, 1.5, 0.2], 0.7, true).unwrap();
        assert!(inc.d_pos > 0.0 && inc.d_pos < l.d_pos);
        let g = |dp: f64| contrast_sample(dp, &[0.5, 1.5, 0.2], 0.7, true).unwrap().loss;
        assert!(close((g(0.3 + eps) - g(0.3 - eps)) / (2.0 * eps), inc.d_pos, 1e-8));
    }

    #[test]
    fn l_fd_examples() {
        let (t, _) = pair(3, 3, 2, 1);
        let (loss, grad) = l_fd(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));

        let (loss, _) = l_fd(&FeatureMap::zeros(2, 2, 2), &FeatureMap::filled(2, 2, 2, 1.0)).unwrap();
        assert_eq!(loss, 8.0);
        assert!(l_fd(&t, &FeatureMap::zeros(3, 3, 3)).is_err());
    }

    #[test]
    fn l_fd_grad_matches_finite_differences() {
        let (s, t) = pair(4, 4, 4, 2);
        let (_, grad) = l_fd(&t, &s).unwrap();
        let num = oracle::grad_finite_diff(|x| Ok(l_fd(&t, x)?.0), &s, &FiniteDiffSpec::default()).unwrap();
        assert!(oracle::max_relative_error(num.data(), grad.data()) < 1e-6);
    }

    #[test]
    fn sc_constant_maps() {
        let f = FeatureMap::filled(2, 2, 3, 0.4);
        let (loss, _) = loss_sc(&f, &f, 0.5, DistanceKind::L2Squared).unwrap();
        assert!(close(loss, 3f64.ln(), 1e-12));
    }

    #[test]
    fn sc_single_negative_closed_form() {
        // teacher pixels D apart, student equal to teacher
        let t = FeatureMap::new(1, 2, 2, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        let tau = 0.5;
        let d = 5.0;
        let (loss, _) = loss_sc(&t, &t, tau, DistanceKind::L2Squared).unwrap();
        assert!(close(loss, -d / tau, 1e-12));
        assert!(loss_sc(&FeatureMap::zeros(1, 1, 2), &FeatureMap::zeros(1, 1, 2), tau, DistanceKind::L1).is_err());
    }

    #[test]
    fn sc_matches_oracle_and_fd() {
        let (s, t) = pair(4, 4, 8, 3);
        for kind in DistanceKind::ALL {
            let (loss, grad) = loss_sc(&s, &t, 0.8, kind).unwrap();
            let brute = oracle::sc_bruteforce(&s, &t, 0.8, kind, false).unwrap();
            assert!(close(loss, brute, 1e-12), "{kind:?}");
            let num = oracle::grad_finite_diff(|x| Ok(loss_sc(x, &t, 0.8, kind)?.0), &s, &FiniteDiffSpec::default()).unwrap();
            assert!(oracle::max_relative_error(num.data(), grad.data()) < 1e-5, "{kind:?}");
        }
    }

    #[test]
    fn cc_constant_maps() {
        let f = FeatureMap::filled(2, 3, 32, -0.3);
        let (loss, _) = loss_cc(&f, &f, 16, 0.07, DistanceKind::L2Squared).unwrap();
        assert!(close(loss, 15f64.ln(), 1e-12));
    }

    #[test]
    fn cc_two_groups_closed_form() {
        let (s, t) = pair(3, 2, 4, 4);
        let tau = 0.9;
        let (loss, _) = loss_cc(&s, &t, 2, tau, DistanceKind::L2Squared).unwrap();
        let mut expected = 0.0;
        for y in 0..3 {
            for x in 0..2 {
                let sp = s.pixel(y, x);
                let tp = t.pixel(y, x);
                for k in 0..2 {
                    let other = 1 - k;
                    let d_pos = distance(&sp[2 * k..2 * k + 2], &tp[2 * k..2 * k + 2], DistanceKind::L2Squared).unwrap();
                    let d_neg = distance(&sp[2 * k..2 * k + 2], &tp[2 * other..2 * other + 2], DistanceKind::L2Squared).unwrap();
                    expected += (d_pos - d_neg) / tau;
                }
            }
        }
        expected /= 12.0;
        assert!(close(loss, expected, 1e-12));
    }

    #[test]
    fn cc_errors() {
        let (s, t) = pair(2, 2, 6, 5);
        assert!(matches!(loss_cc(&s, &t, 1, 1.0, DistanceKind::L2Squared), Err(Error::Parameter(_))));
        assert!(matches!(loss_cc(&s, &t, 4, 1.0, DistanceKind::L2Squared), Err(Error::Shape(_))));
    }

    #[test]
    fn cc_matches_oracle_and_fd() {
        let (s, t) = pair(4, 4, 8, 6);
        for kind in DistanceKind::ALL {
            let (loss, grad) = loss_cc(&s, &t, 4, 0.6, kind).unwrap();
            let brute = oracle::cc_bruteforce(&s, &t, 4, 0.6, kind, false).unwrap();
            assert!(close(loss, brute, 1e-12), "{kind:?}");
            let num = oracle::grad_finite_diff(|x| Ok(loss_cc(x, &t, 4, 0.6, kind)?.0), &s, &FiniteDiffSpec::default()).unwrap();
            assert!(oracle::max_relative_error(num.data(), grad.data()) < 1e-5, "{kind:?}");
        }
    }

    #[test]
    fn oc_constant_maps() {
        let f = FeatureMap::filled(8, 8, 32, 1.25);
        let (loss, _) = loss_oc(&f, &f, &oc_cfg(0.07, 16, 4, 1, DistanceKind::L2Squared)).unwrap();
        assert!(close(loss, 255f64.ln(), 1e-12));
        assert!(close(loss, 5.541264, 1e-6));
    }

    #[test]
    fn oc_reduces_to_sc_and_cc() {
        let (s, t) = pair(4, 4, 6, 7);
        for kind in DistanceKind::ALL {
            let (oc, oc_grad) = loss_oc(&s, &t, &oc_cfg(0.5, 1, 4, 1, kind)).unwrap();
            let (sc, sc_grad) = loss_sc(&s, &t, 0.5, kind).unwrap();
            assert!(close(oc, sc, 1e-12));
            assert!(oracle::max_abs_diff(oc_grad.data(), sc_grad.data()) < 1e-12);

            let (oc, _) = loss_oc(&s, &t, &oc_cfg(0.5, 3, 1, 1, kind)).unwrap();
            let (cc, _) = loss_cc(&s, &t, 3, 0.5, kind).unwrap();
            assert!(close(oc, cc, 1e-12));
        }
    }

    #[test]
    fn oc_matches_oracle_and_fd() {
        let (s, t) = pair(8, 8, 8, 8);
        let cfg = oc_cfg(0.7, 4, 2, 1, DistanceKind::L2Squared);
        let (loss, grad) = loss_oc(&s, &t, &cfg).unwrap();
        assert!(close(loss, oracle::oc_bruteforce(&s, &t, &cfg).unwrap(), 1e-12));
        let num = oracle::grad_finite_diff(|x| Ok(loss_oc(x, &t, &cfg)?.0), &s, &FiniteDiffSpec::default()).unwrap();
        assert!(oracle::max_relative_error(num.data(), grad.data()) < 1e-5);
    }

    #[test]
    fn oc_pooled_gradient_only_at_winners() {
        let (s, t) = pair(8, 8, 4, 9);
        let cfg = oc_cfg(0.7, 2, 2, 2, DistanceKind::L2Squared);
        let (loss, grad) = loss_oc(&s, &t, &cfg).unwrap();
        assert!(close(loss, oracle::oc_bruteforce(&s, &t, &cfg).unwrap(), 1e-12));
        let nonzero = grad.data().iter().filter(|&&g| g != 0.0).count();
        assert!(nonzero <= 4 * 4 * 4);
        let num = oracle::grad_finite_diff(|x| Ok(loss_oc(x, &t, &cfg)?.0), &s, &FiniteDiffSpec::default()).unwrap();
        assert!(oracle::max_relative_error(num.data(), grad.data()) < 1e-5);
    }

    #[test]
    fn oc_errors() {
        let (s, t) = pair(8, 8, 8, 10);
        assert!(matches!(loss_oc(&s, &t, &oc_cfg(1.0, 1, 1, 1, DistanceKind::L2Squared)), Err(Error::Parameter(_))));
        assert!(matches!(loss_oc(&s, &t, &oc_cfg(1.0, 3, 2, 1, DistanceKind::L2Squared)), Err(Error::Shape(_))));
        assert!(matches!(loss_oc(&s, &t, &oc_cfg(1.0, 2, 3, 1, DistanceKind::L2Squared)), Err(Error::Shape(_))));
        assert!(matches!(loss_oc(&s, &t, &oc_cfg(1.0, 2, 2, 3, DistanceKind::L2Squared)), Err(Error::Shape(_))));
    }

    #[test]
    fn exclusion_semantics() {
        // student on its positive and away from the negative: dPos − dNeg = −1
        let t = FeatureMap::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let s = t.clone();
        let (excl, _) = loss_sc(&s, &t, 1.0, DistanceKind::L2Squared).unwrap();
        assert!(close(excl, -1.0, 1e-15));
        let (incl, _) = loss_sc_with(&s, &t, 1.0, DistanceKind::L2Squared, true).unwrap();
        assert!(incl >= 0.0);
        let (s2, t2) = pair(4, 4, 4, 11);
        for (g, incl) in [(2, false), (2, true)] {
            let mut cfg = oc_cfg(0.3, g, 2, 1, DistanceKind::L2Squared);
            cfg.include_positive = incl;
            let out = loss_oc_detailed(&s2, &t2, &cfg).unwrap();
            assert!(close(out.loss, oracle::oc_bruteforce(&s2, &t2, &cfg).unwrap(), 1e-12));
            if incl {
                assert!(out.loss >= 0.0);
            }
        }
    }

    #[test]
    fn cosine_matches_negative_cosine_similarity() {
        let (s, t) = pair(4, 4, 8, 12);
        let cfg = oc_cfg(0.5, 2, 2, 1, DistanceKind::CosineDistance);
        let (loss, _) = loss_oc(&s, &t, &cfg).unwrap();
        let neg_cos = |a: &[f64], b: &[f64]| {
            let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            -ab / (na * nb)
        };
        let shifted = oracle::oc_bruteforce_with(&s, &t, &cfg, neg_cos).unwrap();
        assert!(close(loss, shifted, 1e-9));
    }

    #[test]
    fn patch_layout_permutation_invariance() {
        let (s, t) = pair(8, 8, 4, 13);
        let cfg = oc_cfg(0.4, 2, 2, 1, DistanceKind::L2Squared);
        let base = loss_oc_detailed(&s, &t, &cfg).unwrap();

        let mut order: Vec<usize> = (0..16).collect();
        Rng::new(99).shuffle(&mut order);
        let permute = |f: &FeatureMap| {
            let (grid, patches) = split_patches(f, 2, 2).unwrap();
            let moved: Vec<FeatureMap> = order.iter().map(|&i| patches[i].clone()).collect();
            reassemble_patches(&grid, &moved).unwrap()
        };
        let moved = loss_oc_detailed(&permute(&s), &permute(&t), &cfg).unwrap();
        assert!(close(base.loss, moved.loss, 1e-12));
        for (new_pos, &old) in order.iter().enumerate() {
            assert!(close(moved.patch_sums[new_pos], base.patch_sums[old], 1e-12));
        }
    }

    #[test]
    fn student_equal_teacher_does_not_raise_positive_distance() {
        // distinct teacher slices, student = teacher
        let (_, t) = pair(4, 4, 4, 14);
        let cfg = oc_cfg(0.5, 2, 2, 1, DistanceKind::L2Squared);
        let (_, grad) = loss_oc(&t, &t, &cfg).unwrap();
        assert!(grad.data().iter().any(|&g| g != 0.0));
        // ∂Σd_pos/∂Fs = 2(Fs − Ft) vanishes, so its inner product with the
        // descent direction is zero to first order.
        let pos_sum = |s: &FeatureMap| -> f64 { s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum() };
        for eta in [1e-3, 1e-4, 1e-5] {
            let mut stepped = t.clone();
            stepped.add_scaled(&grad, -eta).unwrap();
            let rate = pos_sum(&stepped) / eta;
            assert!(rate <= eta * grad.data().iter().map(|g| g * g).sum::<f64>() * 1.000001);
        }
    }

    #[test]
    fn kd_identical_logits_zero() {
        let (s, _) = pair(3, 3, 5, 15);
        let (loss, grad) = loss_kd(&s, &s, 4.0).unwrap();
        assert!(loss.abs() < 1e-14);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn kd_decreases_as_logits_converge() {
        let (s, t) = pair(3, 3, 5, 16);
        let mut prev = f64::INFINITY;
        for alpha in [0.0, 0.25, 0.5, 0.75, 0.95] {
            let mut mix = s.scaled(1.0 - alpha);
            mix.add_scaled(&t, alpha).unwrap();
            let (loss, _) = loss_kd(&mix, &t, 4.0).unwrap();
            assert!(loss >= 0.0 && loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn kd_grad_matches_finite_differences() {
        let mut r = Rng::new(17);
        let s = FeatureMap::random_normal(4, 4, 5, 3.0, &mut r);
        let t = FeatureMap::random_normal(4, 4, 5, 3.0, &mut r);
        let (_, grad) = loss_kd(&s, &t, 4.0).unwrap();
        let num = oracle::grad_finite_diff(|x| Ok(loss_kd(x, &t, 4.0)?.0), &s, &FiniteDiffSpec::default()).unwrap();
        assert!(oracle::max_relative_error(num.data(), grad.data()) < 1e-5);
    }

    #[test]
    fn total_loss_examples() {
        let zero = LossWeights { kd: 0.0, fd: 0.0, afdcd: 0.0 };
        assert_eq!(total_loss(1.7, 3.0, 4.0, 5.0, zero).unwrap().total, 1.7);
        let d = LossWeights::default();
        assert_eq!((d.kd, d.fd, d.afdcd), (1.0, 2e-5, 5e-3));
        let b = total_loss(1.0, 1.0, 1.0, 1.0, d).unwrap();
        assert!(close(b.total, 1.0 + 1.0 + 2e-5 + 5e-3, 1e-15));
        assert!(total_loss(0.0, 0.0, 0.0, 0.0, LossWeights { kd: -1.0, ..d }).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shift_invariance(seed in any::<u64>(), l1 in any::<bool>()) {
            let kind = if l1 { DistanceKind::L1 } else { DistanceKind::L2Squared };
            let (s, t) = pair(4, 4, 4, seed);
            let mut r = Rng::new(seed ^ 0xabc);
            let shift: Vec<f64> = (0..2).map(|_| 3.0 * r.normal()).collect();
            let add = |f: &FeatureMap| FeatureMap::from_fn(4, 4, 4, |y, x, c| f.get(y, x, c) + shift[c % 2]);
            let cfg = oc_cfg(0.6, 2, 2, 1, kind);
            let a = loss_oc(&s, &t, &cfg).unwrap().0;
            let b = loss_oc(&add(&s), &add(&t), &cfg).unwrap().0;
            prop_assert!(close(a, b, 1e-9));
            let a = loss_cc(&s, &t, 2, 0.6, kind).unwrap().0;
            let b = loss_cc(&add(&s), &add(&t), 2, 0.6, kind).unwrap().0;
            prop_assert!(close(a, b, 1e-9));
        }

        #[test]
        fn temperature_scale_identity(seed in any::<u64>(), scale in 0.3f64..3.0) {
            let (s, t) = pair(4, 4, 4, seed);
            let tau = 0.8;
            let a = loss_sc(&s.scaled(scale), &t.scaled(scale), tau, DistanceKind::L2Squared).unwrap().0;
            let b = loss_sc(&s, &t, tau / (scale * scale), DistanceKind::L2Squared).unwrap().0;
            prop_assert!(close(a, b, 1e-9));
        }

        #[test]
        fn sample_loss_monotone(d_pos in 0.0f64..10.0, negs in prop::collection::vec(0.0f64..10.0, 1..8), tau in 0.05f64..2.0, incl in any::<bool>()) {
            let l = contrast_sample(d_pos, &negs, tau, incl).unwrap();
            prop_assert!(l.d_negs.iter().all(|&g| g < 0.0));
            if incl {
                // the softmax correction can round the positive slope to zero
                prop_assert!(l.d_pos >= 0.0);
                prop_assert!(l.loss >= -1e-12);
            } else {
                prop_assert!(l.d_pos > 0.0);
            }
        }
    }
}
