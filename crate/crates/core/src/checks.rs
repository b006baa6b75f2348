//! Randomised verification suites: optimized losses against brute-force
//! enumeration, analytical gradients against central differences.

use crate::error::Result;
use crate::losses::{l_fd, loss_cc_with, loss_kd, loss_oc, loss_sc_with, ContrastConfig, DistanceKind};
use crate::masking::{generator_backward, generator_forward, generator_init};
use crate::nn::{softmax_xent, IGNORE_INDEX};
use crate::oracle::{self, FiniteDiffSpec};
use crate::partition::PoolCoupling;
use crate::rng::Rng;
use crate::tensor::{FeatureMap, LabelMap};

pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const GRAD_TOLERANCE: f64 = 1e-5;

/// Worst discrepancy of one check over its random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    /// Gated value: absolute difference for oracle checks, normwise
    /// relative error for gradient checks.
    pub worst: f64,
    pub tolerance: f64,
    /// Largest elementwise relative error, for gradient checks; reported only.
    pub worst_elementwise: Option<f64>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }

    pub fn line(&self) -> String {
        let mut line = format!(
            "{} {}: {} instances, worst {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.worst,
            self.tolerance
        );
        if let Some(e) = self.worst_elementwise {
            line.push_str(&format!(", elementwise {e:.3e}"));
        }
        line
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn pick<T: Copy>(items: &[T], rng: &mut Rng) -> T {
    items[rng.below(items.len())]
}

fn random_pair(h: usize, w: usize, c: usize, rng: &mut Rng) -> (FeatureMap, FeatureMap) {
    let scale = rng.uniform_in(0.2, 0.6);
    let s = FeatureMap::random_normal(h, w, c, scale, rng);
    let t = FeatureMap::random_normal(h, w, c, scale, rng);
    (s, t)
}

fn contrast_params(rng: &mut Rng, trial: usize) -> (DistanceKind, f64, bool) {
    let kind = DistanceKind::ALL[trial % DistanceKind::ALL.len()];
    (kind, rng.uniform_in(0.1, 1.0), rng.bernoulli(0.25))
}

fn oc_instance(rng: &mut Rng, trial: usize) -> (FeatureMap, FeatureMap, ContrastConfig) {
    loop {
        let q = 1 + trial % 2;
        let h = q * pick(&[1, 2, 3, 4], rng);
        let w = q * pick(&[1, 2, 3, 4], rng);
        let c = 1 + rng.below(16);
        let sides: Vec<usize> = divisors(h / q).into_iter().filter(|d| (w / q) % d == 0).collect();
        let n = pick(&sides, rng);
        let groups = pick(&divisors(c), rng);
        if n * n * groups < 2 {
            continue;
        }
        let (distance, tau, include_positive) = contrast_params(rng, trial);
        let pool_coupling = if rng.bernoulli(0.5) {
            PoolCoupling::Independent
        } else {
            PoolCoupling::StudentIndices
        };
        let (s, t) = random_pair(h, w, c, rng);
        let cfg = ContrastConfig {
            tau,
            groups,
            patch_side: n,
            pool_factor: q,
            distance,
            include_positive,
            pool_coupling,
        };
        return (s, t, cfg);
    }
}

fn sc_instance(rng: &mut Rng) -> (FeatureMap, FeatureMap) {
    loop {
        let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
        if h * w >= 2 {
            return random_pair(h, w, 1 + rng.below(16), rng);
        }
    }
}

fn cc_instance(rng: &mut Rng) -> (FeatureMap, FeatureMap, usize) {
    let c = 2 + rng.below(15);
    let groups = pick(&divisors(c)[1..], rng);
    let (s, t) = random_pair(1 + rng.below(8), 1 + rng.below(8), c, rng);
    (s, t, groups)
}

/// Optimized SC, CC and OC against the enumeration oracles.
pub fn run_oracle_suite(trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let base = Rng::new(seed);
    let mut reports = Vec::new();

    let mut rng = base.fork(1);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let (s, t) = sc_instance(&mut rng);
        let (kind, tau, inc) = contrast_params(&mut rng, trial);
        let fast = loss_sc_with(&s, &t, tau, kind, inc)?.0;
        let slow = oracle::sc_bruteforce(&s, &t, tau, kind, inc)?;
        worst = worst.max((fast - slow).abs());
    }
    reports.push(CheckReport { name: "loss_sc", instances: trials, worst, tolerance: ORACLE_TOLERANCE, worst_elementwise: None });

    let mut rng = base.fork(2);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let (s, t, groups) = cc_instance(&mut rng);
        let (kind, tau, inc) = contrast_params(&mut rng, trial);
        let fast = loss_cc_with(&s, &t, groups, tau, kind, inc)?.0;
        let slow = oracle::cc_bruteforce(&s, &t, groups, tau, kind, inc)?;
        worst = worst.max((fast - slow).abs());
    }
    reports.push(CheckReport { name: "loss_cc", instances: trials, worst, tolerance: ORACLE_TOLERANCE, worst_elementwise: None });

    let mut rng = base.fork(3);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let (s, t, cfg) = oc_instance(&mut rng, trial);
        let fast = loss_oc(&s, &t, &cfg)?.0;
        let slow = oracle::oc_bruteforce(&s, &t, &cfg)?;
        worst = worst.max((fast - slow).abs());
    }
    reports.push(CheckReport { name: "loss_oc", instances: trials, worst, tolerance: ORACLE_TOLERANCE, worst_elementwise: None });
    Ok(reports)
}

/// Running maxima of the normwise and elementwise relative errors.
#[derive(Default, Clone, Copy)]
struct GradErr {
    norm: f64,
    elem: f64,
}

impl GradErr {
    fn of(analytic: &[f64], numeric: &[f64]) -> Self {
        Self {
            norm: oracle::relative_error_l2(analytic, numeric),
            elem: oracle::max_relative_error(analytic, numeric),
        }
    }

    fn max(self, other: GradErr) -> GradErr {
        GradErr {
            norm: self.norm.max(other.norm),
            elem: self.elem.max(other.elem),
        }
    }
}

/// Analytical gradient norm below which an instance is treated as locally
/// constant: piecewise-linear L1 regions where sign terms cancel, cosine
/// on one-element groups.
const VANISHING_GRADIENT: f64 = 1e-9;
/// Absolute finite-difference norm tolerated on such instances.
const VANISHING_FD_NOISE: f64 = 1e-8;

/// `None` when the analytical gradient vanishes identically and the
/// differences agree in absolute terms; relative error is undefined there
/// and the caller draws another instance.
fn fd_err(
    f: impl FnMut(&FeatureMap) -> Result<f64>,
    at: &FeatureMap,
    analytic: &FeatureMap,
    spec: &FiniteDiffSpec,
) -> Result<Option<GradErr>> {
    let num = oracle::grad_finite_diff(f, at, spec)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm(analytic.data()) < VANISHING_GRADIENT {
        if norm(num.data()) < VANISHING_FD_NOISE {
            return Ok(None);
        }
        return Ok(Some(GradErr { norm: f64::INFINITY, elem: f64::INFINITY }));
    }
    Ok(Some(GradErr::of(analytic.data(), num.data())))
}

const COSINE_MIN_NORM: f64 = 1e-2;

/// Whether a central-difference stencil of half-width `eps` around `s` can
/// cross a point where the contrastive loss is not differentiable (an L1
/// coordinate tie between student and teacher, a max-pool tie) or lies
/// near the cosine singularity at the zero vector, where truncation error
/// grows like `(eps / ‖v‖)²`.
fn near_kink(s: &FeatureMap, t: &FeatureMap, group_len: usize, kind: DistanceKind, pool: usize, eps: f64) -> bool {
    let margin = 2.0 * eps;
    let (h, w, c) = s.dims();
    match kind {
        DistanceKind::L1 => {
            for (i, a) in s.data().iter().enumerate() {
                for (j, b) in t.data().iter().enumerate() {
                    if (i % c) % group_len == (j % c) % group_len && (a - b).abs() < margin {
                        return true;
                    }
                }
            }
        }
        DistanceKind::CosineDistance => {
            if s.data().chunks(group_len).any(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt() < COSINE_MIN_NORM) {
                return true;
            }
        }
        _ => {}
    }
    if pool > 1 {
        for by in (0..h).step_by(pool) {
            for bx in (0..w).step_by(pool) {
                for ch in 0..c {
                    let mut vals = Vec::with_capacity(pool * pool);
                    for y in by..by + pool {
                        for x in bx..bx + pool {
                            vals.push(s.get(y, x, ch));
                        }
                    }
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    if vals.windows(2).any(|p| p[1] - p[0] < margin) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn dot(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Analytical gradients against central differences.
pub fn run_grad_suite(trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let spec = FiniteDiffSpec::default();
    let eps = spec.epsilon;
    let base = Rng::new(seed);
    let mut reports = Vec::new();
    let mut record = |name, e: GradErr| {
        reports.push(CheckReport {
            name,
            instances: trials,
            worst: e.norm,
            tolerance: GRAD_TOLERANCE,
            worst_elementwise: Some(e.elem),
        })
    };

    let mut rng = base.fork(11);
    let mut worst = GradErr::default();
    for _ in 0..trials {
        let (s, t) = random_pair(1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(16), &mut rng);
        let g = l_fd(&t, &s)?.1;
        worst = worst.max(fd_err(|x| Ok(l_fd(&t, x)?.0), &s, &g, &spec)?.unwrap_or_default());
    }
    record("l_fd", worst);

    let mut rng = base.fork(12);
    let mut worst = GradErr::default();
    let mut trial = 0;
    while trial < trials {
        let (s, t) = sc_instance(&mut rng);
        let (kind, tau, inc) = contrast_params(&mut rng, trial);
        if near_kink(&s, &t, s.channels(), kind, 1, eps) {
            continue;
        }
        let g = loss_sc_with(&s, &t, tau, kind, inc)?.1;
        let Some(e) = fd_err(|x| Ok(loss_sc_with(x, &t, tau, kind, inc)?.0), &s, &g, &spec)? else {
            continue;
        };
        worst = worst.max(e);
        trial += 1;
    }
    record("loss_sc", worst);

    let mut rng = base.fork(13);
    let mut worst = GradErr::default();
    let mut trial = 0;
    while trial < trials {
        let (s, t, groups) = cc_instance(&mut rng);
        let (kind, tau, inc) = contrast_params(&mut rng, trial);
        if near_kink(&s, &t, s.channels() / groups, kind, 1, eps) {
            continue;
        }
        let g = loss_cc_with(&s, &t, groups, tau, kind, inc)?.1;
        let Some(e) = fd_err(|x| Ok(loss_cc_with(x, &t, groups, tau, kind, inc)?.0), &s, &g, &spec)? else {
            continue;
        };
        worst = worst.max(e);
        trial += 1;
    }
    record("loss_cc", worst);

    let mut rng = base.fork(14);
    let mut worst = GradErr::default();
    let mut trial = 0;
    while trial < trials {
        let (s, t, cfg) = oc_instance(&mut rng, trial);
        if near_kink(&s, &t, s.channels() / cfg.groups, cfg.distance, cfg.pool_factor, eps) {
            continue;
        }
        let g = loss_oc(&s, &t, &cfg)?.1;
        let Some(e) = fd_err(|x| Ok(loss_oc(x, &t, &cfg)?.0), &s, &g, &spec)? else {
            continue;
        };
        worst = worst.max(e);
        trial += 1;
    }
    record("loss_oc", worst);

    let mut rng = base.fork(15);
    let mut worst = GradErr::default();
    for _ in 0..trials {
        let (h, w, k) = (1 + rng.below(8), 1 + rng.below(8), 2 + rng.below(8));
        let s = FeatureMap::random_normal(h, w, k, 2.0, &mut rng);
        let t = FeatureMap::random_normal(h, w, k, 2.0, &mut rng);
        let temp = rng.uniform_in(0.5, 8.0);
        let g = loss_kd(&s, &t, temp)?.1;
        worst = worst.max(fd_err(|x| Ok(loss_kd(x, &t, temp)?.0), &s, &g, &spec)?.unwrap_or_default());
    }
    record("loss_kd", worst);

    let mut rng = base.fork(16);
    let mut worst = GradErr::default();
    for _ in 0..trials {
        let (h, w, k) = (1 + rng.below(8), 1 + rng.below(8), 2 + rng.below(8));
        let logits = FeatureMap::random_normal(h, w, k, 2.0, &mut rng);
        let mut labels = LabelMap::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                let l = if rng.bernoulli(0.1) { IGNORE_INDEX } else { rng.below(k) as u8 };
                labels.set(y, x, l);
            }
        }
        let g = softmax_xent(&logits, &labels)?.1;
        worst = worst.max(fd_err(|x| Ok(softmax_xent(x, &labels)?.0), &logits, &g, &spec)?.unwrap_or_default());
    }
    record("softmax_xent", worst);

    let mut rng = base.fork(17);
    let mut worst = GradErr::default();
    for _ in 0..trials {
        worst = worst.max(generator_instance(&mut rng, &spec)?);
    }
    record("generator_forward", worst);
    Ok(reports)
}

/// `⟨R, G(x)⟩` for a random projection `R`, differentiated with respect to
/// the input and every generator parameter. Instances with a hidden
/// pre-activation within reach of the ReLU kink are redrawn.
fn generator_instance(rng: &mut Rng, spec: &FiniteDiffSpec) -> Result<GradErr> {
    loop {
        let (h, w) = (1 + rng.below(6), 1 + rng.below(6));
        let (cs, ct) = (1 + rng.below(8), 1 + rng.below(8));
        let params = generator_init(cs, ct, rng)?;
        let x = FeatureMap::random_normal(h, w, cs, 1.0, rng);
        let r = FeatureMap::random_normal(h, w, ct, 1.0, rng);
        let hidden = crate::nn::conv2d(&x, &params.conv1)?;
        // A single perturbation moves a hidden pre-activation by at most
        // eps times the largest input, kernel weight or 1 (bias).
        let max_abs = |v: &[f64]| v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let reach = 2.0 * spec.epsilon * max_abs(x.data()).max(max_abs(params.conv1.kernel().data()));
        if hidden.data().iter().any(|v| v.abs() < reach) {
            continue;
        }
        let (_, cache) = generator_forward(&x, &params)?;
        let grads = generator_backward(&cache, &params, &r)?;
        let mut worst = fd_err(|v| Ok(dot(&r, &generator_forward(v, &params)?.0)), &x, &grads.input, spec)?.unwrap_or_default();

        let analytic = [
            grads.conv1.kernel.data(),
            grads.conv1.bias.data(),
            grads.conv2.kernel.data(),
            grads.conv2.bias.data(),
        ];
        for (slot, analytic) in analytic.into_iter().enumerate() {
            let current = {
                let mut p = params.clone();
                match slot {
                    0 => p.conv1.kernel_mut().to_vec(),
                    1 => p.conv1.bias_mut().to_vec(),
                    2 => p.conv2.kernel_mut().to_vec(),
                    _ => p.conv2.bias_mut().to_vec(),
                }
            };
            let num = oracle::grad_finite_diff_slice(
                |v| {
                    let mut p = params.clone();
                    let target = match slot {
                        0 => p.conv1.kernel_mut(),
                        1 => p.conv1.bias_mut(),
                        2 => p.conv2.kernel_mut(),
                        _ => p.conv2.bias_mut(),
                    };
                    target.copy_from_slice(v);
                    Ok(dot(&r, &generator_forward(&x, &p)?.0))
                },
                &current,
                spec,
            )?;
            worst = worst.max(GradErr::of(analytic, &num));
        }
        return Ok(worst);
    }
}
