//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use afdcd_core::checks::{run_grad_suite, run_oracle_suite};
use afdcd_core::harness::train::{distill_student, run_experiment, train_teacher, DistillRun, FrozenTeacher, RECORD_FILE, SELF_SIMILARITY_FILE};
use afdcd_core::harness::{gen_toy_dataset, LossTerm, RunConfig, RunRecord};
use afdcd_core::losses::{loss_cc, loss_cc_with, loss_oc_detailed, loss_sc, loss_sc_with};
use afdcd_core::metrics::{self_similarity_population, self_similarity_stats};
use afdcd_core::oracle;
use afdcd_core::partition::DEFAULT_OPS_PER_ELEMENT;
use afdcd_core::{loss_oc, pair_count_model, sample_mask, ContrastConfig, DistanceKind, FeatureMap, FlopsQuery, PatchExtent, PoolCoupling, Rng};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn worst_diff(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    pairs.into_iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn pair(h: usize, w: usize, c: usize, scale: f64, rng: &mut Rng) -> (FeatureMap, FeatureMap) {
    (FeatureMap::random_normal(h, w, c, scale, rng), FeatureMap::random_normal(h, w, c, scale, rng))
}

fn oc_cfg(tau: f64, groups: usize, n: usize, q: usize, distance: DistanceKind) -> ContrastConfig {
    ContrastConfig {
        tau,
        groups,
        patch_side: n,
        pool_factor: q,
        distance,
        include_positive: false,
        pool_coupling: PoolCoupling::Independent,
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let reports = run_oracle_suite(120, 2024).expect("oracle suite runs");
    let secs = start.elapsed().as_secs_f64();
    let all = reports.iter().all(|r| r.passed() && r.instances >= 100);
    let parts: Vec<String> = reports.iter().map(|r| format!("{} {:.1e}", r.name, r.worst)).collect();
    outcome(all && secs < 60.0, format!("{} over {} instances each, {secs:.1}s", parts.join(", "), reports[0].instances))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let reports = run_grad_suite(25, 7).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let all = reports.iter().all(|r| r.passed() && r.instances >= 20);
    let parts: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {:.1e} (elementwise {:.1e})", r.name, r.worst, r.worst_elementwise.unwrap_or(f64::NAN)))
        .collect();
    outcome(
        all && secs < 120.0,
        format!("worst normwise relative error over {} instances each: {}, {secs:.1}s", reports[0].instances, parts.join(", ")),
    )
}

fn closed_forms() -> Outcome {
    let constant = |h, w, c| FeatureMap::filled(h, w, c, 0.37);
    let f8x8x16 = constant(8, 8, 16);
    let cases = [
        (loss_oc(&constant(8, 8, 4), &constant(8, 8, 4), &oc_cfg(0.07, 2, 2, 1, DistanceKind::L2Squared)).unwrap().0, 7f64.ln()),
        (loss_oc(&f8x8x16, &f8x8x16, &oc_cfg(0.07, 16, 4, 1, DistanceKind::L2Squared)).unwrap().0, 255f64.ln()),
        (loss_oc(&constant(16, 16, 16), &constant(16, 16, 16), &oc_cfg(0.07, 16, 4, 2, DistanceKind::L2Squared)).unwrap().0, 255f64.ln()),
        (loss_cc(&f8x8x16, &f8x8x16, 16, 0.07, DistanceKind::L2Squared).unwrap().0, 15f64.ln()),
        (loss_cc(&f8x8x16, &f8x8x16, 4, 0.07, DistanceKind::L1).unwrap().0, 3f64.ln()),
        (loss_sc(&f8x8x16, &f8x8x16, 0.07, DistanceKind::L2Squared).unwrap().0, 63f64.ln()),
        (loss_sc(&constant(5, 3, 2), &constant(5, 3, 2), 0.5, DistanceKind::CosineDistance).unwrap().0, 14f64.ln()),
    ];
    let worst = worst_diff(cases);
    outcome(worst <= 1e-12, format!("{} constant-map cases, worst |loss - ln(count)| {worst:.1e}", cases.len()))
}

fn reduction_identities() -> Outcome {
    let mut rng = Rng::new(404);
    let mut sc_pairs = Vec::new();
    let mut cc_pairs = Vec::new();
    for trial in 0..60 {
        let kind = DistanceKind::ALL[trial % 3];
        let side = 1 + rng.below(6);
        let c = 1 + rng.below(12);
        let (s, t) = pair(side, side, c, 0.5, &mut rng);
        let tau = rng.uniform_in(0.1, 1.0);
        if side * side >= 2 {
            let oc = loss_oc(&s, &t, &oc_cfg(tau, 1, side, 1, kind)).unwrap().0;
            sc_pairs.push((oc, loss_sc(&s, &t, tau, kind).unwrap().0));
        }
        let groups: Vec<usize> = (2..=c).filter(|g| c % g == 0).collect();
        if !groups.is_empty() {
            let m = groups[rng.below(groups.len())];
            let (s, t) = pair(1 + rng.below(6), 1 + rng.below(6), c, 0.5, &mut rng);
            let oc = loss_oc(&s, &t, &oc_cfg(tau, m, 1, 1, kind)).unwrap().0;
            cc_pairs.push((oc, loss_cc(&s, &t, m, tau, kind).unwrap().0));
        }
    }
    let (ws, wc) = (worst_diff(sc_pairs.clone()), worst_diff(cc_pairs.clone()));
    outcome(
        ws <= 1e-12 && wc <= 1e-12,
        format!("oc(n=H=W, M=1) vs sc: {} instances, worst {ws:.1e}; oc(n=1) vs cc: {} instances, worst {wc:.1e}", sc_pairs.len(), cc_pairs.len()),
    )
}

fn efficiency_ratios() -> Outcome {
    let flops = |patch| {
        pair_count_model(&FlopsQuery {
            height: 64,
            width: 64,
            channels: 512,
            groups: 16,
            patch,
            pool: 1,
            ops_per_element: DEFAULT_OPS_PER_ELEMENT,
        })
        .unwrap()
        .flops as f64
    };
    let (f2, f4, f16, full) = (flops(PatchExtent::Side(2)), flops(PatchExtent::Side(4)), flops(PatchExtent::Side(16)), flops(PatchExtent::Full));
    let ratios = [f4 / f2, f16 / f4, full / f16];
    let exact = ratios == [4.0, 16.0, 16.0];
    // Table entries in G: 1.6, 6.4, 1.0e2, 1.6e3.
    let published = [6.4 / 1.6, 1.0e2 / 6.4, 1.6e3 / 1.0e2];
    let within = ratios.iter().zip(&published).all(|(r, p)| ((r - p) / p).abs() <= 0.05);
    outcome(
        exact && within,
        format!("ratios {:?} vs published {:?} (each within 5%: {within})", ratios, published.map(|p| (p * 1000.0).round() / 1000.0)),
    )
}

/// Adds `shift[ch % len]` to every element of a map.
fn shifted(f: &FeatureMap, shift: &[f64]) -> FeatureMap {
    let mut out = f.clone();
    let c = f.channels();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += shift[(i % c) % shift.len()];
    }
    out
}

fn invariance_suite() -> Outcome {
    let mut rng = Rng::new(77);
    let mut shift_worst: f64 = 0.0;
    let mut scale_worst: f64 = 0.0;
    let mut cos_worst: f64 = 0.0;
    let mut perm_worst: f64 = 0.0;
    for trial in 0..30 {
        let (s, t) = pair(8, 8, 8, 0.5, &mut rng);
        let tau = rng.uniform_in(0.2, 1.0);
        let inc = trial % 4 == 3;
        let kind = if trial % 2 == 0 { DistanceKind::L2Squared } else { DistanceKind::L1 };

        let full: Vec<f64> = (0..8).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
        let sc = loss_sc_with(&s, &t, tau, kind, inc).unwrap().0;
        let sc_shift = loss_sc_with(&shifted(&s, &full), &shifted(&t, &full), tau, kind, inc).unwrap().0;
        let groups = [2, 4][trial % 2];
        let part = &full[..8 / groups];
        let cc = loss_cc_with(&s, &t, groups, tau, kind, inc).unwrap().0;
        let cc_shift = loss_cc_with(&shifted(&s, part), &shifted(&t, part), groups, tau, kind, inc).unwrap().0;
        let mut cfg = oc_cfg(tau, groups, 2, 1 + trial % 2, kind);
        cfg.include_positive = inc;
        let oc = loss_oc(&s, &t, &cfg).unwrap().0;
        let oc_shift = loss_oc(&shifted(&s, part), &shifted(&t, part), &cfg).unwrap().0;
        shift_worst = shift_worst.max(worst_diff([(sc, sc_shift), (cc, cc_shift), (oc, oc_shift)]));

        let k = rng.uniform_in(0.5, 3.0);
        let (ss, ts) = (s.scaled(k), t.scaled(k));
        let l2 = DistanceKind::L2Squared;
        let mut a = oc_cfg(tau, groups, 2, 1 + trial % 2, l2);
        let mut b = a;
        b.tau = tau / (k * k);
        a.include_positive = inc;
        b.include_positive = inc;
        scale_worst = scale_worst.max(worst_diff([
            (loss_sc_with(&ss, &ts, tau, l2, inc).unwrap().0, loss_sc_with(&s, &t, tau / (k * k), l2, inc).unwrap().0),
            (loss_cc_with(&ss, &ts, groups, tau, l2, inc).unwrap().0, loss_cc_with(&s, &t, groups, tau / (k * k), l2, inc).unwrap().0),
            (loss_oc(&ss, &ts, &a).unwrap().0, loss_oc(&s, &t, &b).unwrap().0),
        ]));

        let neg_cos = |x: &[f64], y: &[f64]| -> f64 {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
            -dot / (nx * ny)
        };
        for (n, m, q) in [(8, 1, 1), (1, groups, 1), (2, groups, 1 + trial % 2)] {
            let mut cfg = oc_cfg(tau, m, n, q, DistanceKind::CosineDistance);
            cfg.include_positive = inc;
            let ours = loss_oc(&s, &t, &cfg).unwrap().0;
            let shifted_d = oracle::oc_bruteforce_with(&s, &t, &cfg, |x, y| neg_cos(x, y)).unwrap();
            cos_worst = cos_worst.max((ours - shifted_d).abs());
        }

        let out = loss_oc_detailed(&s, &t, &cfg).unwrap();
        let mut sums = out.patch_sums.clone();
        rng.shuffle(&mut sums);
        let permuted = sums.iter().sum::<f64>() / out.samples as f64;
        sums.reverse();
        let reversed = sums.iter().sum::<f64>() / out.samples as f64;
        perm_worst = perm_worst.max(worst_diff([(permuted, out.loss), (reversed, out.loss)]));
    }

    let zeta: f64 = 0.75;
    let positions = 64.0 * 64.0;
    let sigma = (zeta * (1.0 - zeta) / positions).sqrt();
    let mut frac_worst: f64 = 0.0;
    let mut pooled = 0.0;
    let draws = 10;
    for seed in 0..draws {
        let m = sample_mask(64, 64, zeta, &mut Rng::new(seed)).unwrap();
        frac_worst = frac_worst.max((m.masked_fraction() - zeta).abs() / sigma);
        pooled += m.masked_fraction();
    }
    let pooled_z = (pooled / draws as f64 - zeta).abs() / (sigma / (draws as f64).sqrt());

    let passed = shift_worst <= 1e-9 && scale_worst <= 1e-9 && cos_worst <= 1e-9 && perm_worst <= 1e-12 && frac_worst <= 3.0 && pooled_z <= 3.0;
    outcome(
        passed,
        format!(
            "shift {shift_worst:.1e}, temperature scale {scale_worst:.1e}, cosine constant {cos_worst:.1e}, patch permutation {perm_worst:.1e}, \
             mask fraction worst {frac_worst:.2} sigma over {draws} masks (pooled {pooled_z:.2} sigma)"
        ),
    )
}

fn small_config() -> RunConfig {
    RunConfig {
        train_count: 64,
        val_count: 16,
        teacher_iterations: 10,
        iterations: 12,
        batch_size: 4,
        seed: 5,
        ..RunConfig::default()
    }
}

fn determinism_and_identity() -> Outcome {
    let cfg = small_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&cfg, d.path()).expect("run completes");
    }
    let bytes: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(d.path().join(RECORD_FILE)).unwrap()).collect();
    let identical = bytes[0] == bytes[1];
    let record = RunRecord::parse_csv(std::str::from_utf8(&bytes[0]).unwrap(), cfg.seed).unwrap();
    let weights = cfg.weights();
    let rows_ok = record.rows.iter().all(|r| r.satisfies_identity(&weights));
    let nonzero = record.rows.iter().all(|r| r.kd > 0.0 && r.fd > 0.0 && r.afdcd != 0.0);
    let count_ok = record.rows.len() == cfg.iterations;
    outcome(
        identical && rows_ok && count_ok && nonzero,
        format!(
            "{} rows, byte-identical: {identical}, identity exact on every row: {rows_ok}, all components active: {nonzero}",
            record.rows.len()
        ),
    )
}

struct SeedRuns {
    seed: u64,
    afdcd: DistillRun,
    fd_only: DistillRun,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn distillation_runs() -> (Vec<SeedRuns>, f64, f64) {
    let start = Instant::now();
    let base = RunConfig::default();
    let data = gen_toy_dataset(&base.dataset()).unwrap();
    let teacher = train_teacher(&base, &data, &Rng::new(base.teacher_seed)).unwrap();
    let teacher = FrozenTeacher::new(teacher, &data).unwrap();
    let teacher_miou = teacher.miou.miou;
    let mut runs = Vec::new();
    for seed in 1..=5u64 {
        let run = |terms: Vec<LossTerm>| {
            let cfg = RunConfig {
                seed,
                loss_terms: terms,
                ..base.clone()
            };
            distill_student(&cfg, &teacher, &data, &Rng::new(seed)).unwrap()
        };
        runs.push(SeedRuns {
            seed,
            afdcd: run(vec![LossTerm::Task, LossTerm::Fd, LossTerm::Afdcd]),
            fd_only: run(vec![LossTerm::Task, LossTerm::Fd]),
        });
    }
    (runs, teacher_miou, start.elapsed().as_secs_f64())
}

fn directional_effect(runs: &[SeedRuns], teacher_miou: f64, secs: f64) -> Outcome {
    let mut lines = Vec::new();
    let mut all_decrease = true;
    for r in runs {
        let (a, b) = (r.afdcd.initial.ts_distance.mean, r.afdcd.final_probe.ts_distance.mean);
        all_decrease &= b < a;
        lines.push(format!(
            "seed {}: ts {a:.4}->{b:.4}, mIoU {:.4} vs fd-only {:.4}",
            r.seed, r.afdcd.miou.miou, r.fd_only.miou.miou
        ));
    }
    let med_af = median(runs.iter().map(|r| r.afdcd.miou.miou).collect());
    let med_fd = median(runs.iter().map(|r| r.fd_only.miou.miou).collect());
    let passed = all_decrease && med_af >= med_fd && secs < 1800.0;
    outcome(
        passed,
        format!(
            "teacher mIoU {teacher_miou:.4}; ts distance decreases for every seed: {all_decrease}; median mIoU {med_af:.4} (fd+afdcd) vs {med_fd:.4} (fd); {secs:.0}s\n    {}",
            lines.join("\n    ")
        ),
    )
}

/// Full-population self-similarity statistics against the enumeration oracle,
/// plus the emitted CSV, for one run.
fn self_similarity_check(run: &DistillRun, cfg: &RunConfig) -> (f64, f64) {
    let f = &run.final_probe.student_features;
    let (window, groups) = (cfg.patch_side, cfg.channel_groups);
    let population = self_similarity_population(f, window, groups).unwrap();
    let stats = self_similarity_stats(f, window, groups, population, &mut Rng::new(0)).unwrap();
    let values = oracle::self_similarity_bruteforce(f, window, groups).unwrap();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let err = worst_diff([(stats.mean, mean), (stats.variance, var), (stats.sample_count as f64, n)]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(SELF_SIMILARITY_FILE);
    std::fs::write(&path, run.final_probe.self_similarity.to_csv()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let emitted_ok = text.starts_with("bin_lo,bin_hi,count\n") && text.contains("mean,variance,n\n");
    (if emitted_ok { err } else { f64::INFINITY }, var)
}

fn self_similarity_diagnostic(runs: &[SeedRuns]) -> Outcome {
    let cfg = RunConfig::default();
    let mut worst: f64 = 0.0;
    let mut wins = 0;
    let mut lines = Vec::new();
    for r in runs {
        let (ea, va) = self_similarity_check(&r.afdcd, &cfg);
        let (ef, vf) = self_similarity_check(&r.fd_only, &cfg);
        worst = worst.max(ea).max(ef);
        if va >= vf {
            wins += 1;
        }
        lines.push(format!("seed {}: variance {va:.5} (fd+afdcd) vs {vf:.5} (fd)", r.seed));
    }
    outcome(
        worst <= 1e-12,
        format!(
            "oracle agreement {worst:.1e}; afdcd variance >= fd-only variance in {wins} of {} seeds (reported)\n    {}",
            runs.len(),
            lines.join("\n    ")
        ),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failures += 1;
        }
    };
    report(1, "oracle equivalence", oracle_equivalence());
    report(2, "gradient correctness", gradient_correctness());
    report(3, "closed-form values", closed_forms());
    report(4, "reduction identities", reduction_identities());
    report(5, "efficiency model ratios", efficiency_ratios());
    report(6, "invariance suite", invariance_suite());
    report(7, "determinism and loss identity", determinism_and_identity());
    let (runs, teacher_miou, secs) = distillation_runs();
    report(8, "directional distillation effect", directional_effect(&runs, teacher_miou, secs));
    report(9, "self-similarity diagnostic", self_similarity_diagnostic(&runs));
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
