//! Teacher pre-training, masked-reconstruction distillation and evaluation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::{LossTerm, RunConfig};
use crate::harness::dataset::{gen_toy_dataset, Dataset, Sample};
use crate::harness::dump::write_features;
use crate::harness::model::{accumulate, scale, ModelOutput, Sgd, ToyModel};
use crate::harness::record::{RecordRow, RunRecord, RunSummary};
use crate::losses::{afdcd_loss, l_fd, loss_kd, total_loss};
use crate::masking::{apply_mask, generator_backward, generator_forward, generator_init, sample_mask_with, GeneratorParams, SpatialMask};
use crate::metrics::{auto_sample_count, self_similarity_population, self_similarity_stats, ts_distance_stats, ts_population, ConfusionMatrix, DistanceHistogram, MiouReport};
use crate::nn::softmax_xent;
use crate::rng::Rng;
use crate::tensor::FeatureMap;

// Independent random streams, so enabling a loss term never shifts the
// draws of another component.
const STREAM_INIT: u64 = 1;
const STREAM_GENERATOR: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_MASKS: u64 = 4;
const STREAM_PROBE_MASKS: u64 = 5;
const STREAM_STATS_INITIAL: u64 = 6;
const STREAM_STATS_FINAL: u64 = 7;

/// Argmax predictions accumulated into one confusion matrix over `samples`.
pub fn evaluate(model: &ToyModel, samples: &[Sample]) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(model.classes());
    for s in samples {
        cm.accumulate(&model.predict(&s.image)?, &s.label)?;
    }
    cm.iou()
}

fn check_loss(value: f64, iteration: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            iteration,
            reason: format!("{what} loss is {value}"),
        })
    }
}

fn model_sizes_ok(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if data.spec.num_classes != cfg.num_classes || data.spec.image_size != cfg.image_size {
        return crate::error::shape_err("dataset does not match the run configuration");
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub model: ToyModel,
    pub miou: MiouReport,
}

/// Task-loss-only training of the teacher for `teacher_iterations` steps.
pub fn train_teacher(cfg: &RunConfig, data: &Dataset, rng: &Rng) -> Result<TeacherRun> {
    model_sizes_ok(cfg, data)?;
    let in_ch = data.train[0].image.channels();
    let mut model = ToyModel::init(in_ch, cfg.teacher_arch(), cfg.num_classes, &mut rng.fork(STREAM_INIT))?;
    let mut batches = rng.fork(STREAM_BATCHES);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, &model.param_sizes());
    let inv = 1.0 / cfg.batch_size as f64;
    for it in 0..cfg.teacher_iterations {
        let mut grads: Vec<Vec<f64>> = model.param_sizes().into_iter().map(|n| vec![0.0; n]).collect();
        let mut task = 0.0;
        for _ in 0..cfg.batch_size {
            let s = &data.train[batches.below(data.train.len())];
            let (out, cache) = model.forward_cached(&s.image)?;
            let (l, g) = softmax_xent(&out.logits, &s.label)?;
            task += l;
            accumulate(&mut grads, &model.backward(&cache, &g, None)?);
        }
        check_loss(task, it, "teacher task")?;
        scale(&mut grads, inv);
        opt.step(model.params_mut(), &grads)?;
    }
    let miou = evaluate(&model, &data.val)?;
    Ok(TeacherRun { model, miou })
}

/// A trained teacher with its outputs on the training split precomputed.
#[derive(Debug, Clone)]
pub struct FrozenTeacher {
    pub model: ToyModel,
    pub miou: MiouReport,
    train_outputs: Vec<ModelOutput>,
}

impl FrozenTeacher {
    pub fn new(run: TeacherRun, data: &Dataset) -> Result<Self> {
        let train_outputs = data.train.iter().map(|s| run.model.forward(&s.image)).collect::<Result<_>>()?;
        Ok(Self {
            model: run.model,
            miou: run.miou,
            train_outputs,
        })
    }
}

/// Feature-distance diagnostics on a fixed set of validation images.
#[derive(Debug, Clone)]
pub struct ProbeStats {
    /// Reconstructed student features of all probe images, stacked along height.
    pub student_features: FeatureMap,
    pub teacher_features: FeatureMap,
    pub ts_distance: DistanceHistogram,
    pub self_similarity: DistanceHistogram,
}

struct Probe {
    images: Vec<FeatureMap>,
    masks: Vec<SpatialMask>,
    teacher_features: FeatureMap,
}

impl Probe {
    fn new(cfg: &RunConfig, teacher: &ToyModel, data: &Dataset, rng: &Rng) -> Result<Self> {
        let mut mask_rng = rng.fork(STREAM_PROBE_MASKS);
        let samples = &data.val[..cfg.probe_images];
        let mut masks = Vec::with_capacity(samples.len());
        let mut feats = Vec::with_capacity(samples.len());
        for s in samples {
            let (h, w, _) = s.image.dims();
            masks.push(sample_mask_with(h, w, cfg.mask_ratio, cfg.mask_mode, &mut mask_rng)?);
            feats.push(teacher.forward(&s.image)?.features);
        }
        Ok(Self {
            images: samples.iter().map(|s| s.image.clone()).collect(),
            masks,
            teacher_features: FeatureMap::stack_rows(&feats)?,
        })
    }

    fn measure(&self, cfg: &RunConfig, student: &ToyModel, generator: &GeneratorParams, rng: &mut Rng) -> Result<ProbeStats> {
        let mut recon = Vec::with_capacity(self.images.len());
        for (img, mask) in self.images.iter().zip(&self.masks) {
            let f = student.forward(img)?.features;
            recon.push(generator_forward(&apply_mask(&f, mask)?, generator)?.0);
        }
        let student_features = FeatureMap::stack_rows(&recon)?;
        let groups = cfg.channel_groups;
        let ts_n = auto_sample_count(ts_population(&student_features, groups)?);
        let ts_distance = ts_distance_stats(&student_features, &self.teacher_features, groups, ts_n, rng)?;
        let ss_n = auto_sample_count(self_similarity_population(&student_features, cfg.patch_side, groups)?);
        let self_similarity = self_similarity_stats(&student_features, cfg.patch_side, groups, ss_n, rng)?;
        Ok(ProbeStats {
            student_features,
            teacher_features: self.teacher_features.clone(),
            ts_distance,
            self_similarity,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub student: ToyModel,
    pub generator: GeneratorParams,
    pub record: RunRecord,
    pub miou: MiouReport,
    pub initial: ProbeStats,
    pub final_probe: ProbeStats,
}

/// Student training under the weighted objective built from `loss_terms`.
/// Terms left out of `loss_terms` are logged as zero.
pub fn distill_student(cfg: &RunConfig, teacher: &FrozenTeacher, data: &Dataset, rng: &Rng) -> Result<DistillRun> {
    cfg.validate()?;
    model_sizes_ok(cfg, data)?;
    if teacher.train_outputs.len() != data.train.len() {
        return crate::error::shape_err("teacher outputs were computed on a different training split");
    }
    let tc = teacher.model.feature_channels();
    if tc != cfg.teacher_channels || teacher.model.classes() != cfg.num_classes {
        return crate::error::shape_err("teacher does not match the run configuration");
    }
    let in_ch = data.train[0].image.channels();
    let mut student = ToyModel::init(in_ch, cfg.student_arch(), cfg.num_classes, &mut rng.fork(STREAM_INIT))?;
    let mut generator = generator_init(student.feature_channels(), tc, &mut rng.fork(STREAM_GENERATOR))?;
    let mut batches = rng.fork(STREAM_BATCHES);
    let mut mask_rng = rng.fork(STREAM_MASKS);

    let probe = Probe::new(cfg, &teacher.model, data, rng)?;
    let initial = probe.measure(cfg, &student, &generator, &mut rng.fork(STREAM_STATS_INITIAL))?;

    let weights = cfg.weights();
    let contrast = cfg.contrast();
    let (use_kd, use_fd, use_af) = (cfg.has(LossTerm::Kd), cfg.has(LossTerm::Fd), cfg.has(LossTerm::Afdcd));
    let use_gen = use_fd || use_af;
    let mut s_opt = Sgd::new(cfg.lr, cfg.momentum, &student.param_sizes());
    let gen_sizes = [
        generator.conv1.kernel().len(),
        generator.conv1.bias().len(),
        generator.conv2.kernel().len(),
        generator.conv2.bias().len(),
    ];
    let mut g_opt = Sgd::new(cfg.lr, cfg.momentum, &gen_sizes);
    let inv = 1.0 / cfg.batch_size as f64;
    let mut record = RunRecord::new(cfg.seed);

    for it in 0..cfg.iterations {
        let mut s_grads: Vec<Vec<f64>> = student.param_sizes().into_iter().map(|n| vec![0.0; n]).collect();
        let mut g_grads: Vec<Vec<f64>> = gen_sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut sums = [0.0; 4];
        for _ in 0..cfg.batch_size {
            let idx = batches.below(data.train.len());
            let sample = &data.train[idx];
            let t_out = &teacher.train_outputs[idx];
            let (out, cache) = student.forward_cached(&sample.image)?;
            let (task, mut logits_grad) = softmax_xent(&out.logits, &sample.label)?;
            sums[0] += task;
            if use_kd {
                let (kd, g) = loss_kd(&out.logits, &t_out.logits, cfg.kd_temperature)?;
                sums[1] += kd;
                logits_grad.add_scaled(&g, weights.kd)?;
            }
            let mut feature_grad = None;
            if use_gen {
                let (h, w, _) = out.features.dims();
                let mask = sample_mask_with(h, w, cfg.mask_ratio, cfg.mask_mode, &mut mask_rng)?;
                let (recon, gcache) = generator_forward(&apply_mask(&out.features, &mask)?, &generator)?;
                let mut upstream = FeatureMap::zeros(h, w, tc);
                if use_fd {
                    let (fd, g) = l_fd(&t_out.features, &recon)?;
                    sums[2] += fd;
                    upstream.add_scaled(&g, weights.fd)?;
                }
                if use_af {
                    let (af, g) = afdcd_loss(&recon, &t_out.features, cfg.afdcd_variant, &contrast)?;
                    sums[3] += af;
                    upstream.add_scaled(&g, weights.afdcd)?;
                }
                let gg = generator_backward(&gcache, &generator, &upstream)?;
                accumulate(
                    &mut g_grads,
                    &[gg.conv1.kernel.into_data(), gg.conv1.bias.into_data(), gg.conv2.kernel.into_data(), gg.conv2.bias.into_data()],
                );
                feature_grad = Some(apply_mask(&gg.input, &mask)?);
            }
            accumulate(&mut s_grads, &student.backward(&cache, &logits_grad, feature_grad.as_ref())?);
        }
        let [task, kd, fd, af] = sums.map(|v| v * inv);
        let bundle = total_loss(task, kd, fd, af, weights)?;
        check_loss(bundle.total, it, "total")?;
        if it % cfg.log_every == 0 {
            record.rows.push(RecordRow::from_bundle(it, &bundle));
        }
        scale(&mut s_grads, inv);
        s_opt.step(student.params_mut(), &s_grads)?;
        if use_gen {
            scale(&mut g_grads, inv);
            let (k1, b1) = generator.conv1.params_mut();
            let (k2, b2) = generator.conv2.params_mut();
            g_opt.step(vec![k1, b1, k2, b2], &g_grads)?;
        }
    }

    let final_probe = probe.measure(cfg, &student, &generator, &mut rng.fork(STREAM_STATS_FINAL))?;
    let miou = evaluate(&student, &data.val)?;
    Ok(DistillRun {
        student,
        generator,
        record,
        miou,
        initial,
        final_probe,
    })
}

pub const RECORD_FILE: &str = "record.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TS_INITIAL_FILE: &str = "ts_distance_initial.csv";
pub const TS_FINAL_FILE: &str = "ts_distance_final.csv";
pub const SELF_SIMILARITY_FILE: &str = "self_similarity_final.csv";
pub const STUDENT_DUMP_FILE: &str = "student_features.afdc";
pub const TEACHER_DUMP_FILE: &str = "teacher_features.afdc";

pub fn summarize(cfg: &RunConfig, teacher: &FrozenTeacher, run: &DistillRun) -> RunSummary {
    RunSummary {
        seed: cfg.seed,
        teacher_miou: teacher.miou.miou,
        student_miou: run.miou.miou,
        student_per_class_iou: run.miou.per_class.clone(),
        ts_distance_initial_mean: run.initial.ts_distance.mean,
        ts_distance_final_mean: run.final_probe.ts_distance.mean,
        ts_distance_initial_variance: run.initial.ts_distance.variance,
        ts_distance_final_variance: run.final_probe.ts_distance.variance,
        self_similarity_final_mean: run.final_probe.self_similarity.mean,
        self_similarity_final_variance: run.final_probe.self_similarity.variance,
        files: [RECORD_FILE, CONFIG_FILE, TS_INITIAL_FILE, TS_FINAL_FILE, SELF_SIMILARITY_FILE, STUDENT_DUMP_FILE, TEACHER_DUMP_FILE]
            .map(String::from)
            .to_vec(),
    }
}

/// Writes the record, config snapshot, distance statistics, feature dumps
/// and summary into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, teacher: &FrozenTeacher, run: &DistillRun) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RECORD_FILE), run.record.to_csv())?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    std::fs::write(dir.join(TS_INITIAL_FILE), run.initial.ts_distance.to_csv())?;
    std::fs::write(dir.join(TS_FINAL_FILE), run.final_probe.ts_distance.to_csv())?;
    std::fs::write(dir.join(SELF_SIMILARITY_FILE), run.final_probe.self_similarity.to_csv())?;
    write_features(&dir.join(STUDENT_DUMP_FILE), &run.final_probe.student_features)?;
    write_features(&dir.join(TEACHER_DUMP_FILE), &run.final_probe.teacher_features)?;
    let summary = summarize(cfg, teacher, run);
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Dataset generation, teacher training, distillation and persistence.
pub fn run_experiment(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let data = gen_toy_dataset(&cfg.dataset())?;
    let teacher = train_teacher(cfg, &data, &Rng::new(cfg.teacher_seed))?;
    let teacher = FrozenTeacher::new(teacher, &data)?;
    let run = distill_student(cfg, &teacher, &data, &Rng::new(cfg.seed))?;
    write_run(dir, cfg, &teacher, &run)
}
