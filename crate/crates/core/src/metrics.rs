//! Feature-distance diagnostics and segmentation scoring.

use std::fmt::Write as _;

use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::IGNORE_INDEX;
use crate::partition::ChannelGrouping;
use crate::rng::Rng;
use crate::tensor::{FeatureMap, LabelMap};

pub const HISTOGRAM_BINS: usize = 64;
/// Populations up to this size are measured exhaustively.
pub const FULL_POPULATION_LIMIT: usize = 1_000_000;
/// Subsample size once a population exceeds [`FULL_POPULATION_LIMIT`].
pub const SUBSAMPLE_SIZE: usize = 10_000;

/// Sample count used by the harness for a population of the given size.
pub fn auto_sample_count(population: usize) -> usize {
    if population <= FULL_POPULATION_LIMIT {
        population
    } else {
        SUBSAMPLE_SIZE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceHistogram {
    /// `HISTOGRAM_BINS + 1` ascending edges.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub variance: f64,
    pub sample_count: usize,
}

impl DistanceHistogram {
    /// Uniform bins over `[0, max]`, population mean and variance.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return param_err("histogram of zero samples");
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let variance = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let max = samples.iter().copied().fold(0.0, f64::max);
        let width = max / HISTOGRAM_BINS as f64;
        let bin_edges = (0..=HISTOGRAM_BINS).map(|i| i as f64 * width).collect();
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for &v in samples {
            let bin = if max > 0.0 {
                ((v / max * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                0
            };
            counts[bin] += 1;
        }
        Ok(Self {
            bin_edges,
            counts,
            mean,
            variance,
            sample_count: samples.len(),
        })
    }

    /// `bin_lo,bin_hi,count` rows followed by a `mean,variance,n` summary.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.bin_edges[i], self.bin_edges[i + 1], c);
        }
        let _ = writeln!(out, "mean,variance,n");
        let _ = writeln!(out, "{},{},{}", self.mean, self.variance, self.sample_count);
        out
    }
}

fn draw(population: usize, sample_count: usize, rng: &mut Rng) -> Result<Option<Vec<usize>>> {
    if sample_count == 0 {
        return param_err("sample count must be positive");
    }
    if sample_count > population {
        return param_err(format!("sample count {sample_count} exceeds population {population}"));
    }
    if sample_count == population {
        return Ok(None);
    }
    let mut idx = rng.sample_indices(population, sample_count);
    idx.sort_unstable();
    Ok(Some(idx))
}

/// Number of matching (same position, same group) teacher–student pairs.
pub fn ts_population(f: &FeatureMap, groups: usize) -> Result<usize> {
    ChannelGrouping::new(f.channels(), groups)?;
    Ok(f.height() * f.width() * groups)
}

/// Squared distances between matching fine-grained representations.
pub fn ts_distance_stats(
    student: &FeatureMap,
    teacher: &FeatureMap,
    groups: usize,
    sample_count: usize,
    rng: &mut Rng,
) -> Result<DistanceHistogram> {
    student.ensure_congruent(teacher, "ts_distance_stats")?;
    let grouping = ChannelGrouping::new(student.channels(), groups)?;
    let population = student.height() * student.width() * groups;
    let len = grouping.group_len;
    let dist = |idx: usize| -> f64 {
        let start = idx * len;
        student.data()[start..start + len]
            .iter()
            .zip(&teacher.data()[start..start + len])
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let samples: Vec<f64> = match draw(population, sample_count, rng)? {
        None => (0..population).map(dist).collect(),
        Some(idx) => idx.into_iter().map(dist).collect(),
    };
    DistanceHistogram::from_samples(&samples)
}

/// Unordered within-window pairs of distinct fine-grained representations.
pub fn self_similarity_population(f: &FeatureMap, window: usize, groups: usize) -> Result<usize> {
    let layout = WindowLayout::new(f, window, groups)?;
    Ok(layout.windows * layout.pairs_per_window)
}

struct WindowLayout {
    window: usize,
    groups: usize,
    group_len: usize,
    windows_per_row: usize,
    windows: usize,
    reps: usize,
    pairs_per_window: usize,
}

impl WindowLayout {
    fn new(f: &FeatureMap, window: usize, groups: usize) -> Result<Self> {
        let (h, w, c) = f.dims();
        if window == 0 || h % window != 0 || w % window != 0 {
            return shape_err(format!("{h}x{w} map is not tiled by {window}x{window} windows"));
        }
        let grouping = ChannelGrouping::new(c, groups)?;
        let reps = window * window * groups;
        if reps < 2 {
            return param_err("a window needs at least two representations");
        }
        Ok(Self {
            window,
            groups,
            group_len: grouping.group_len,
            windows_per_row: w / window,
            windows: (h / window) * (w / window),
            reps,
            pairs_per_window: reps * (reps - 1) / 2,
        })
    }

    /// Flat data offset of representation `r` (ordered y, x, group) in window `win`.
    fn offset(&self, f: &FeatureMap, win: usize, r: usize) -> usize {
        let wy = (win / self.windows_per_row) * self.window;
        let wx = (win % self.windows_per_row) * self.window;
        let k = r % self.groups;
        let px = r / self.groups;
        f.index(wy + px / self.window, wx + px % self.window, k * self.group_len)
    }

    /// Decodes a within-window pair index into `(a, b)`, `a < b`, lexicographic.
    fn pair(&self, mut idx: usize) -> (usize, usize) {
        let mut a = 0;
        loop {
            let row = self.reps - 1 - a;
            if idx < row {
                return (a, a + 1 + idx);
            }
            idx -= row;
            a += 1;
        }
    }
}

/// Squared distances among fine-grained representations sharing a window.
pub fn self_similarity_stats(
    f: &FeatureMap,
    window: usize,
    groups: usize,
    sample_count: usize,
    rng: &mut Rng,
) -> Result<DistanceHistogram> {
    let layout = WindowLayout::new(f, window, groups)?;
    let population = layout.windows * layout.pairs_per_window;
    let len = layout.group_len;
    let data = f.data();
    let dist = |win: usize, a: usize, b: usize| -> f64 {
        let oa = layout.offset(f, win, a);
        let ob = layout.offset(f, win, b);
        data[oa..oa + len]
            .iter()
            .zip(&data[ob..ob + len])
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let samples: Vec<f64> = match draw(population, sample_count, rng)? {
        None => {
            let mut out = Vec::with_capacity(population);
            for win in 0..layout.windows {
                for a in 0..layout.reps {
                    for b in a + 1..layout.reps {
                        out.push(dist(win, a, b));
                    }
                }
            }
            out
        }
        Some(idx) => idx
            .into_iter()
            .map(|i| {
                let (a, b) = layout.pair(i % layout.pairs_per_window);
                dist(i / layout.pairs_per_window, a, b)
            })
            .collect(),
    };
    DistanceHistogram::from_samples(&samples)
}

/// `counts[label][pred]` over non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    pub fn accumulate(&mut self, pred: &LabelMap, label: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (label.height(), label.width()) {
            return shape_err("prediction and label maps differ in shape");
        }
        for (&p, &l) in pred.data().iter().zip(label.data()) {
            if l == IGNORE_INDEX || p == IGNORE_INDEX {
                continue;
            }
            let (p, l) = (p as usize, l as usize);
            if p >= self.classes || l >= self.classes {
                return param_err(format!("class index outside [0, {})", self.classes));
            }
            self.counts[l * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU (`None` where the class has empty union) and their mean.
    pub fn iou(&self) -> Result<MiouReport> {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..k).filter(|&l| l != c).map(|l| self.get(l, c)).sum();
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Undefined("mIoU with every class empty".into()));
        }
        Ok(MiouReport {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou(pred: &LabelMap, label: &LabelMap, classes: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, label)?;
    cm.iou()
}
