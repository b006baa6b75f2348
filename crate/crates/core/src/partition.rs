//! Index bookkeeping: patch tiling, channel grouping, pooled pre-reduction
//! and the analytic pair-count model.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::nn::{max_pool, PoolRecord};
use crate::tensor::FeatureMap;

/// Disjoint tiling of a map into equal rectangular patches, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_h: usize,
    pub patch_w: usize,
    pub rows: usize,
    pub cols: usize,
    origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 {
            return param_err("patch extents must be positive");
        }
        if h % patch_h != 0 || w % patch_w != 0 {
            return shape_err(format!("{h}x{w} map is not tiled by {patch_h}x{patch_w} patches"));
        }
        let (rows, cols) = (h / patch_h, w / patch_w);
        let origins = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r * patch_h, c * patch_w)))
            .collect();
        Ok(Self {
            patch_h,
            patch_w,
            rows,
            cols,
            origins,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.origins.len()
    }

    /// Top-left `(row, col)` of each patch.
    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }
}

pub fn split_patches(f: &FeatureMap, patch_h: usize, patch_w: usize) -> Result<(PatchGrid, Vec<FeatureMap>)> {
    let (h, w, c) = f.dims();
    let grid = PatchGrid::new(h, w, patch_h, patch_w)?;
    let patches = grid
        .origins()
        .iter()
        .map(|&(oy, ox)| {
            let mut data = Vec::with_capacity(patch_h * patch_w * c);
            for y in oy..oy + patch_h {
                for x in ox..ox + patch_w {
                    data.extend_from_slice(f.pixel(y, x));
                }
            }
            FeatureMap::new(patch_h, patch_w, c, data).expect("patch extents checked by grid")
        })
        .collect();
    Ok((grid, patches))
}

/// Inverse of [`split_patches`].
pub fn reassemble_patches(grid: &PatchGrid, patches: &[FeatureMap]) -> Result<FeatureMap> {
    if patches.len() != grid.patch_count() {
        return shape_err(format!(
            "expected {} patches, got {}",
            grid.patch_count(),
            patches.len()
        ));
    }
    let c = patches[0].channels();
    let mut out = FeatureMap::zeros(grid.rows * grid.patch_h, grid.cols * grid.patch_w, c);
    for (&(oy, ox), p) in grid.origins().iter().zip(patches) {
        if p.dims() != (grid.patch_h, grid.patch_w, c) {
            return shape_err(format!("patch {:?} does not match grid", p.dims()));
        }
        for y in 0..grid.patch_h {
            for x in 0..grid.patch_w {
                out.pixel_mut(oy + y, ox + x).copy_from_slice(p.pixel(y, x));
            }
        }
    }
    Ok(out)
}

/// `groups` contiguous channel ranges of `group_len` channels each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelGrouping {
    pub groups: usize,
    pub group_len: usize,
}

impl ChannelGrouping {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 {
            return param_err("channel group count must be positive");
        }
        if channels % groups != 0 {
            return shape_err(format!("{channels} channels cannot form {groups} equal groups"));
        }
        Ok(Self {
            groups,
            group_len: channels / groups,
        })
    }

    pub fn range(&self, group: usize) -> std::ops::Range<usize> {
        group * self.group_len..(group + 1) * self.group_len
    }
}

pub fn split_channel_groups(f: &FeatureMap, groups: usize) -> Result<(ChannelGrouping, Vec<FeatureMap>)> {
    let (h, w, c) = f.dims();
    let grouping = ChannelGrouping::new(c, groups)?;
    let views = (0..groups)
        .map(|g| {
            let range = grouping.range(g);
            let mut data = Vec::with_capacity(h * w * grouping.group_len);
            for y in 0..h {
                for x in 0..w {
                    data.extend_from_slice(&f.pixel(y, x)[range.clone()]);
                }
            }
            FeatureMap::new(h, w, grouping.group_len, data).expect("group extents checked")
        })
        .collect();
    Ok((grouping, views))
}

/// Inverse of [`split_channel_groups`].
pub fn concat_channel_groups(views: &[FeatureMap]) -> Result<FeatureMap> {
    let Some(first) = views.first() else {
        return shape_err("no channel groups to concatenate");
    };
    let (h, w, len) = first.dims();
    if views.iter().any(|v| v.dims() != (h, w, len)) {
        return shape_err("channel groups differ in shape");
    }
    Ok(FeatureMap::from_fn(h, w, len * views.len(), |y, x, c| views[c / len].get(y, x, c % len)))
}

/// One fine-grained representation: group `k` of pixel `(i, j)` in patch `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FineGrainedRep {
    pub patch: usize,
    pub row: usize,
    pub col: usize,
    pub group: usize,
    pub values: Vec<f64>,
}

/// All fine-grained representations, ordered by patch, row, col, group.
pub fn fine_grained_reps(f: &FeatureMap, patch_h: usize, patch_w: usize, groups: usize) -> Result<Vec<FineGrainedRep>> {
    let grid = PatchGrid::new(f.height(), f.width(), patch_h, patch_w)?;
    let grouping = ChannelGrouping::new(f.channels(), groups)?;
    let mut reps = Vec::with_capacity(f.height() * f.width() * groups);
    for (p, &(oy, ox)) in grid.origins().iter().enumerate() {
        for i in 0..patch_h {
            for j in 0..patch_w {
                let px = f.pixel(oy + i, ox + j);
                for k in 0..groups {
                    reps.push(FineGrainedRep {
                        patch: p,
                        row: i,
                        col: j,
                        group: k,
                        values: px[grouping.range(k)].to_vec(),
                    });
                }
            }
        }
    }
    Ok(reps)
}

/// How the teacher map is pooled alongside the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolCoupling {
    /// Teacher pooled with its own argmax.
    #[default]
    Independent,
    /// Teacher sampled at the student's winning positions.
    StudentIndices,
}

/// Student and teacher maps after the shared `k×k` max-pool.
#[derive(Debug, Clone)]
pub struct PooledPair {
    pub student: FeatureMap,
    pub student_record: PoolRecord,
    pub teacher: FeatureMap,
}

pub fn pool_pre_reduce(student: &FeatureMap, teacher: &FeatureMap, k: usize, coupling: PoolCoupling) -> Result<PooledPair> {
    student.ensure_congruent(teacher, "pool_pre_reduce")?;
    let (pooled_s, record) = max_pool(student, k)?;
    let pooled_t = match coupling {
        PoolCoupling::Independent => max_pool(teacher, k)?.0,
        PoolCoupling::StudentIndices => {
            let (h, w, c) = pooled_s.dims();
            let data = record.argmax().iter().map(|&at| teacher.data()[at]).collect();
            FeatureMap::new(h, w, c, data)?
        }
    };
    Ok(PooledPair {
        student: pooled_s,
        student_record: record,
        teacher: pooled_t,
    })
}

/// Patch extent used by the pair-count model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchExtent {
    /// Square patches of the given side, measured on the pooled map.
    Side(usize),
    /// One patch covering the whole pooled map.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsQuery {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub groups: usize,
    pub patch: PatchExtent,
    pub pool: usize,
    /// Arithmetic operations charged per vector element of one distance.
    pub ops_per_element: u64,
}

pub const DEFAULT_OPS_PER_ELEMENT: u64 = 3;

/// Pair counts and distance FLOPs of one contrastive pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCount {
    pub patch_h: usize,
    pub patch_w: usize,
    pub pool: usize,
    pub samples: u128,
    pub negatives_per_sample: u128,
    pub positive_pairs: u128,
    pub negative_pairs: u128,
    pub distances: u128,
    pub flops: u128,
}

impl PairCount {
    pub const CSV_HEADER: &'static str = "n,q,samples,negatives,distances,flops";

    /// `n,q,samples,negatives,distances,flops`; `n` is the patch height.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.patch_h, self.pool, self.samples, self.negative_pairs, self.distances, self.flops
        )
    }
}

pub fn pair_count_model(q: &FlopsQuery) -> Result<PairCount> {
    if q.pool == 0 || q.groups == 0 || q.height == 0 || q.width == 0 || q.channels == 0 {
        return param_err("pair_count_model: extents, groups and pool factor must be positive");
    }
    if q.height % q.pool != 0 || q.width % q.pool != 0 {
        return shape_err(format!("{}x{} not divisible by pool factor {}", q.height, q.width, q.pool));
    }
    let (h, w) = (q.height / q.pool, q.width / q.pool);
    let (ph, pw) = match q.patch {
        PatchExtent::Side(n) => (n, n),
        PatchExtent::Full => (h, w),
    };
    PatchGrid::new(h, w, ph, pw)?;
    let grouping = ChannelGrouping::new(q.channels, q.groups)?;

    let m = q.groups as u128;
    let samples = (h * w) as u128 * m;
    let per_patch = (ph * pw) as u128 * m;
    let distances = samples * per_patch;
    Ok(PairCount {
        patch_h: ph,
        patch_w: pw,
        pool: q.pool,
        samples,
        negatives_per_sample: per_patch - 1,
        positive_pairs: samples,
        negative_pairs: samples * (per_patch - 1),
        distances,
        flops: distances * q.ops_per_element as u128 * grouping.group_len as u128,
    })
}
