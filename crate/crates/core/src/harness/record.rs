//! Per-iteration loss log and its CSV form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossBundle, LossWeights};

pub const RECORD_HEADER: &str = "iter,task,kd,fd,afdcd,total";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub iter: usize,
    pub task: f64,
    pub kd: f64,
    pub fd: f64,
    pub afdcd: f64,
    pub total: f64,
}

impl RecordRow {
    pub fn from_bundle(iter: usize, b: &LossBundle) -> Self {
        Self {
            iter,
            task: b.task,
            kd: b.kd,
            fd: b.fd,
            afdcd: b.afdcd,
            total: b.total,
        }
    }

    /// Whether `total` is bit-equal to the weighted combination of the components.
    pub fn satisfies_identity(&self, weights: &LossWeights) -> bool {
        LossBundle::combine(self.task, self.kd, self.fd, self.afdcd, weights).to_bits() == self.total.to_bits()
    }
}

/// Final metrics attached to a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub teacher_miou: f64,
    pub student_miou: f64,
    pub student_per_class_iou: Vec<Option<f64>>,
    pub ts_distance_initial_mean: f64,
    pub ts_distance_final_mean: f64,
    pub ts_distance_initial_variance: f64,
    pub ts_distance_final_variance: f64,
    pub self_similarity_final_mean: f64,
    pub self_similarity_final_variance: f64,
    /// Output files, relative to the run directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunRecord {
    pub seed: u64,
    pub rows: Vec<RecordRow>,
}

impl RunRecord {
    pub fn new(seed: u64) -> Self {
        Self { seed, rows: Vec::new() }
    }

    /// Values use the shortest representation that parses back to the same bits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(RECORD_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(out, "{},{:?},{:?},{:?},{:?},{:?}", r.iter, r.task, r.kd, r.fd, r.afdcd, r.total).unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str, seed: u64) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Format {
            path: "<record>".into(),
            reason: format!("line {line}: {why}"),
        };
        let mut lines = text.lines();
        if lines.next() != Some(RECORD_HEADER) {
            return Err(bad(1, "missing header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad(i + 2, "expected 6 fields"));
            }
            let iter = fields[0].parse().map_err(|_| bad(i + 2, "bad iteration"))?;
            let mut v = [0.0; 5];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f.parse().map_err(|_| bad(i + 2, "bad number"))?;
            }
            rows.push(RecordRow {
                iter,
                task: v[0],
                kd: v[1],
                fd: v[2],
                afdcd: v[3],
                total: v[4],
            });
        }
        Ok(Self { seed, rows })
    }
}
