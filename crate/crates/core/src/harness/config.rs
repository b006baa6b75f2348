//! Flat JSON run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::ToyDatasetSpec;
use crate::harness::model::ArchSpec;
use crate::losses::{AfdcdVariant, ContrastConfig, DistanceKind, LossWeights};
use crate::masking::MaskMode;
use crate::partition::PoolCoupling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Task,
    Kd,
    Fd,
    Afdcd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub log_every: usize,

    pub loss_terms: Vec<LossTerm>,
    pub afdcd_variant: AfdcdVariant,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub kd_temperature: f64,

    pub tau: f64,
    pub channel_groups: usize,
    pub patch_side: usize,
    pub pool_factor: usize,
    pub pool_coupling: PoolCoupling,
    pub distance: DistanceKind,
    pub include_positive_in_denominator: bool,

    pub mask_ratio: f64,
    pub mask_mode: MaskMode,

    pub image_size: usize,
    pub num_classes: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub noise_std: f64,
    pub data_seed: u64,

    pub teacher_channels: usize,
    pub teacher_layers: usize,
    pub teacher_iterations: usize,
    pub teacher_seed: u64,
    pub student_channels: usize,
    pub student_layers: usize,

    /// Validation images used for feature-distance probes.
    pub probe_images: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let contrast = ContrastConfig::default();
        let weights = LossWeights::default();
        let data = ToyDatasetSpec::default();
        Self {
            seed: 0,
            iterations: 300,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            log_every: 1,
            loss_terms: vec![LossTerm::Task, LossTerm::Kd, LossTerm::Fd, LossTerm::Afdcd],
            afdcd_variant: AfdcdVariant::Oc,
            lambda1: weights.kd,
            lambda2: weights.fd,
            lambda3: weights.afdcd,
            kd_temperature: crate::losses::DEFAULT_KD_TEMPERATURE,
            tau: contrast.tau,
            channel_groups: contrast.groups,
            patch_side: contrast.patch_side,
            pool_factor: contrast.pool_factor,
            pool_coupling: contrast.pool_coupling,
            distance: contrast.distance,
            include_positive_in_denominator: contrast.include_positive,
            mask_ratio: crate::masking::DEFAULT_MASK_RATIO,
            mask_mode: MaskMode::Bernoulli,
            image_size: data.image_size,
            num_classes: data.num_classes,
            train_count: data.train_count,
            val_count: data.val_count,
            noise_std: data.noise_std,
            data_seed: data.seed,
            teacher_channels: 32,
            teacher_layers: 4,
            teacher_iterations: 300,
            teacher_seed: 0,
            student_channels: 8,
            student_layers: 2,
            probe_images: 8,
            out_dir: None,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn has(&self, term: LossTerm) -> bool {
        self.loss_terms.contains(&term)
    }

    pub fn dataset(&self) -> ToyDatasetSpec {
        ToyDatasetSpec {
            image_size: self.image_size,
            num_classes: self.num_classes,
            train_count: self.train_count,
            val_count: self.val_count,
            noise_std: self.noise_std,
            seed: self.data_seed,
        }
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            groups: self.channel_groups,
            patch_side: self.patch_side,
            pool_factor: self.pool_factor,
            distance: self.distance,
            include_positive: self.include_positive_in_denominator,
            pool_coupling: self.pool_coupling,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            kd: self.lambda1,
            fd: self.lambda2,
            afdcd: self.lambda3,
        }
    }

    pub fn teacher_arch(&self) -> ArchSpec {
        ArchSpec {
            channels: self.teacher_channels,
            layers: self.teacher_layers,
        }
    }

    pub fn student_arch(&self) -> ArchSpec {
        ArchSpec {
            channels: self.student_channels,
            layers: self.student_layers,
        }
    }

    /// Checks ranges and every divisibility the pipeline relies on.
    pub fn validate(&self) -> Result<()> {
        self.dataset().validate()?;
        if self.batch_size == 0 || self.log_every == 0 {
            return config_err("batch_size and log_every must be positive");
        }
        if !(self.lr > 0.0) {
            return config_err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return config_err(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if !(self.tau > 0.0) || !(self.kd_temperature > 0.0) {
            return config_err("tau and kd_temperature must be positive");
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0) {
                return config_err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !self.has(LossTerm::Task) {
            return config_err("loss_terms must include \"task\"");
        }
        for (i, t) in self.loss_terms.iter().enumerate() {
            if self.loss_terms[..i].contains(t) {
                return config_err(format!("loss term {t:?} listed twice"));
            }
        }
        if self.teacher_channels == 0 || self.teacher_layers == 0 || self.student_channels == 0 || self.student_layers == 0 {
            return config_err("model widths and depths must be positive");
        }
        if self.teacher_channels < self.student_channels {
            return config_err("teacher feature channels must be at least the student's");
        }
        if self.channel_groups == 0 || self.teacher_channels % self.channel_groups != 0 {
            return config_err(format!(
                "channel_groups {} must divide teacher_channels {}",
                self.channel_groups, self.teacher_channels
            ));
        }
        if self.has(LossTerm::Afdcd) {
            match self.afdcd_variant {
                AfdcdVariant::Oc => {
                    let q = self.pool_factor;
                    let n = self.patch_side;
                    if q == 0 || n == 0 || self.image_size % q != 0 || (self.image_size / q) % n != 0 {
                        return config_err(format!(
                            "patch_side {n} must divide image_size {} / pool_factor {q}",
                            self.image_size
                        ));
                    }
                    if n * n * self.channel_groups < 2 {
                        return config_err("omni-contrasting needs at least two representations per patch");
                    }
                }
                AfdcdVariant::Cc if self.channel_groups < 2 => {
                    return config_err("channel contrasting needs channel_groups >= 2");
                }
                _ => {}
            }
        }
        if self.probe_images == 0 || self.probe_images > self.val_count {
            return config_err("probe_images must lie in [1, val_count]");
        }
        if self.patch_side == 0 || self.image_size % self.patch_side != 0 {
            return config_err("patch_side must divide image_size (self-similarity windows)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_published_settings() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lambda1, c.lambda2, c.lambda3), (1.0, 2e-5, 5e-3));
        assert_eq!((c.tau, c.channel_groups, c.patch_side, c.pool_factor), (0.07, 16, 4, 4));
        assert_eq!(c.mask_ratio, 0.75);
        assert_eq!((c.lr, c.momentum), (0.02, 0.9));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let mut c = RunConfig::default();
        c.lambda2 = 1.0 / 3.0;
        c.tau = 0.1 + 0.2;
        c.loss_terms = vec![LossTerm::Task, LossTerm::Fd];
        c.distance = DistanceKind::CosineDistance;
        c.out_dir = Some("runs/x".into());
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7, "loss_terms": ["task", "fd", "afdcd"], "distance": "l1"}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.distance, DistanceKind::L1);
        assert!(!c.has(LossTerm::Kd));
        assert_eq!(c.iterations, RunConfig::default().iterations);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"tau": 0.1, "bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"distance": "l3"}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"channel_groups": 5}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"patch_side": 3}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"loss_terms": ["fd"]}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"mask_ratio": 1.0}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"lambda3": -1}"#), Err(Error::Config(_))));
    }
}
