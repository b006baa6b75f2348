//! Desk-scale distillation experiment on synthetic segmentation data.

pub mod config;
pub mod dataset;
pub mod dump;
pub mod model;
pub mod record;
pub mod train;

pub use config::{LossTerm, RunConfig};
pub use dataset::{gen_toy_dataset, Dataset, Sample, ToyDatasetSpec};
pub use dump::{read_features, write_features};
pub use model::{ArchSpec, ToyModel};
pub use record::{RecordRow, RunRecord, RunSummary, RECORD_HEADER};
pub use train::{distill_student, evaluate, run_experiment, train_teacher, DistillRun, FrozenTeacher, ProbeStats, TeacherRun};
