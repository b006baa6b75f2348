//! Dense contrastive distillation losses with analytical gradients,
//! brute-force references, a pair-count cost model and a small
//! teacher→student experiment harness.

pub mod checks;
pub mod error;
pub mod harness;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod partition;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use losses::{
    afdcd_loss, distance, l_fd, loss_cc, loss_kd, loss_oc, loss_sc, total_loss, AfdcdVariant, ContrastConfig, DistanceKind, LossBundle,
    LossWeights,
};
pub use masking::{apply_mask, generator_forward, sample_mask, GeneratorParams, MaskMode, SpatialMask};
pub use metrics::{miou, self_similarity_stats, ts_distance_stats, DistanceHistogram, MiouReport};
pub use partition::{pair_count_model, FlopsQuery, PairCount, PatchExtent, PoolCoupling};
pub use rng::Rng;
pub use tensor::{FeatureMap, LabelMap, Tensor};
