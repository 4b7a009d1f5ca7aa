//! Patient records, batching, normalization, synthetic data and the
//! pre-training removal masks.

mod batch;
mod mask;
mod normalize;
mod record;
mod synthetic;

pub use batch::Batch;
pub use mask::{apply_mask_plan, sample_mask_plan, subsample_observed, MaskPlan};
pub use normalize::{zscore_fit_apply, Normalizer, VariableStats};
pub use record::{observed_rate, EhrRecord, Label, TaskKind};
pub use synthetic::{generate_synthetic, split_indices, Dataset, Missingness, SyntheticSpec};
