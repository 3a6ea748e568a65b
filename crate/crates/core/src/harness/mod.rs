//! Synthetic data, training, evaluation, checkpoints, gradient checks and
//! ablation sweeps.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod report;
pub mod train;

pub use ablation::{ablation_rows, ablation_sweep, AblationAxis, AblationResult, AblationRow, AblationTable};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{DatasetMeta, MotifKind, SyntheticDataset};
pub use gradcheck::{run_grad_checks, GradCheckLine, GradTarget};
pub use report::RunReport;
pub use train::{evaluate, poly_lr, predict_scores, AdamW, EpochRecord, TrainState, Trainer};
