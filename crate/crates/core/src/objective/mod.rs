//! Training objective and segmentation metrics.

pub mod loss;
pub mod metrics;

pub use loss::{cross_entropy, dice_loss, one_hot, total_loss, LossConfig, LossReport};
pub use metrics::{ConfusionMatrix, MetricsReport};
