//! Loss terms, the negative queue and the training step.

mod losses;
mod queue;
mod training;

pub use losses::{
    correlation_entropy, correlation_entropy_node, entropy_loss, entropy_loss_node,
    ground_truth_positions, info_nce, info_nce_node, momentum_update, momentum_update_tensor,
    pixel_cycle_loss, pixel_cycle_loss_node, total_loss, total_loss_node, LossTerms, LossWeights,
    PixelLossScale, ENTROPY_EPS,
};
pub use queue::{NegativeQueue, NORM_TOLERANCE};
pub use training::{
    cycle_indicator, cycle_loss_from_features, train_step, AttentionSource, CycleConfig,
    LossBreakdown, SgdConfig, TrainConfig, TrainState,
};
