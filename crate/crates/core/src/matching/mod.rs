//! Correlation, affinity and position transfer, Sinkhorn optimal transport,
//! Hough re-weighting and keypoint read-out.

mod affinity;
mod hough;
mod pipeline;
mod readout;
mod sinkhorn;

pub use affinity::{
    affinity, correlation, cycle_affinity, transfer_positions, AffinityMatrix, CorrelationMatrix,
    Grid, PositionGrid,
};
pub use hough::{offset_bins, rhm, HoughConfig};
pub use pipeline::{
    match_pair, match_scores, matching_features, Marginals, MatchConfig, MatchDiagnostics,
    MatchOutput, OtConfig, OtSimilarity,
};
pub use readout::{cell_of, match_keypoints, ImageDims};
pub use sinkhorn::{similarity_cost, sinkhorn_ot, uniform_marginal, SinkhornConfig, TransportMatrix};
