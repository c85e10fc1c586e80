//! Detection metrics, leaderboard scoring and paired significance tests.

mod leaderboard;
mod metrics;
mod wilcoxon;

pub use leaderboard::{
    default_v20_penalties, default_v21_coefficients, infraction_penalty, read_run_records, summarize_run, DrivingRunRecord,
    LeaderboardVersion, PenaltyParams, RunSummary, COLLISION_LAYOUT, COLLISION_PEDESTRIAN, COLLISION_VEHICLE,
};
pub use metrics::{
    roc_auc, roc_curve, threshold_metrics, trapezoid_auc, youden_candidates, youden_j, youden_threshold,
    ScoredSet, ThresholdMetrics, YoudenResult,
};
pub use wilcoxon::{
    exact_p_value, exact_upper_tail, wilcoxon_signed_rank, wilcoxon_signed_rank_with, WilcoxonMethod,
    WilcoxonOptions, WilcoxonResult, EXACT_MAX_N,
};
