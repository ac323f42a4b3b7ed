//! PAD error rates, ROC area, threshold selection, protocol folds and
//! embedding reduction.
//!
//! Scores are "higher = more bona fide" and a video is accepted as bona fide
//! when `score >= threshold`. Rates are stored as fractions in `[0, 1]` and
//! only rendered as percentages in reports.

mod embeddings;
mod metrics;
mod protocol;
mod scoring;

pub use embeddings::{
    pca, reduce_embeddings, scatter_svg, write_coords_csv, write_npy, write_npy_dyn,
    Reduction,
};
pub use metrics::{
    acer, apcer, apcer_per_pai, apcer_pooled, apcer_wc, auc, auc_from_scores, bpcer,
    eer_threshold, format_percent, hter, metric_report, predicted_bona_fide, read_scores,
    read_scores_file, write_scores, write_scores_file, Counts, MetricReport, ScoreRecord,
};
pub use protocol::{
    evaluate_fold, mean_std, summarize, FoldData, FoldReport, FoldSpec, ManifestFilter, MeanStd,
    ProtocolConfig, ProtocolKind, ProtocolSummary, ThresholdRule,
};
pub use scoring::{embedding_matrix, predict_store, video_scores, FrameScores};
