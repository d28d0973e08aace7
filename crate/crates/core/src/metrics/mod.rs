//! Evaluation battery: image similarity, histograms, segmentation overlap,
//! the site probe, embeddings and target-site selection.

mod embed;
mod histogram;
mod probe;
mod quality;
mod segmentation;
mod sites;
mod tasks;

pub use embed::{pca_2d, scatter_ratio};
pub use histogram::{hist_distance, hist_match, HistDistance, Histogram, DEFAULT_BINS};
pub use probe::{binary_auc, pooled_features, probe_scores, probe_train_eval, Probe, ProbeConfig, ProbeScores};
pub use quality::{mse, pcc, psnr, rmse, ssim, ssim_map, PSNR_CAP_DB};
pub use segmentation::{
    cluster_segment, dice, dice_scores, fit_site_segmenter, jaccard, jaccard_scores, ClassScores, TissueCenters,
};
pub use sites::{rank_target_sites, SiteRank};
pub use tasks::{
    histogram_task, hm_baseline, probe_task, segmentation_task, site_embedding, site_histogram, site_labels,
    synthesis_task, traveling_task, PairStats, SegmentationReport, SiteEmbedding, SiteHistogramShift, SynthesisReport,
    TravelingPair,
};
