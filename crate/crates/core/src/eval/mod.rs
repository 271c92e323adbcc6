//! Sample-quality metrics and experiment sweeps.

pub mod metrics;

pub use metrics::{
    energy_distance, frechet_feature_distance, frechet_from_moments, metric_report, moments,
    sliced_wasserstein, Featurizer, MetricReport,
};
pub mod sweep;

pub use sweep::{ablate_alpha, compare_convergence, median, AlphaTable, CellResult, ConvergenceReport};
