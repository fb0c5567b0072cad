//! Data pipeline for learned densification: a synthetic multi-resolution
//! scene simulator with recorded parent maps, cross-snapshot trajectory
//! extraction with padded batching, and importance-weight fields that steer
//! refinement toward high-curvature regions.

pub mod error;
pub mod hessian;
pub mod lineage;
pub mod sim;

pub use error::DataError;
pub use hessian::{
    densify_count_weights, fd_laplacian, laplacian_density_weights, median_nn_distance,
    select_topk, ImportanceField,
};
pub use lineage::{
    build_lineages, load_lineages, normalize_mean_one, save_lineages, tensorize,
    tensorize_extend, Lineage, LineageBatch, TrackingMode,
};
pub use sim::{
    holdout_pair, mean_scale_f64, simulate, BirthEvent, BirthKind, LineageTruth, SimScene,
    SurfaceShape,
};
