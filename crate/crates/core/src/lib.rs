//! Core scene representation for Gaussian-splat refinement: per-splat records,
//! scene snapshots, the de-facto 3DGS binary PLY interchange layout, and a
//! kd-tree used for nearest-neighbor queries and Chamfer distances.

pub mod error;
pub mod ply;
pub mod record;
pub mod spatial;

pub use error::CoreError;
pub use ply::{read_ply, write_ply, PLY_FIELD_COUNT};
pub use record::{
    normalize_quaternion, sigmoid, GaussianRecord, Snapshot, APPEARANCE_DIM, GEOMETRY_DIM,
    LIVE_EXIST_LOGIT, RECORD_DIM,
};
pub use spatial::{chamfer_distance, chamfer_distance_brute, dist2, to_f64_points, SpatialIndex};
