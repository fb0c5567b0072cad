//! Importance weights over a snapshot: where is refinement worth spending?
//!
//! The primary signal is the absolute Laplacian of a kernel density estimate
//! over splat centers, a curvature proxy that highlights cluster edges and
//! peaks. A densification-count reference weight derived from recorded births
//! serves as a sanity check, and `select_topk` turns any weight field into a
//! deterministic selection.

use std::collections::HashMap;

use resplat_core::{dist2, to_f64_points, SpatialIndex, Snapshot};

use crate::error::DataError;
use crate::lineage::{normalize_mean_one, Lineage};

/// Mean-1 importance weights over identified Gaussians.
#[derive(Debug, Clone)]
pub struct ImportanceField {
    pub ids: Vec<u32>,
    pub weights: Vec<f64>,
    pub method: String,
    /// True when the input was degenerate and the field fell back to uniform
    /// weights.
    pub uniform_fallback: bool,
}

impl ImportanceField {
    /// Uniform field over the given ids.
    pub fn uniform(ids: Vec<u32>) -> Self {
        let weights = vec![1.0; ids.len()];
        ImportanceField { ids, weights, method: "uniform".into(), uniform_fallback: false }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Id-to-weight map for joining against other id-keyed data.
    pub fn lookup(&self) -> HashMap<u32, f64> {
        self.ids.iter().copied().zip(self.weights.iter().copied()).collect()
    }
}

/// Central-difference Laplacian of a scalar field: the sum over axes of
/// `f(x + step e) - 2 f(x) + f(x - step e)` divided by `step^2`.
pub fn fd_laplacian(f: impl Fn([f64; 3]) -> f64, x: [f64; 3], step: f64) -> f64 {
    let center = f(x);
    let mut sum = 0.0;
    for axis in 0..3 {
        let mut hi = x;
        let mut lo = x;
        hi[axis] += step;
        lo[axis] -= step;
        sum += f(hi) - 2.0 * center + f(lo);
    }
    sum / (step * step)
}

/// Gaussian-kernel density over a fixed support set (no normalization
/// constant; only relative curvature matters downstream).
fn kde(support: &[[f64; 3]], x: [f64; 3], h: f64) -> f64 {
    let inv = 1.0 / (2.0 * h * h);
    support.iter().map(|p| (-dist2(x, *p) * inv).exp()).sum()
}

/// Absolute density-Laplacian weight per Gaussian, normalized to mean 1.
///
/// Each Gaussian's density is a Gaussian-kernel estimate over its `k` nearest
/// neighbors, with the neighbor set frozen at the center so the finite
/// differences probe a smooth function. The probe step is `h / 2`. Degenerate
/// fields (all weights identical) fall back to uniform with a flag.
pub fn laplacian_density_weights(
    snapshot: &Snapshot,
    k: usize,
    h: f64,
) -> Result<ImportanceField, DataError> {
    let n = snapshot.len();
    if k < 4 {
        return Err(DataError::Config(format!("need k >= 4 neighbors, got {k}")));
    }
    if n <= k {
        return Err(DataError::Config(format!("need more than k={k} Gaussians, got {n}")));
    }
    if !(h > 0.0) {
        return Err(DataError::Config(format!("bandwidth {h} must be positive")));
    }
    let points = to_f64_points(&snapshot.positions());
    let index = SpatialIndex::build(&points)?;
    let step = 0.5 * h;
    let weights: Vec<f64> = points
        .iter()
        .map(|&x| {
            let support: Vec<[f64; 3]> = index
                .knn(x, k)
                .expect("k validated against snapshot size")
                .into_iter()
                .map(|(id, _)| points[id])
                .collect();
            fd_laplacian(|q| kde(&support, q, h), x, step).abs()
        })
        .collect();

    let uniform_fallback = weights.iter().all(|w| w.to_bits() == weights[0].to_bits());
    let weights = if uniform_fallback { vec![1.0; n] } else { normalize_mean_one(&weights) };
    Ok(ImportanceField {
        ids: snapshot.gaussians.iter().map(|g| g.id).collect(),
        weights,
        method: "laplacian".into(),
        uniform_fallback,
    })
}

/// Median distance from each Gaussian to its nearest neighbor; the default
/// kernel bandwidth.
pub fn median_nn_distance(snapshot: &Snapshot) -> Result<f64, DataError> {
    if snapshot.len() < 2 {
        return Err(DataError::Config("need at least 2 Gaussians for a spacing estimate".into()));
    }
    let points = to_f64_points(&snapshot.positions());
    let index = SpatialIndex::build(&points)?;
    let mut nn: Vec<f64> = points
        .iter()
        .map(|&x| {
            let pair = index.knn(x, 2).expect("size checked above");
            pair[1].1.sqrt()
        })
        .collect();
    nn.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Ok(nn[nn.len() / 2])
}

/// Reference weight from recorded densification: one plus the number of
/// births within `radius` of each trajectory's final position, normalized to
/// mean 1. Sequences without births fall back to uniform with a flag.
pub fn densify_count_weights(
    lineages: &[Lineage],
    radius: f64,
) -> Result<ImportanceField, DataError> {
    if lineages.is_empty() {
        return Err(DataError::Config("no trajectories to weight".into()));
    }
    if !(radius > 0.0) {
        return Err(DataError::Config(format!("radius {radius} must be positive")));
    }
    let ids: Vec<u32> = lineages.iter().map(|l| l.id).collect();
    let births: Vec<[f64; 3]> = lineages
        .iter()
        .filter(|l| l.parent.is_some())
        .map(|l| {
            let (_, rec) = l
                .states
                .iter()
                .find(|(s, _)| *s == l.birth_step)
                .expect("birth step state present");
            [rec.position[0] as f64, rec.position[1] as f64, rec.position[2] as f64]
        })
        .collect();
    if births.is_empty() {
        let mut field = ImportanceField::uniform(ids);
        field.method = "densify-count".into();
        field.uniform_fallback = true;
        return Ok(field);
    }
    let index = SpatialIndex::build(&births)?;
    let r2 = radius * radius;
    let raw: Vec<f64> = lineages
        .iter()
        .map(|l| {
            let p = &l.states.last().expect("non-empty lineage").1.position;
            let count = index.within_radius([p[0] as f64, p[1] as f64, p[2] as f64], r2).len();
            1.0 + count as f64
        })
        .collect();
    Ok(ImportanceField {
        ids,
        weights: normalize_mean_one(&raw),
        method: "densify-count".into(),
        uniform_fallback: false,
    })
}

/// Ids of the `ceil(fraction * n)` heaviest entries, ties broken toward the
/// lower id. `fraction` must lie in (0, 1].
pub fn select_topk(field: &ImportanceField, fraction: f64) -> Result<Vec<u32>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Config(format!("fraction {fraction} must lie in (0, 1]")));
    }
    if field.is_empty() {
        return Err(DataError::Config("cannot select from an empty field".into()));
    }
    let m = (fraction * field.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&a, &b| {
        field.weights[b]
            .partial_cmp(&field.weights[a])
            .expect("finite weights")
            .then_with(|| field.ids[a].cmp(&field.ids[b]))
    });
    Ok(order[..m.min(field.len())].iter().map(|&i| field.ids[i]).collect())
}
