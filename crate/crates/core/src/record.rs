//! Per-splat state and scene snapshots.
//!
//! A [`GaussianRecord`] stores one splat's geometry and appearance at one
//! resolution step. Scale lives in the log domain and opacity as a pre-sigmoid
//! logit so downstream regression targets are unconstrained; activations are
//! applied only where the values are consumed.

/// Number of entries in the geometric feature view: position(3) + rotation(4)
/// + log-scale(3) + exist(1).
pub const GEOMETRY_DIM: usize = 11;

/// Number of entries in the appearance feature view: sh_rest(45) + rgb(3)
/// + opacity(1) + exist(1).
pub const APPEARANCE_DIM: usize = 50;

/// Full flattened record width. The exist logit appears in both views, so
/// `GEOMETRY_DIM + APPEARANCE_DIM - 1`.
pub const RECORD_DIM: usize = 60;

/// Exist logit assigned to splats ingested from PLY (sigmoid ~ 1.0, live).
pub const LIVE_EXIST_LOGIT: f32 = 10.0;

/// One Gaussian splat's parameters at a single resolution step.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRecord {
    /// Scene-unique stable identifier.
    pub id: u32,
    /// Center in scene units.
    pub position: [f32; 3],
    /// Unit quaternion, (w, x, y, z).
    pub rotation: [f32; 4],
    /// Log of the per-axis standard deviation in scene units.
    pub log_scale: [f32; 3],
    /// Pre-sigmoid opacity logit.
    pub opacity: f32,
    /// RGB DC component, linear.
    pub color: [f32; 3],
    /// Spherical-harmonic coefficients, degrees 1-3, 15 per channel.
    pub sh_rest: [f32; 45],
    /// Liveness logit; sigmoid above a gate threshold means the splat is live.
    pub exist: f32,
}

impl GaussianRecord {
    /// A record with all-zero parameters, identity rotation and a live exist
    /// logit.
    pub fn zeroed(id: u32) -> Self {
        GaussianRecord {
            id,
            position: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            opacity: 0.0,
            color: [0.0; 3],
            sh_rest: [0.0; 45],
            exist: LIVE_EXIST_LOGIT,
        }
    }

    /// Geometric feature view: position, rotation, log-scale, exist.
    pub fn geometry_features(&self) -> [f32; GEOMETRY_DIM] {
        let mut out = [0.0; GEOMETRY_DIM];
        out[..3].copy_from_slice(&self.position);
        out[3..7].copy_from_slice(&self.rotation);
        out[7..10].copy_from_slice(&self.log_scale);
        out[10] = self.exist;
        out
    }

    /// Appearance feature view: sh_rest, rgb, opacity, exist.
    pub fn appearance_features(&self) -> [f32; APPEARANCE_DIM] {
        let mut out = [0.0; APPEARANCE_DIM];
        out[..45].copy_from_slice(&self.sh_rest);
        out[45..48].copy_from_slice(&self.color);
        out[48] = self.opacity;
        out[49] = self.exist;
        out
    }

    /// Flattened 60-value record: position, rotation, log-scale, opacity, rgb,
    /// sh_rest, exist. Inverse of [`GaussianRecord::from_flat`].
    pub fn to_flat(&self) -> [f32; RECORD_DIM] {
        let mut out = [0.0; RECORD_DIM];
        out[..3].copy_from_slice(&self.position);
        out[3..7].copy_from_slice(&self.rotation);
        out[7..10].copy_from_slice(&self.log_scale);
        out[10] = self.opacity;
        out[11..14].copy_from_slice(&self.color);
        out[14..59].copy_from_slice(&self.sh_rest);
        out[59] = self.exist;
        out
    }

    /// Rebuild a record from its flattened form.
    pub fn from_flat(id: u32, flat: &[f32; RECORD_DIM]) -> Self {
        let mut rec = GaussianRecord::zeroed(id);
        rec.position.copy_from_slice(&flat[..3]);
        rec.rotation.copy_from_slice(&flat[3..7]);
        rec.log_scale.copy_from_slice(&flat[7..10]);
        rec.opacity = flat[10];
        rec.color.copy_from_slice(&flat[11..14]);
        rec.sh_rest.copy_from_slice(&flat[14..59]);
        rec.exist = flat[59];
        rec
    }

    /// Arithmetic mean of the per-axis standard deviations (linear domain).
    pub fn mean_scale(&self) -> f32 {
        let s: f32 = self.log_scale.iter().map(|v| v.exp()).sum();
        s / 3.0
    }

    /// Normalize the rotation quaternion in place. Falls back to the identity
    /// quaternion when the input has zero norm. Applying this twice leaves the
    /// bits of the first result unchanged.
    pub fn normalize_rotation(&mut self) {
        self.rotation = normalize_quaternion(self.rotation);
    }
}

/// Normalize a quaternion, idempotently: inputs already unit within a few
/// ulps are returned untouched so a second pass is a bitwise no-op.
pub fn normalize_quaternion(q: [f32; 4]) -> [f32; 4] {
    let norm_sq: f64 = q.iter().map(|&v| (v as f64) * (v as f64)).sum();
    if norm_sq == 0.0 || !norm_sq.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let norm = norm_sq.sqrt();
    if (norm - 1.0).abs() <= 4.0 * f32::EPSILON as f64 {
        return q;
    }
    let mut out = [0.0f32; 4];
    for (o, &v) in out.iter_mut().zip(q.iter()) {
        *o = ((v as f64) / norm) as f32;
    }
    out
}

/// A full scene at one resolution step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Resolution step this snapshot belongs to (0-based, increasing).
    pub step_index: usize,
    /// Free-text label, e.g. "600p".
    pub label: String,
    pub gaussians: Vec<GaussianRecord>,
}

impl Snapshot {
    pub fn new(step_index: usize, label: impl Into<String>, gaussians: Vec<GaussianRecord>) -> Self {
        Snapshot { step_index, label: label.into(), gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Positions of all records, in record order.
    pub fn positions(&self) -> Vec<[f32; 3]> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    /// True when every record id occurs exactly once.
    pub fn ids_unique(&self) -> bool {
        let mut ids: Vec<u32> = self.gaussians.iter().map(|g| g.id).collect();
        ids.sort_unstable();
        ids.windows(2).all(|w| w[0] != w[1])
    }

    /// Largest id present, or None for an empty snapshot.
    pub fn max_id(&self) -> Option<u32> {
        self.gaussians.iter().map(|g| g.id).max()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_views_have_spec_widths() {
        let rec = GaussianRecord::zeroed(0);
        assert_eq!(rec.geometry_features().len(), 11);
        assert_eq!(rec.appearance_features().len(), 50);
        assert_eq!(GEOMETRY_DIM + APPEARANCE_DIM - 1, RECORD_DIM);
    }

    #[test]
    fn views_reassemble_full_record() {
        // Concatenating the two views minus the duplicated exist entry must
        // reproduce the 60-value record.
        let mut rec = GaussianRecord::zeroed(7);
        for (i, v) in rec.position.iter_mut().enumerate() {
            *v = i as f32 + 0.5;
        }
        rec.rotation = [0.1, 0.2, 0.3, 0.4];
        rec.log_scale = [-1.0, -2.0, -3.0];
        rec.opacity = 0.8;
        rec.color = [0.2, 0.4, 0.6];
        for (i, v) in rec.sh_rest.iter_mut().enumerate() {
            *v = i as f32 * 0.01;
        }
        rec.exist = 5.0;

        let geo = rec.geometry_features();
        let app = rec.appearance_features();
        let flat = rec.to_flat();

        let mut rebuilt = [0.0f32; RECORD_DIM];
        rebuilt[..3].copy_from_slice(&geo[..3]); // position
        rebuilt[3..7].copy_from_slice(&geo[3..7]); // rotation
        rebuilt[7..10].copy_from_slice(&geo[7..10]); // log_scale
        rebuilt[10] = app[48]; // opacity
        rebuilt[11..14].copy_from_slice(&app[45..48]); // rgb
        rebuilt[14..59].copy_from_slice(&app[..45]); // sh
        rebuilt[59] = geo[10]; // exist (duplicated in app[49])
        assert_eq!(rebuilt, flat);
        assert_eq!(geo[10], app[49]);

        let back = GaussianRecord::from_flat(7, &flat);
        assert_eq!(back, rec);
    }

    #[test]
    fn quaternion_normalization_is_idempotent_bitwise() {
        let cases: [[f32; 4]; 4] = [
            [2.0, 0.0, 0.0, 0.0],
            [0.3, -0.4, 0.5, 0.6],
            [1e-4, 3e-5, -2e-4, 9e-5],
            [1.0, 0.0, 0.0, 0.0],
        ];
        for q in cases {
            let once = normalize_quaternion(q);
            let twice = normalize_quaternion(once);
            assert_eq!(once.map(f32::to_bits), twice.map(f32::to_bits), "input {q:?}");
            let norm: f64 = once.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm} for {q:?}");
        }
    }

    #[test]
    fn zero_quaternion_becomes_identity() {
        assert_eq!(normalize_quaternion([0.0; 4]), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(LIVE_EXIST_LOGIT) > 0.999);
        assert!(sigmoid(-20.0) < 1e-8);
    }
}
