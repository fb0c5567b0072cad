//! Synthetic multi-resolution snapshot sequences with known parent maps.
//!
//! Emulates threshold densification against an analytic target surface: the
//! error proxy for a Gaussian is its distance to the surface divided by its
//! mean scale, and Gaussians exceeding the per-step threshold either clone
//! (small ones) or split (large ones, scale divided by 1.6). Survivors relax
//! toward the surface each step, and appearance fields are deterministic
//! closed-form functions of position so that both streams carry signal.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use resplat_core::{normalize_quaternion, GaussianRecord, Snapshot, LIVE_EXIST_LOGIT};
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Fraction of the gap to the surface closed by each persisted Gaussian per
/// step. Geometric decay makes the next displacement a fixed multiple of the
/// current one, which is what the sequence model is asked to learn.
const RELAX: f64 = 0.5;
/// Scale divisor applied to both children of a split.
const SPLIT_FACTOR: f64 = 1.6;
/// Initial placement noise, as a fraction of the shape's bounding radius.
const JITTER_FRAC: f64 = 0.15;
/// Per-axis child offset spread, in units of that axis's scale.
const CHILD_SPREAD: f64 = 0.5;
/// Children are resampled until they land within this many mean scales of
/// the parent (stricter than the documented 3-sigma locality bound).
const CHILD_MAX_RADIUS: f64 = 2.5;

/// Analytic target surface for the error proxy.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceShape {
    Sphere { radius: f64 },
    #[serde(rename = "box")]
    Cuboid { half_extents: [f64; 3] },
    SphereUnion { spheres: Vec<([f64; 3], f64)> },
}

impl SurfaceShape {
    /// Nearest point on the surface.
    pub fn project(&self, p: [f64; 3]) -> [f64; 3] {
        match self {
            SurfaceShape::Sphere { radius } => project_sphere(p, [0.0; 3], *radius),
            SurfaceShape::Cuboid { half_extents } => project_cuboid(p, *half_extents),
            SurfaceShape::SphereUnion { spheres } => {
                let mut best = project_sphere(p, spheres[0].0, spheres[0].1);
                let mut best_d = norm2(sub(p, best));
                for &(c, r) in &spheres[1..] {
                    let q = project_sphere(p, c, r);
                    let d = norm2(sub(p, q));
                    if d < best_d {
                        best = q;
                        best_d = d;
                    }
                }
                best
            }
        }
    }

    /// Unsigned distance to the surface.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        norm2(sub(p, self.project(p))).sqrt()
    }

    /// Radius of a sphere around the origin guaranteed to contain the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            SurfaceShape::Sphere { radius } => *radius,
            SurfaceShape::Cuboid { half_extents } => norm2(*half_extents).sqrt(),
            SurfaceShape::SphereUnion { spheres } => spheres
                .iter()
                .map(|&(c, r)| norm2(c).sqrt() + r)
                .fold(0.0, f64::max),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Config(msg));
        match self {
            SurfaceShape::Sphere { radius } => {
                if *radius <= 0.0 {
                    return bad(format!("sphere radius {radius} must be positive"));
                }
            }
            SurfaceShape::Cuboid { half_extents } => {
                if half_extents.iter().any(|h| *h <= 0.0) {
                    return bad(format!("box half extents {half_extents:?} must be positive"));
                }
            }
            SurfaceShape::SphereUnion { spheres } => {
                if spheres.is_empty() {
                    return bad("sphere union needs at least one sphere".into());
                }
                if spheres.iter().any(|(_, r)| *r <= 0.0) {
                    return bad("sphere union radii must be positive".into());
                }
            }
        }
        Ok(())
    }
}

fn project_sphere(p: [f64; 3], center: [f64; 3], radius: f64) -> [f64; 3] {
    let d = sub(p, center);
    let n = norm2(d).sqrt();
    if n == 0.0 {
        return [center[0] + radius, center[1], center[2]];
    }
    let s = radius / n;
    [center[0] + d[0] * s, center[1] + d[1] * s, center[2] + d[2] * s]
}

fn project_cuboid(p: [f64; 3], h: [f64; 3]) -> [f64; 3] {
    let clamped = [
        p[0].clamp(-h[0], h[0]),
        p[1].clamp(-h[1], h[1]),
        p[2].clamp(-h[2], h[2]),
    ];
    if clamped != p {
        return clamped;
    }
    // Inside: push the axis closest to a face onto that face.
    let mut axis = 0;
    let mut margin = f64::INFINITY;
    for (i, (v, hh)) in p.iter().zip(&h).enumerate() {
        let m = hh - v.abs();
        if m < margin {
            margin = m;
            axis = i;
        }
    }
    let mut q = p;
    q[axis] = if p[axis] < 0.0 { -h[axis] } else { h[axis] };
    q
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm2(v: [f64; 3]) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

/// Scene description driving one simulated densification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScene {
    pub shape: SurfaceShape,
    pub seed: u64,
    /// Number of resolution levels (snapshots), at least 2.
    pub steps: usize,
    /// Gaussians seeded at step 0.
    pub initial_count: usize,
    /// Densify threshold per transition, length steps-1, decreasing so finer
    /// levels densify more. Infinite entries (no densification) may repeat.
    pub thresholds: Vec<f64>,
    /// Clone-vs-split boundary on mean scale; None uses the median mean scale
    /// of step 0.
    pub split_size: Option<f64>,
}

impl SimScene {
    /// A sphere scene with geometrically decreasing thresholds, the default
    /// fixture shape for tests and examples.
    pub fn sphere(seed: u64, steps: usize, initial_count: usize) -> Self {
        let thresholds = (0..steps.saturating_sub(1))
            .map(|t| 0.5 / 2f64.powi(t as i32))
            .collect();
        SimScene {
            shape: SurfaceShape::Sphere { radius: 1.0 },
            seed,
            steps,
            initial_count,
            thresholds,
            split_size: None,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.steps < 2 {
            return Err(DataError::Config(format!(
                "scene needs at least 2 steps, got {}",
                self.steps
            )));
        }
        if self.initial_count == 0 {
            return Err(DataError::Config("initial_count must be positive".into()));
        }
        if self.thresholds.len() != self.steps - 1 {
            return Err(DataError::Config(format!(
                "expected {} thresholds for {} steps, got {}",
                self.steps - 1,
                self.steps,
                self.thresholds.len()
            )));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(DataError::Config("thresholds must be positive".into()));
        }
        for pair in self.thresholds.windows(2) {
            let non_increasing = pair[1] <= pair[0];
            let strictly = pair[1] < pair[0] || pair[0].is_infinite();
            if !(non_increasing && strictly) {
                return Err(DataError::Config(format!(
                    "thresholds must decrease across steps, got {:?}",
                    self.thresholds
                )));
            }
        }
        self.shape.validate()
    }
}

/// Why a Gaussian was born.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BirthKind {
    Clone,
    Split,
}

/// One densification birth: `child` first appears in snapshot `step`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BirthEvent {
    pub child: u32,
    pub parent: u32,
    pub step: usize,
    pub kind: BirthKind,
}

/// Ground-truth parent map for a simulated sequence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LineageTruth {
    pub events: Vec<BirthEvent>,
}

impl LineageTruth {
    pub fn birth_of(&self, child: u32) -> Option<&BirthEvent> {
        self.events.iter().find(|e| e.child == child)
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Run the densification simulation, returning one snapshot per step and the
/// parent map of every birth. Bitwise deterministic for a fixed scene.
pub fn simulate(scene: &SimScene) -> Result<(Vec<Snapshot>, LineageTruth), DataError> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let mut current = seed_initial(scene, &mut rng);
    let mut next_id = current.len() as u32;
    let split_size = match scene.split_size {
        Some(s) => s,
        None => median(current.iter().map(mean_scale_f64).collect()),
    };

    let mut snapshots = vec![Snapshot::new(0, "step0", current.clone())];
    let mut truth = LineageTruth::default();

    for t in 0..scene.steps - 1 {
        let tau = scene.thresholds[t];
        let mut next = Vec::with_capacity(current.len());
        for g in &current {
            let pos = pos_f64(g);
            let ms = mean_scale_f64(g);
            let err = scene.shape.distance(pos) / ms;
            if err > tau {
                if ms < split_size {
                    // Clone: the parent persists and keeps relaxing; one
                    // child appears inside the parent's footprint.
                    next.push(relax(g, &scene.shape));
                    next.push(spawn_child(g, next_id, 1.0, &scene.shape, &mut rng));
                    truth.events.push(BirthEvent {
                        child: next_id,
                        parent: g.id,
                        step: t + 1,
                        kind: BirthKind::Clone,
                    });
                    next_id += 1;
                } else {
                    // Split: the parent retires in favor of two smaller
                    // children.
                    for _ in 0..2 {
                        next.push(spawn_child(g, next_id, 1.0 / SPLIT_FACTOR, &scene.shape, &mut rng));
                        truth.events.push(BirthEvent {
                            child: next_id,
                            parent: g.id,
                            step: t + 1,
                            kind: BirthKind::Split,
                        });
                        next_id += 1;
                    }
                }
            } else {
                next.push(relax(g, &scene.shape));
            }
        }
        current = next;
        snapshots.push(Snapshot::new(t + 1, format!("step{}", t + 1), current.clone()));
    }
    Ok((snapshots, truth))
}

/// Run the simulation and withhold the final snapshot as evaluation target.
pub fn holdout_pair(scene: &SimScene) -> Result<(Vec<Snapshot>, Snapshot), DataError> {
    let (mut snapshots, _) = simulate(scene)?;
    let target = snapshots.pop().expect("validated scenes have >= 2 steps");
    Ok((snapshots, target))
}

fn seed_initial(scene: &SimScene, rng: &mut ChaCha8Rng) -> Vec<GaussianRecord> {
    let br = scene.shape.bounding_radius();
    // Spacing-derived base scale: surface area spread over the seed count.
    let base_scale = 0.5 * (4.0 * std::f64::consts::PI * br * br / scene.initial_count as f64).sqrt();
    (0..scene.initial_count as u32)
        .map(|id| {
            let dir = random_unit(rng);
            let shell = [dir[0] * 1.2 * br, dir[1] * 1.2 * br, dir[2] * 1.2 * br];
            let anchor = scene.shape.project(shell);
            let pos = [
                anchor[0] + JITTER_FRAC * br * randn(rng),
                anchor[1] + JITTER_FRAC * br * randn(rng),
                anchor[2] + JITTER_FRAC * br * randn(rng),
            ];
            let log_scale = [
                (base_scale * (0.2 * randn(rng)).exp()).ln() as f32,
                (base_scale * (0.2 * randn(rng)).exp()).ln() as f32,
                (base_scale * (0.2 * randn(rng)).exp()).ln() as f32,
            ];
            let rotation = normalize_quaternion([
                randn(rng) as f32,
                randn(rng) as f32,
                randn(rng) as f32,
                randn(rng) as f32,
            ]);
            let mut rec = GaussianRecord::zeroed(id);
            rec.position = [pos[0] as f32, pos[1] as f32, pos[2] as f32];
            rec.rotation = rotation;
            rec.log_scale = log_scale;
            rec.exist = LIVE_EXIST_LOGIT;
            apply_appearance(&mut rec);
            rec
        })
        .collect()
}

/// Move a survivor a fixed fraction of the way to the surface and refresh its
/// position-determined appearance.
fn relax(g: &GaussianRecord, shape: &SurfaceShape) -> GaussianRecord {
    let p = pos_f64(g);
    let target = shape.project(p);
    let mut out = g.clone();
    out.position = [
        (p[0] + RELAX * (target[0] - p[0])) as f32,
        (p[1] + RELAX * (target[1] - p[1])) as f32,
        (p[2] + RELAX * (target[2] - p[2])) as f32,
    ];
    apply_appearance(&mut out);
    out
}

/// Sample a child inside the parent's footprint: per-axis normal offsets
/// scaled by the parent's axis scales, rejected until the total offset stays
/// within CHILD_MAX_RADIUS mean scales.
fn spawn_child(
    parent: &GaussianRecord,
    id: u32,
    scale_factor: f64,
    _shape: &SurfaceShape,
    rng: &mut ChaCha8Rng,
) -> GaussianRecord {
    let ppos = pos_f64(parent);
    let scales = [
        (parent.log_scale[0] as f64).exp(),
        (parent.log_scale[1] as f64).exp(),
        (parent.log_scale[2] as f64).exp(),
    ];
    let ms = (scales[0] + scales[1] + scales[2]) / 3.0;
    let offset = loop {
        let o = [
            CHILD_SPREAD * scales[0] * randn(rng),
            CHILD_SPREAD * scales[1] * randn(rng),
            CHILD_SPREAD * scales[2] * randn(rng),
        ];
        if norm2(o).sqrt() <= CHILD_MAX_RADIUS * ms {
            break o;
        }
    };
    let mut child = parent.clone();
    child.id = id;
    child.position = [
        (ppos[0] + offset[0]) as f32,
        (ppos[1] + offset[1]) as f32,
        (ppos[2] + offset[2]) as f32,
    ];
    child.log_scale = [
        ((scales[0] * scale_factor).ln()) as f32,
        ((scales[1] * scale_factor).ln()) as f32,
        ((scales[2] * scale_factor).ln()) as f32,
    ];
    child.exist = LIVE_EXIST_LOGIT;
    apply_appearance(&mut child);
    child
}

/// Appearance as documented closed-form fields of position: per-channel color
/// is 0.5 + 0.5 sin of one scaled coordinate, the opacity logit follows the
/// coordinate sum, and each spherical-harmonic slot follows its own fixed
/// direction. Smooth and deterministic, so the appearance stream is
/// learnable from position history.
fn apply_appearance(rec: &mut GaussianRecord) {
    let p = pos_f64(rec);
    rec.color = [
        (0.5 + 0.5 * (2.0 * p[0]).sin()) as f32,
        (0.5 + 0.5 * (2.0 * p[1] + 1.0).sin()) as f32,
        (0.5 + 0.5 * (2.0 * p[2] + 2.0).sin()) as f32,
    ];
    rec.opacity = (1.5 + (p[0] + p[1] + p[2]).sin()) as f32;
    for (k, slot) in rec.sh_rest.iter_mut().enumerate() {
        let kf = k as f64 * 0.9;
        let dir = [kf.sin(), kf.cos(), (2.0 * kf).sin()];
        let phase = 0.4 * (k + 1) as f64;
        *slot = (0.15 * (phase + p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]).sin()) as f32;
    }
}

fn pos_f64(g: &GaussianRecord) -> [f64; 3] {
    [g.position[0] as f64, g.position[1] as f64, g.position[2] as f64]
}

/// Mean of the per-axis scales, computed in f64 from the stored logs.
pub fn mean_scale_f64(g: &GaussianRecord) -> f64 {
    let s = [
        (g.log_scale[0] as f64).exp(),
        (g.log_scale[1] as f64).exp(),
        (g.log_scale[2] as f64).exp(),
    ];
    (s[0] + s[1] + s[2]) / 3.0
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite scales"));
    values[values.len() / 2]
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [randn(rng), randn(rng), randn(rng)];
        let n = norm2(v).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}
