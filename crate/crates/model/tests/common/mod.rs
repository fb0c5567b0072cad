//! Deterministic toy trajectories shared by the integration tests.
#![allow(dead_code)] // each test binary uses a different subset

use resplat_core::GaussianRecord;
use resplat_data::Lineage;

/// Unit direction `i` of `n` on a Fibonacci sphere.
pub fn fib_dir(i: usize, n: usize) -> [f64; 3] {
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
    let r = (1.0 - z * z).sqrt();
    let phi = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
    [r * phi.cos(), r * phi.sin(), z]
}

/// A trajectory on a slowly inflating sphere: position moves radially
/// outward each step, appearance is nearly constant. Simple enough that a
/// small model can learn the next state from the history.
pub fn sphere_lineage(i: usize, n: usize, len: usize) -> Lineage {
    let dir = fib_dir(i, n);
    let states = (0..len)
        .map(|s| {
            let radius = 1.0 + 0.08 * s as f64;
            let mut rec = GaussianRecord::zeroed(i as u32);
            rec.position = [
                (dir[0] * radius) as f32,
                (dir[1] * radius) as f32,
                (dir[2] * radius) as f32,
            ];
            rec.log_scale = [-2.0 + 0.05 * s as f32, -2.0, -2.0 + 0.02 * s as f32];
            rec.opacity = 0.5 + 0.1 * s as f32;
            rec.color = [
                (0.5 + 0.4 * dir[0]) as f32,
                (0.5 + 0.4 * dir[1]) as f32,
                (0.5 + 0.4 * dir[2]) as f32,
            ];
            rec.sh_rest[0] = (0.1 * dir[0]) as f32;
            rec.sh_rest[1] = (0.1 * dir[1]) as f32;
            rec.sh_rest[2] = (0.1 * dir[2]) as f32;
            (s, rec)
        })
        .collect();
    Lineage { id: i as u32, parent: None, birth_step: 0, states, dead: false }
}

/// `n` inflating-sphere trajectories of equal length.
pub fn sphere_lineages(n: usize, len: usize) -> Vec<Lineage> {
    (0..n).map(|i| sphere_lineage(i, n, len)).collect()
}

/// A trajectory whose features vary with both id and step, so distinct ids
/// produce distinct batch rows.
pub fn varied_lineage(id: u32, len: usize) -> Lineage {
    varied_lineage_from(id, 0, len)
}

/// Like [`varied_lineage`], starting at an arbitrary step index.
pub fn varied_lineage_from(id: u32, start: usize, len: usize) -> Lineage {
    let states = (start..start + len)
        .map(|s| {
            let mut rec = GaussianRecord::zeroed(id);
            rec.position = [0.3 * s as f32 - 0.1 * id as f32, 0.2 * id as f32, 0.1 + 0.05 * s as f32];
            rec.rotation = resplat_core::normalize_quaternion([
                1.0,
                0.1 * id as f32,
                0.05 * s as f32,
                0.0,
            ]);
            rec.log_scale = [-1.0 - 0.1 * id as f32, -1.0, -1.0 + 0.02 * s as f32];
            rec.opacity = 0.2 * s as f32 - 0.1 * id as f32;
            rec.color = [0.1 * id as f32, 0.5, 1.0 - 0.05 * id as f32];
            for k in 0..6 {
                rec.sh_rest[k] = 0.01 * (id as f32 + 1.0) * (k as f32 + 1.0);
            }
            (s, rec)
        })
        .collect();
    Lineage { id, parent: None, birth_step: start, states, dead: false }
}
