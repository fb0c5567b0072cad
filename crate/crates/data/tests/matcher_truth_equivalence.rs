//! On a well-separated scene the feature matcher must reconstruct exactly the
//! trajectories that the recorded parent map gives: per-step movements are two
//! orders of magnitude below the inter-Gaussian spacing, so greedy matching at
//! the derived threshold is unambiguous.

use resplat_core::{GaussianRecord, Snapshot};
use resplat_data::sim::{BirthEvent, BirthKind, LineageTruth};
use resplat_data::{build_lineages, Lineage, TrackingMode};

fn base_record(id: u32, position: [f32; 3]) -> GaussianRecord {
    let mut rec = GaussianRecord::zeroed(id);
    rec.position = position;
    rec.rotation = [1.0, 0.0, 0.0, 0.0];
    rec.log_scale = [-1.0 - 0.05 * id as f32, -1.1, -0.9 + 0.03 * id as f32];
    rec.color = [
        0.2 + 0.08 * id as f32,
        0.9 - 0.07 * id as f32,
        0.1 + 0.05 * (id % 3) as f32,
    ];
    rec.opacity = 1.0 + 0.1 * id as f32;
    rec.exist = 10.0;
    rec
}

fn drift(id: u32) -> [f32; 3] {
    let k = (id % 8) as f32;
    [0.05 + 0.002 * k, -0.03, 0.02 * (id % 2) as f32]
}

fn moved(rec: &GaussianRecord) -> GaussianRecord {
    let d = drift(rec.id);
    let mut out = rec.clone();
    out.position = [
        rec.position[0] + d[0],
        rec.position[1] + d[1],
        rec.position[2] + d[2],
    ];
    out
}

/// Cube-corner scene: eight Gaussians spaced 10 apart, one clone birth at
/// step 1, one disappearance at step 1.
fn build_scene() -> (Vec<Snapshot>, LineageTruth) {
    let corners: Vec<[f32; 3]> = (0..8)
        .map(|i| {
            [
                if i & 1 == 0 { -5.0 } else { 5.0 },
                if i & 2 == 0 { -5.0 } else { 5.0 },
                if i & 4 == 0 { -5.0 } else { 5.0 },
            ]
        })
        .collect();
    let step0: Vec<GaussianRecord> =
        corners.iter().enumerate().map(|(i, p)| base_record(i as u32, *p)).collect();

    // Step 1: everyone except id 7 drifts; id 3 clones a child (id 100).
    let mut step1: Vec<GaussianRecord> =
        step0.iter().filter(|g| g.id != 7).map(moved).collect();
    let parent = step1.iter().find(|g| g.id == 3).expect("id 3 survives").clone();
    let mut child = parent.clone();
    child.id = 100;
    child.position =
        [parent.position[0] + 0.3, parent.position[1] + 0.2, parent.position[2] + 0.1];
    step1.push(child);

    // Step 2: everyone drifts again.
    let step2: Vec<GaussianRecord> = step1.iter().map(moved).collect();

    let truth = LineageTruth {
        events: vec![BirthEvent { child: 100, parent: 3, step: 1, kind: BirthKind::Clone }],
    };
    let snapshots = vec![
        Snapshot::new(0, "step0", step0),
        Snapshot::new(1, "step1", step1),
        Snapshot::new(2, "step2", step2),
    ];
    (snapshots, truth)
}

/// Canonical value-level form: ids and float bits, ignoring internal order.
fn canonical(lineages: &[Lineage]) -> Vec<(usize, Option<u32>, bool, Vec<(usize, u32, Vec<u32>)>)> {
    let mut out: Vec<_> = lineages
        .iter()
        .map(|l| {
            let states: Vec<(usize, u32, Vec<u32>)> = l
                .states
                .iter()
                .map(|(s, r)| (*s, r.id, r.to_flat().iter().map(|v| v.to_bits()).collect()))
                .collect();
            (l.birth_step, l.parent, l.dead, states)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn matcher_reproduces_truth_on_a_well_separated_scene() {
    let (snapshots, truth) = build_scene();

    // Separation precondition: distinct seed Gaussians dwarf the largest
    // per-step movement, so association is unambiguous at any sane
    // threshold. The clone pair is excluded: the child sits deliberately
    // close to its parent, and its second assertion below covers why the
    // matcher still cannot confuse the two.
    let dist = |a: &[f32; 3], b: &[f32; 3]| -> f64 {
        a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
    };
    let mut min_sep = f64::INFINITY;
    for s in &snapshots {
        for (i, a) in s.gaussians.iter().enumerate() {
            for b in &s.gaussians[i + 1..] {
                if a.id == 100 || b.id == 100 {
                    continue;
                }
                min_sep = min_sep.min(dist(&a.position, &b.position));
            }
        }
    }
    let max_move = (0..101u32)
        .map(|id| {
            let d = drift(id);
            ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt()
        })
        .fold(0.0, f64::max);
    assert!(
        min_sep > 20.0 * max_move,
        "scene is not separated enough: min spacing {min_sep}, max movement {max_move}"
    );
    // The parent moves far less than its distance to the newborn, so the
    // greedy matcher always prefers the true continuation.
    let parent_step0 = &snapshots[0].gaussians[3];
    let parent_step1 = snapshots[1].gaussians.iter().find(|g| g.id == 3).unwrap();
    let child_step1 = snapshots[1].gaussians.iter().find(|g| g.id == 100).unwrap();
    assert!(
        dist(&parent_step0.position, &parent_step1.position)
            < 0.5 * dist(&parent_step0.position, &child_step1.position)
    );

    let from_truth =
        build_lineages(&snapshots, TrackingMode::Truth(&truth)).expect("truth tracking");
    let from_matching = build_lineages(&snapshots, TrackingMode::Matcher { theta: None })
        .expect("feature matching");

    assert_eq!(
        canonical(&from_truth),
        canonical(&from_matching),
        "matcher must reproduce the recorded trajectories exactly"
    );

    // Spot-check the interesting structure is present at all.
    assert_eq!(from_truth.len(), 9, "eight seeds plus one clone");
    let dead: Vec<_> = from_truth.iter().filter(|l| l.dead).collect();
    assert_eq!(dead.len(), 1, "exactly the vanished Gaussian dies");
    assert_eq!(dead[0].states.last().unwrap().1.id, 7);
    let branched: Vec<_> = from_truth.iter().filter(|l| l.parent.is_some()).collect();
    assert_eq!(branched.len(), 1);
    assert_eq!(branched[0].parent, Some(3));
    assert_eq!(branched[0].birth_step, 1);
    assert_eq!(branched[0].states.len(), 3, "clone inherits the parent prefix");
}
