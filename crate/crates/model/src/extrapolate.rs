//! Sequential next-resolution inference: pick the trajectories worth
//! refining, predict each one's next state with both stream models, gate
//! acceptance on the exist logits, merge accepted predictions into the scene,
//! and prune weak records under a bounded budget. Accepted predictions extend
//! their trajectories, so consecutive steps build on earlier outputs.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use resplat_core::{normalize_quaternion, GaussianRecord, Snapshot};
use resplat_data::{
    laplacian_density_weights, median_nn_distance, select_topk, tensorize_extend,
    ImportanceField, Lineage,
};
use serde::Serialize;

use crate::config::Stream;
use crate::error::ModelError;
use crate::vae::StreamVae;
use resplat_autodiff::Tape;

/// Inference-time policy for one or more refinement steps.
#[derive(Debug, Clone)]
pub struct ExtrapolationPlan {
    /// How many sequential refinement steps to run.
    pub steps: usize,
    /// Share of live trajectories refined per step.
    pub fraction: f64,
    /// Probability both exist logits must reach for acceptance.
    pub exist_threshold: f64,
    /// Records whose opacity logit falls below this are prune candidates.
    pub opacity_floor: f64,
    /// Largest share of the merged scene pruning may remove per step.
    pub max_prune_fraction: f64,
}

impl Default for ExtrapolationPlan {
    fn default() -> Self {
        ExtrapolationPlan {
            steps: 1,
            fraction: 1.0,
            exist_threshold: 0.5,
            opacity_floor: (0.01f64 / 0.99).ln(),
            max_prune_fraction: 0.2,
        }
    }
}

impl ExtrapolationPlan {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.steps == 0 {
            return Err(ModelError::Config("refinement needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(ModelError::Config(format!(
                "selection fraction {} must lie in [0, 1]",
                self.fraction
            )));
        }
        if !(self.exist_threshold > 0.0 && self.exist_threshold < 1.0) {
            return Err(ModelError::Config(format!(
                "exist threshold {} must lie strictly inside (0, 1)",
                self.exist_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.max_prune_fraction) {
            return Err(ModelError::Config(format!(
                "prune fraction {} must lie in [0, 1]",
                self.max_prune_fraction
            )));
        }
        Ok(())
    }
}

/// How refinement candidates are ranked.
#[derive(Debug, Clone)]
pub enum SelectionWeights<'a> {
    /// Every live trajectory weighs the same.
    Uniform,
    /// Caller-provided weights covering every live trajectory id.
    Field(&'a ImportanceField),
    /// Recompute curvature weights on the current scene each step.
    Curvature { k: usize, bandwidth_scale: f64 },
}

/// Bookkeeping from one merge-and-prune pass.
#[derive(Debug, Clone, Serialize)]
pub struct PruneStats {
    /// Predictions whose exist probability passed the gate.
    pub admitted: usize,
    /// Predictions rejected at the door by the exist gate.
    pub rejected: usize,
    /// Records in the merged scene eligible for pruning.
    pub candidates: usize,
    /// Ids actually removed, weakest first.
    pub pruned: Vec<u32>,
    /// Candidate ids kept only because the prune budget ran out.
    pub retained_by_cap: Vec<u32>,
}

/// Telemetry for one refinement step.
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step_index: usize,
    pub selected: usize,
    pub accepted: usize,
    /// Set when no prediction survived the acceptance gate.
    pub no_accepted_warning: bool,
    pub latency_ms: f64,
    pub prune: PruneStats,
    pub output_count: usize,
}

/// Snapshots and reports for a whole refinement run.
#[derive(Debug)]
pub struct ExtrapolationOutcome {
    pub snapshots: Vec<Snapshot>,
    pub reports: Vec<StepReport>,
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The current scene implied by live trajectory tips, in list order.
pub fn snapshot_of_tips(lineages: &[Lineage]) -> Result<Snapshot, ModelError> {
    let live: Vec<&Lineage> = lineages.iter().filter(|l| !l.dead).collect();
    if live.is_empty() {
        return Err(ModelError::Config("no live trajectories".into()));
    }
    let step = live
        .iter()
        .map(|l| l.states.last().expect("non-empty trajectory").0)
        .max()
        .expect("non-empty");
    let records = live.iter().map(|l| l.states.last().expect("non-empty").1.clone()).collect();
    Ok(Snapshot::new(step, "extrapolated", records))
}

/// Union the scene with gated predictions, then prune weak records under the
/// budget. Predictions failing the exist gate never enter the union; records
/// in the union failing either gate are pruned weakest-first until the cap.
pub fn merge_and_prune(
    base: &Snapshot,
    predicted: &[GaussianRecord],
    plan: &ExtrapolationPlan,
) -> Result<(Snapshot, PruneStats), ModelError> {
    plan.validate()?;
    let base_ids: HashSet<u32> = base.gaussians.iter().map(|g| g.id).collect();
    let mut union = base.gaussians.clone();
    let mut admitted = 0usize;
    let mut rejected = 0usize;
    for rec in predicted {
        if base_ids.contains(&rec.id) {
            return Err(ModelError::Config(format!(
                "predicted record id {} already exists in the scene",
                rec.id
            )));
        }
        if sigmoid64(rec.exist as f64) >= plan.exist_threshold {
            union.push(rec.clone());
            admitted += 1;
        } else {
            rejected += 1;
        }
    }

    let liveness = |g: &GaussianRecord| -> f64 {
        sigmoid64(g.exist as f64).min(sigmoid64(g.opacity as f64))
    };
    let mut candidates: Vec<usize> = union
        .iter()
        .enumerate()
        .filter(|(_, g)| {
            sigmoid64(g.exist as f64) < plan.exist_threshold
                || (g.opacity as f64) < plan.opacity_floor
        })
        .map(|(i, _)| i)
        .collect();
    candidates.sort_by(|&a, &b| {
        liveness(&union[a])
            .total_cmp(&liveness(&union[b]))
            .then(union[a].id.cmp(&union[b].id))
    });

    let cap = (plan.max_prune_fraction * union.len() as f64).floor() as usize;
    let cut = candidates.len().min(cap);
    let pruned: Vec<u32> = candidates[..cut].iter().map(|&i| union[i].id).collect();
    let retained_by_cap: Vec<u32> = candidates[cut..].iter().map(|&i| union[i].id).collect();
    let drop: HashSet<usize> = candidates[..cut].iter().copied().collect();
    let records: Vec<GaussianRecord> = union
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, g)| g)
        .collect();

    let stats = PruneStats {
        admitted,
        rejected,
        candidates: candidates.len(),
        pruned,
        retained_by_cap,
    };
    Ok((Snapshot::new(base.step_index, base.label.clone(), records), stats))
}

struct StreamOutputs {
    values: Vec<f64>,
    positions: Vec<f64>,
}

fn run_stream(
    model: &StreamVae,
    batch: &resplat_data::LineageBatch,
) -> Result<StreamOutputs, ModelError> {
    let mut tape = Tape::inference();
    let bound = model.params.bind(&mut tape);
    let (mu, _logvar) = model.encode(&mut tape, &bound, batch)?;
    // Inference decodes from the posterior mean: deterministic by design.
    let decoded = model.decode(&mut tape, &bound, batch, mu)?;
    let values = tape.value(decoded.output).data().to_vec();
    let positions = match decoded.positions {
        Some(p) => tape.value(p).data().to_vec(),
        None => Vec::new(),
    };
    Ok(StreamOutputs { values, positions })
}

fn selection_field(
    lineages: &[Lineage],
    live_indices: &[usize],
    base: &Snapshot,
    selection: &SelectionWeights,
) -> Result<ImportanceField, ModelError> {
    let tip_ids: Vec<u32> = live_indices.iter().map(|&i| lineages[i].id).collect();
    match selection {
        SelectionWeights::Uniform => Ok(ImportanceField::uniform(tip_ids)),
        SelectionWeights::Field(field) => {
            let lookup = field.lookup();
            let mut weights = Vec::with_capacity(tip_ids.len());
            for id in &tip_ids {
                match lookup.get(id) {
                    Some(w) => weights.push(*w),
                    None => {
                        return Err(ModelError::Config(format!(
                            "importance field lacks a weight for trajectory {id}"
                        )))
                    }
                }
            }
            Ok(ImportanceField {
                ids: tip_ids,
                weights,
                method: field.method.clone(),
                uniform_fallback: field.uniform_fallback,
            })
        }
        SelectionWeights::Curvature { k, bandwidth_scale } => {
            let curvature = (|| {
                let spacing = median_nn_distance(base).ok()?;
                if !(spacing > 0.0) {
                    return None;
                }
                laplacian_density_weights(base, *k, bandwidth_scale * spacing).ok()
            })();
            match curvature {
                Some(field) => {
                    let lookup = field.lookup();
                    let weights = tip_ids
                        .iter()
                        .map(|id| lookup.get(id).copied().unwrap_or(1.0))
                        .collect();
                    Ok(ImportanceField {
                        ids: tip_ids,
                        weights,
                        method: field.method.clone(),
                        uniform_fallback: field.uniform_fallback,
                    })
                }
                // Scenes too small or degenerate for a curvature estimate
                // fall back to uniform selection.
                None => Ok(ImportanceField::uniform(tip_ids)),
            }
        }
    }
}

/// One refinement step: predict next states for the selected trajectories,
/// extend them with accepted predictions, and return the merged scene at the
/// next step index.
pub fn extrapolate_step(
    lineages: &mut [Lineage],
    base: &Snapshot,
    plan: &ExtrapolationPlan,
    geo: &StreamVae,
    app: &StreamVae,
    selection: &SelectionWeights,
) -> Result<(Snapshot, StepReport), ModelError> {
    plan.validate()?;
    if geo.stream != Stream::Geometry || app.stream != Stream::Appearance {
        return Err(ModelError::Config("stream models passed in the wrong order".into()));
    }
    let start = Instant::now();

    let live_indices: Vec<usize> =
        (0..lineages.len()).filter(|&i| !lineages[i].dead).collect();
    if live_indices.is_empty() {
        return Err(ModelError::Config("no live trajectories to refine".into()));
    }
    for &i in &live_indices {
        if lineages[i].len() < 2 {
            return Err(ModelError::Config(format!(
                "trajectory {} has fewer than two states",
                lineages[i].id
            )));
        }
    }

    let selected_ids: Vec<u32> = if plan.fraction == 0.0 {
        Vec::new()
    } else {
        let field = selection_field(lineages, &live_indices, base, selection)?;
        select_topk(&field, plan.fraction)?
    };
    let by_id: HashMap<u32, usize> =
        live_indices.iter().map(|&i| (lineages[i].id, i)).collect();
    // Ascending trajectory id keeps new record ids deterministic.
    let mut selected: Vec<usize> = selected_ids
        .iter()
        .map(|id| *by_id.get(id).expect("selection drawn from live tips"))
        .collect();
    selected.sort_unstable();

    let mut accepted: Vec<GaussianRecord> = Vec::new();
    let mut no_accepted_warning = true;
    if !selected.is_empty() {
        let chosen: Vec<Lineage> = selected.iter().map(|&i| lineages[i].clone()).collect();
        let max_len = chosen.iter().map(Lineage::len).max().expect("non-empty");
        let batch = tensorize_extend(&chosen, max_len + 1)?;
        let geo_out = run_stream(geo, &batch)?;
        let app_out = run_stream(app, &batch)?;

        let mut next_id = base
            .gaussians
            .iter()
            .map(|g| g.id)
            .chain(lineages.iter().flat_map(|l| l.states.iter().map(|(_, r)| r.id)))
            .max()
            .unwrap_or(0)
            + 1;
        let gdim = Stream::Geometry.feature_dim();
        let adim = Stream::Appearance.feature_dim();
        for (row, &lin_idx) in selected.iter().enumerate() {
            let g = &geo_out.values[row * gdim..(row + 1) * gdim];
            let a = &app_out.values[row * adim..(row + 1) * adim];
            let exist_g = g[10];
            let exist_a = a[49];
            if sigmoid64(exist_g) < plan.exist_threshold
                || sigmoid64(exist_a) < plan.exist_threshold
            {
                continue;
            }
            let pos = &geo_out.positions[row * 3..(row + 1) * 3];
            let mut rec = GaussianRecord::zeroed(next_id);
            next_id += 1;
            rec.position = [pos[0] as f32, pos[1] as f32, pos[2] as f32];
            rec.rotation = normalize_quaternion([
                g[3] as f32,
                g[4] as f32,
                g[5] as f32,
                g[6] as f32,
            ]);
            rec.log_scale = [g[7] as f32, g[8] as f32, g[9] as f32];
            for (dst, src) in rec.sh_rest.iter_mut().zip(&a[..45]) {
                *dst = *src as f32;
            }
            rec.color = [a[45] as f32, a[46] as f32, a[47] as f32];
            rec.opacity = a[48] as f32;
            // A single exist value must encode the conjunction of both
            // streams' gates: the minimum does exactly that.
            rec.exist = exist_g.min(exist_a) as f32;

            let lin = &mut lineages[lin_idx];
            let next_step = lin.states.last().expect("non-empty").0 + 1;
            lin.states.push((next_step, rec.clone()));
            lin.id = rec.id;
            accepted.push(rec);
            no_accepted_warning = false;
        }
    }

    let (merged, stats) = if accepted.is_empty() {
        (
            Snapshot::new(base.step_index, base.label.clone(), base.gaussians.clone()),
            PruneStats {
                admitted: 0,
                rejected: 0,
                candidates: 0,
                pruned: Vec::new(),
                retained_by_cap: Vec::new(),
            },
        )
    } else {
        merge_and_prune(base, &accepted, plan)?
    };
    let output = Snapshot::new(base.step_index + 1, merged.label, merged.gaussians);

    let report = StepReport {
        step_index: output.step_index,
        selected: selected.len(),
        accepted: accepted.len(),
        no_accepted_warning,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        prune: stats,
        output_count: output.gaussians.len(),
    };
    Ok((output, report))
}

/// Run `plan.steps` sequential refinement steps starting from the live tips.
pub fn extrapolate(
    lineages: &mut Vec<Lineage>,
    plan: &ExtrapolationPlan,
    geo: &StreamVae,
    app: &StreamVae,
    selection: &SelectionWeights,
) -> Result<ExtrapolationOutcome, ModelError> {
    plan.validate()?;
    let mut base = snapshot_of_tips(lineages)?;
    let mut snapshots = Vec::with_capacity(plan.steps);
    let mut reports = Vec::with_capacity(plan.steps);
    for _ in 0..plan.steps {
        let (snap, report) = extrapolate_step(lineages, &base, plan, geo, app, selection)?;
        base = snap.clone();
        snapshots.push(snap);
        reports.push(report);
    }
    Ok(ExtrapolationOutcome { snapshots, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u32, exist: f32, opacity: f32) -> GaussianRecord {
        let mut rec = GaussianRecord::zeroed(id);
        rec.exist = exist;
        rec.opacity = opacity;
        rec.position = [id as f32, 0.0, 0.0];
        rec
    }

    #[test]
    fn merge_with_no_predictions_keeps_the_base() {
        let base = Snapshot::new(3, "scene", vec![record(0, 10.0, 1.0), record(1, 10.0, 2.0)]);
        let plan = ExtrapolationPlan::default();
        let (out, stats) = merge_and_prune(&base, &[], &plan).expect("valid");
        assert_eq!(out.gaussians, base.gaussians);
        assert_eq!(out.step_index, 3);
        assert_eq!(stats.pruned.len(), 0);
        assert_eq!(stats.candidates, 0);
    }

    #[test]
    fn predictions_failing_the_exist_gate_never_enter_the_scene() {
        let base = Snapshot::new(0, "scene", vec![record(0, 10.0, 1.0)]);
        let plan = ExtrapolationPlan::default();
        // sigmoid(-8) is far below the 0.5 gate.
        let preds = vec![record(10, -8.0, 1.0), record(11, -9.0, 1.0)];
        let (out, stats) = merge_and_prune(&base, &preds, &plan).expect("valid");
        assert_eq!(out.gaussians, base.gaussians, "base unchanged");
        assert_eq!(stats.rejected, 2);
        assert_eq!(stats.admitted, 0);
        assert_eq!(stats.pruned.len(), 0, "rejected records are not pruned records");
    }

    #[test]
    fn prune_budget_caps_removals_and_marks_the_rest() {
        // 100 admitted predictions into an empty scene, 30 below the opacity
        // floor: the 20% budget removes exactly 20, the 10 strongest failures
        // stay with a retained-by-cap marker.
        let base = Snapshot::new(0, "scene", Vec::new());
        let plan = ExtrapolationPlan::default();
        let mut preds = Vec::new();
        for i in 0..100u32 {
            let opacity = if i < 30 {
                // Below the floor, ordered so ids 0..20 are the weakest.
                plan.opacity_floor as f32 - 1.0 - (30 - i) as f32 * 0.01
            } else {
                1.0
            };
            preds.push(record(i, 10.0, opacity));
        }
        let (out, stats) = merge_and_prune(&base, &preds, &plan).expect("valid");
        assert_eq!(stats.admitted, 100);
        assert_eq!(stats.candidates, 30);
        assert_eq!(stats.pruned.len(), 20, "20% of 100");
        assert_eq!(stats.retained_by_cap.len(), 10);
        assert_eq!(out.gaussians.len(), 80);
        // The weakest (lowest-opacity) failures go first.
        let expected_pruned: Vec<u32> = (0..20).collect();
        assert_eq!(stats.pruned, expected_pruned);
        let expected_kept: Vec<u32> = (20..30).collect();
        assert_eq!(stats.retained_by_cap, expected_kept);
    }

    #[test]
    fn merge_is_idempotent_once_pruned() {
        // Five records keep the 20% budget at one removal, enough for the
        // single sub-floor record.
        let base = Snapshot::new(
            0,
            "scene",
            vec![
                record(0, 10.0, 1.0),
                record(1, 10.0, -20.0),
                record(2, 10.0, 1.0),
                record(3, 10.0, 1.0),
                record(4, 10.0, 1.0),
            ],
        );
        let plan = ExtrapolationPlan::default();
        let (once, stats) = merge_and_prune(&base, &[], &plan).expect("valid");
        assert_eq!(stats.pruned, vec![1], "sub-floor record pruned within budget");
        let (twice, stats2) = merge_and_prune(&once, &[], &plan).expect("valid");
        assert_eq!(once.gaussians, twice.gaussians, "a pruned scene is a fixed point");
        assert_eq!(stats2.pruned.len(), 0);
    }

    #[test]
    fn duplicate_prediction_ids_are_rejected() {
        let base = Snapshot::new(0, "scene", vec![record(7, 10.0, 1.0)]);
        let plan = ExtrapolationPlan::default();
        let err = merge_and_prune(&base, &[record(7, 10.0, 1.0)], &plan);
        assert!(err.is_err(), "scene ids must stay unique");
    }

    #[test]
    fn plan_validation_rejects_out_of_range_knobs() {
        let mut plan = ExtrapolationPlan::default();
        plan.exist_threshold = 1.0;
        assert!(plan.validate().is_err(), "threshold must be strictly inside (0,1)");
        let mut plan = ExtrapolationPlan::default();
        plan.fraction = 1.5;
        assert!(plan.validate().is_err());
        let mut plan = ExtrapolationPlan::default();
        plan.steps = 0;
        assert!(plan.validate().is_err());
    }
}
