//! Refinement-loop contracts: selection budgets, the two-stream acceptance
//! gate, trajectory extension, deterministic scene output, and
//! reconstruction quality after training.

mod common;

use resplat_core::write_ply;
use resplat_data::{tensorize, ImportanceField};
use resplat_model::{
    extrapolate, extrapolate_step, snapshot_of_tips, ExtrapolationPlan, ModelConfig,
    SelectionWeights, Stream, StreamVae, TrainConfig,
};

/// Fresh tiny models with the decoder's exist logit biased to `exist_bias`,
/// so acceptance is under test control. The appearance opacity output is
/// biased high to keep records clear of the prune floor.
fn biased_models(geo_exist: f64, app_exist: f64) -> (StreamVae, StreamVae) {
    let mut geo = StreamVae::new(Stream::Geometry, ModelConfig::tiny(), 21).expect("valid");
    geo.params.tensor_mut("dec.head.2.b").data_mut()[10] = geo_exist;
    let mut app = StreamVae::new(Stream::Appearance, ModelConfig::tiny(), 22).expect("valid");
    {
        let b = app.params.tensor_mut("dec.head.2.b").data_mut();
        b[49] = app_exist;
        b[48] = 8.0;
    }
    (geo, app)
}

#[test]
fn zero_fraction_returns_the_scene_unchanged() {
    let (geo, app) = biased_models(8.0, 8.0);
    let mut lineages = common::sphere_lineages(5, 3);
    let before = lineages.clone();
    let base = snapshot_of_tips(&lineages).expect("live tips");

    let plan = ExtrapolationPlan { fraction: 0.0, ..ExtrapolationPlan::default() };
    let (snap, report) =
        extrapolate_step(&mut lineages, &base, &plan, &geo, &app, &SelectionWeights::Uniform)
            .expect("runs");

    assert_eq!(snap.gaussians, base.gaussians, "records must be identical");
    assert_eq!(snap.step_index, base.step_index + 1);
    assert_eq!(report.selected, 0);
    assert_eq!(report.accepted, 0);
    assert!(report.no_accepted_warning, "nothing accepted raises the warning flag");
    for (a, b) in lineages.iter().zip(&before) {
        assert_eq!(a.states, b.states, "no trajectory may grow");
    }
}

#[test]
fn accepted_predictions_grow_the_scene_and_their_trajectories() {
    let (geo, app) = biased_models(8.0, 8.0);
    let mut lineages = common::sphere_lineages(6, 3);
    let base = snapshot_of_tips(&lineages).expect("live tips");
    assert_eq!(base.gaussians.len(), 6);

    let plan = ExtrapolationPlan { fraction: 0.5, ..ExtrapolationPlan::default() };
    let (snap, report) =
        extrapolate_step(&mut lineages, &base, &plan, &geo, &app, &SelectionWeights::Uniform)
            .expect("runs");

    assert_eq!(report.selected, 3, "ceil(0.5 * 6)");
    assert_eq!(report.accepted, 3, "the biased gate accepts everything");
    assert!(!report.no_accepted_warning);
    assert_eq!(report.prune.admitted, 3);
    assert_eq!(report.prune.rejected, 0);
    assert_eq!(report.prune.pruned.len(), 0);
    assert_eq!(snap.gaussians.len(), 9, "six base records plus three predictions");
    assert_eq!(report.output_count, 9);
    assert!(
        snap.gaussians.len() as f64 <= 6.0 * (1.0 + plan.fraction),
        "output may never exceed input times (1 + fraction)"
    );

    // Uniform weights tie-break toward lower ids: trajectories 0, 1, 2 grow.
    for id in 0..3u32 {
        let lin = lineages.iter().find(|l| l.states[0].1.id == id).expect("present");
        assert_eq!(lin.len(), 4, "an accepted prediction extends its trajectory");
        assert_eq!(lin.states.last().expect("non-empty").0, 3, "steps stay contiguous");
        assert_eq!(lin.id, 6 + id, "new records take fresh scene-unique ids");
    }
    for id in 3..6u32 {
        let lin = lineages.iter().find(|l| l.id == id).expect("present");
        assert_eq!(lin.len(), 3, "unselected trajectories stay put");
    }

    // Predicted records carry normalized rotations and both-stream liveness.
    for rec in snap.gaussians.iter().filter(|g| g.id >= 6) {
        let norm: f32 = rec.rotation.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-3, "rotation near unit norm, got {norm}");
        assert!(rec.exist > 0.0, "accepted records are live");
    }
}

#[test]
fn the_gate_requires_both_streams_to_agree() {
    for (geo_bias, app_bias) in [(8.0, -8.0), (-8.0, 8.0), (-8.0, -8.0)] {
        let (geo, app) = biased_models(geo_bias, app_bias);
        let mut lineages = common::sphere_lineages(4, 3);
        let before = lineages.clone();
        let base = snapshot_of_tips(&lineages).expect("live tips");

        let plan = ExtrapolationPlan::default();
        let (snap, report) =
            extrapolate_step(&mut lineages, &base, &plan, &geo, &app, &SelectionWeights::Uniform)
                .expect("runs");

        assert_eq!(report.selected, 4, "everything is selected at fraction 1");
        assert_eq!(
            report.accepted, 0,
            "bias ({geo_bias}, {app_bias}): one failing stream vetoes acceptance"
        );
        assert!(report.no_accepted_warning);
        assert_eq!(snap.gaussians, base.gaussians, "scene unchanged");
        assert_eq!(report.prune.pruned.len(), 0, "nothing admitted, nothing pruned");
        for (a, b) in lineages.iter().zip(&before) {
            assert_eq!(a.states.len(), b.states.len(), "no trajectory may grow");
        }
    }
}

#[test]
fn the_driver_composes_steps_exactly() {
    let (geo, app) = biased_models(8.0, 8.0);
    // At fraction 1 every live trajectory is refined in both steps, so the
    // second step must consume the first step's predictions as history.
    let plan = ExtrapolationPlan { steps: 2, fraction: 1.0, ..ExtrapolationPlan::default() };

    let mut auto_lineages = common::sphere_lineages(6, 3);
    let outcome = extrapolate(&mut auto_lineages, &plan, &geo, &app, &SelectionWeights::Uniform)
        .expect("runs");
    assert_eq!(outcome.snapshots.len(), 2);
    assert_eq!(outcome.reports.len(), 2);

    // Replaying the two steps by hand must give bit-identical scenes.
    let mut manual_lineages = common::sphere_lineages(6, 3);
    let base = snapshot_of_tips(&manual_lineages).expect("live tips");
    let (s1, _) = extrapolate_step(
        &mut manual_lineages,
        &base,
        &plan,
        &geo,
        &app,
        &SelectionWeights::Uniform,
    )
    .expect("first step");
    let (s2, _) =
        extrapolate_step(&mut manual_lineages, &s1, &plan, &geo, &app, &SelectionWeights::Uniform)
            .expect("second step");

    assert_eq!(outcome.snapshots[0], s1);
    assert_eq!(outcome.snapshots[1], s2, "the second step builds on the first scene");
    assert!(
        s2.gaussians.len() > s1.gaussians.len(),
        "with an always-open gate the scene keeps growing"
    );
    // Trajectory growth carried between steps: every trajectory was refined
    // twice, so each history holds both of its predictions.
    assert!(
        manual_lineages.iter().all(|l| l.len() == 5),
        "a trajectory refined twice holds both predictions"
    );
}

#[test]
fn scene_output_is_byte_deterministic() {
    let (geo, app) = biased_models(8.0, 8.0);
    let plan = ExtrapolationPlan { steps: 1, fraction: 0.5, ..ExtrapolationPlan::default() };

    let run = || {
        let mut lineages = common::sphere_lineages(6, 3);
        extrapolate(&mut lineages, &plan, &geo, &app, &SelectionWeights::Uniform)
            .expect("runs")
            .snapshots
            .remove(0)
    };
    let snap_a = run();
    let snap_b = run();
    assert_eq!(snap_a, snap_b, "identical inputs give identical scenes");

    let dir = tempfile::tempdir().expect("tempdir");
    let path_a = dir.path().join("a.ply");
    let path_b = dir.path().join("b.ply");
    write_ply(&path_a, &snap_a).expect("writes");
    write_ply(&path_b, &snap_b).expect("writes");
    let bytes_a = std::fs::read(&path_a).expect("readable");
    let bytes_b = std::fs::read(&path_b).expect("readable");
    assert_eq!(bytes_a, bytes_b, "scene files must match byte for byte");
}

#[test]
fn curvature_selection_falls_back_to_uniform_on_tiny_scenes() {
    let (geo, app) = biased_models(8.0, 8.0);
    let mut lineages = common::sphere_lineages(5, 3);
    let base = snapshot_of_tips(&lineages).expect("live tips");
    // k exceeds the scene size, so the curvature estimate is impossible.
    let selection = SelectionWeights::Curvature { k: 16, bandwidth_scale: 2.0 };
    let plan = ExtrapolationPlan { fraction: 0.4, ..ExtrapolationPlan::default() };
    let (_, report) = extrapolate_step(&mut lineages, &base, &plan, &geo, &app, &selection)
        .expect("falls back to uniform instead of failing");
    assert_eq!(report.selected, 2, "ceil(0.4 * 5)");
}

#[test]
fn explicit_weight_fields_must_cover_every_live_trajectory() {
    let (geo, app) = biased_models(8.0, 8.0);
    let mut lineages = common::sphere_lineages(4, 3);
    let base = snapshot_of_tips(&lineages).expect("live tips");
    // Weights for only three of the four live trajectories.
    let field = ImportanceField::uniform(vec![0, 1, 2]);
    let err = extrapolate_step(
        &mut lineages,
        &base,
        &ExtrapolationPlan::default(),
        &geo,
        &app,
        &SelectionWeights::Field(&field),
    );
    assert!(err.is_err(), "a partial weight field must be rejected");
}

#[test]
fn trained_appearance_reconstruction_beats_a_tenth_of_target_variance() {
    let lineages = common::sphere_lineages(64, 6);
    let importance = vec![1.0; lineages.len()];
    let mut model = StreamVae::new(Stream::Appearance, ModelConfig::tiny(), 3).expect("valid");
    let mut cfg = TrainConfig::for_stream(Stream::Appearance, 1200, 42);
    cfg.lr = 2e-3;
    let report = resplat_model::train(&mut model, &lineages, &importance, &cfg).expect("trains");
    assert!(report.diverged_at.is_none());

    // Posterior-mean reconstruction of the held-in batch.
    let batch = tensorize(&lineages, 6, &importance).expect("valid batch");
    let mut tape = resplat_autodiff::Tape::inference();
    let bound = model.params.bind(&mut tape);
    let (mu, _) = model.encode(&mut tape, &bound, &batch).expect("encodes");
    let decoded = model.decode(&mut tape, &bound, &batch, mu).expect("decodes");
    let pred = tape.value(decoded.output).data().to_vec();
    let tgt = batch.target_appearance.data();

    let b = batch.batch();
    let dim = Stream::Appearance.feature_dim();
    // Fit error and variance over the reconstruction channels (rgb, opacity,
    // exist), both averaged the same way.
    let channels: Vec<usize> = (45..50).collect();
    let mut mse = 0.0;
    for bi in 0..b {
        for &d in &channels {
            let diff = pred[bi * dim + d] - tgt[bi * dim + d];
            mse += diff * diff;
        }
    }
    mse /= (b * channels.len()) as f64;

    let mut variance = 0.0;
    for &d in &channels {
        let mean: f64 = (0..b).map(|bi| tgt[bi * dim + d]).sum::<f64>() / b as f64;
        variance +=
            (0..b).map(|bi| (tgt[bi * dim + d] - mean).powi(2)).sum::<f64>() / b as f64;
    }
    variance /= channels.len() as f64;

    assert!(
        mse < 0.1 * variance,
        "reconstruction error {mse:e} must undercut 10% of target variance {variance:e}"
    );
}
