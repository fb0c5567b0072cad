//! Training objective: cyclically annealed KL against the flow prior,
//! per-sample reconstruction errors with per-sequence importance weights, and
//! a batch-level squared-distance set loss on predicted positions with
//! correspondences frozen per step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resplat_autodiff::{stable_sum, Tape, Tensor, Var};
use resplat_data::LineageBatch;

use crate::config::{ModelConfig, Stream};
use crate::error::ModelError;
use crate::flow::flow_inverse;
use crate::params::Bound;
use crate::vae::{noise_tensor, LatentCode, StreamVae};

const LN_2PI: f64 = 1.8378770664093453;

/// Scalar weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Base KL weight, modulated by the annealing schedule.
    pub kl: f64,
    /// Reconstruction (mean squared error) weight.
    pub mse: f64,
    /// Position set-distance weight.
    pub chamfer: f64,
    /// Auxiliary spherical-harmonic MSE weight inside the appearance term.
    pub aux_sh: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { kl: 1e-6, mse: 1.0, chamfer: 0.01, aux_sh: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.kl < 0.0 || self.mse < 0.0 || self.chamfer < 0.0 || self.aux_sh < 0.0 {
            return Err(ModelError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cyclic KL annealing: β ramps linearly by α per step and restarts every
/// `ramp` steps, capped at 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnnealSchedule {
    /// Per-step increment.
    pub alpha: f64,
    /// Cycle length in steps.
    pub ramp: usize,
    /// Alternate reading of the schedule: wrap α·t by `ramp` before capping.
    pub alt_precedence: bool,
}

impl AnnealSchedule {
    pub fn new(alpha: f64, ramp: usize) -> Self {
        AnnealSchedule { alpha, ramp, alt_precedence: false }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.alpha > 0.0) || self.ramp == 0 {
            return Err(ModelError::Config(
                "annealing needs a positive increment and cycle length".into(),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        if self.alt_precedence {
            (self.alpha * t as f64).rem_euclid(self.ramp as f64).min(1.0)
        } else {
            (self.alpha * (t % self.ramp) as f64).min(1.0)
        }
    }
}

/// Weighted batch mean of per-row sums: `(1/B) Σ_b w_b Σ_k rows[b,k]`.
fn weighted_row_mean(tape: &mut Tape, rows: Var, weights: &[f64]) -> Var {
    let b = tape.value(rows).shape()[0];
    assert_eq!(weights.len(), b, "one weight per sequence");
    let per_row = tape.sum_axis(rows, 1);
    let w = tape.constant(Tensor::new(vec![b], weights.to_vec()));
    let weighted = tape.mul(per_row, w);
    let total = tape.sum(weighted);
    tape.scale(total, 1.0 / b as f64)
}

fn check_pred_target(
    tape: &Tape,
    pred: Var,
    target: &Tensor,
    dim: usize,
) -> Result<usize, ModelError> {
    let shape = tape.value(pred).shape();
    if shape.len() != 2 || shape[1] != dim {
        return Err(ModelError::Config(format!("prediction shape {shape:?}, expected [B,{dim}]")));
    }
    if target.shape() != shape {
        return Err(ModelError::Config(format!(
            "target shape {:?} does not match prediction {shape:?}",
            target.shape()
        )));
    }
    Ok(shape[0])
}

/// Appearance reconstruction: per-sample squared error summed over the rgb,
/// opacity, and exist entries (batch mean), plus a separate auxiliary term
/// over the 45 spherical-harmonic entries.
pub fn appearance_mse(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    weights: &[f64],
) -> Result<(Var, Var), ModelError> {
    check_pred_target(tape, pred, target, Stream::Appearance.feature_dim())?;
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t);
    let sq = tape.mul(diff, diff);
    let main_cols = tape.slice(sq, 1, 45, 5);
    let main = weighted_row_mean(tape, main_cols, weights);
    let sh_cols = tape.slice(sq, 1, 0, 45);
    let aux = weighted_row_mean(tape, sh_cols, weights);
    Ok((main, aux))
}

/// Geometry reconstruction: per-sample squared error summed over rotation,
/// log-scale, and exist (batch mean). Position is supervised by the set loss.
pub fn geometry_mse(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    weights: &[f64],
) -> Result<Var, ModelError> {
    check_pred_target(tape, pred, target, Stream::Geometry.feature_dim())?;
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t);
    let sq = tape.mul(diff, diff);
    let tail = tape.slice(sq, 1, 3, 8);
    Ok(weighted_row_mean(tape, tail, weights))
}

/// Nearest-neighbor index in `points` for each query, first index winning
/// ties so correspondences are deterministic.
fn nearest_indices(queries: &[f64], points: &[f64]) -> Vec<usize> {
    let n = queries.len() / 3;
    let m = points.len() / 3;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let q = &queries[i * 3..i * 3 + 3];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..m {
            let p = &points[j * 3..j * 3 + 3];
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Symmetric sum of weighted squared nearest-neighbor distances between the
/// predicted and target point sets. Correspondences are computed from current
/// values and treated as constants, so gradients flow to the predicted
/// positions through fixed pairings.
pub fn chamfer_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    pred_weights: &[f64],
    target_weights: &[f64],
) -> Result<Var, ModelError> {
    let pshape = tape.value(pred).shape().to_vec();
    if pshape.len() != 2 || pshape[1] != 3 {
        return Err(ModelError::Config(format!("point set shape {pshape:?}, expected [N,3]")));
    }
    if target.shape().len() != 2 || target.shape()[1] != 3 {
        return Err(ModelError::Config(format!(
            "point set shape {:?}, expected [M,3]",
            target.shape()
        )));
    }
    let (n, m) = (pshape[0], target.shape()[0]);
    if n == 0 || m == 0 {
        return Err(ModelError::Config("set distance of an empty point set".into()));
    }
    if pred_weights.len() != n || target_weights.len() != m {
        return Err(ModelError::Config("one weight per point required".into()));
    }

    let pvals = tape.value(pred).data().to_vec();
    let tvals = target.data();
    let fwd = nearest_indices(&pvals, tvals);
    let bwd = nearest_indices(tvals, &pvals);

    // Predicted -> target: each prediction against its matched target row.
    let mut matched = vec![0.0; n * 3];
    for (i, &j) in fwd.iter().enumerate() {
        matched[i * 3..i * 3 + 3].copy_from_slice(&tvals[j * 3..j * 3 + 3]);
    }
    let matched = tape.constant(Tensor::new(vec![n, 3], matched));
    let diff = tape.sub(pred, matched);
    let sq = tape.mul(diff, diff);
    let rows = tape.sum_axis(sq, 1);
    let w = tape.constant(Tensor::new(vec![n], pred_weights.to_vec()));
    let weighted = tape.mul(rows, w);
    let s_fwd = tape.sum(weighted);

    // Target -> predicted: gather the matched predictions so gradients reach
    // them through this direction as well.
    let gathered = tape.gather_rows(pred, &bwd);
    let tconst = tape.constant(target.clone());
    let diff = tape.sub(gathered, tconst);
    let sq = tape.mul(diff, diff);
    let rows = tape.sum_axis(sq, 1);
    let w = tape.constant(Tensor::new(vec![m], target_weights.to_vec()));
    let weighted = tape.mul(rows, w);
    let s_bwd = tape.sum(weighted);

    Ok(tape.add(s_fwd, s_bwd))
}

/// Closed-form KL of the diagonal Gaussian posterior against a standard
/// normal, meaned over the batch. Valid while the flow prior is identity.
pub fn closed_form_kl(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let mu2 = tape.mul(mu, mu);
    let ev = tape.exp(logvar);
    let sum_terms = tape.add(mu2, ev);
    let lv1 = tape.add_scalar(logvar, 1.0);
    let inner = tape.sub(sum_terms, lv1);
    let rows = tape.sum_axis(inner, 1);
    let mean = tape.mean(rows);
    tape.scale(mean, 0.5)
}

/// Single-sample Monte-Carlo KL against the flow prior:
/// `log q(z|x) - log p(z)` with the same reparameterized draw the decoder
/// consumes. `eps` must be the noise that produced `code.z`.
pub fn mc_kl(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    code: &LatentCode,
    eps: &Tensor,
) -> Result<Var, ModelError> {
    let shape = tape.value(code.mu).shape().to_vec();
    let (b, l) = (shape[0], shape[1]);
    assert_eq!(eps.shape(), &[b, l], "noise shape must match the posterior");

    // log q(z|x) with z - mu substituted by sigma * eps, leaving the noise a
    // constant: -0.5 * (L ln 2pi + sum logvar + sum eps^2).
    let sum_lv = tape.sum_axis(code.logvar, 1);
    let half_lv = tape.scale(sum_lv, -0.5);
    let mut consts = vec![0.0; b];
    for bi in 0..b {
        let e = &eps.data()[bi * l..(bi + 1) * l];
        let sq: f64 = stable_sum(&e.iter().map(|v| v * v).collect::<Vec<_>>());
        consts[bi] = -0.5 * (l as f64 * LN_2PI + sq);
    }
    let consts = tape.constant(Tensor::new(vec![b], consts));
    let log_q = tape.add(half_lv, consts);

    // log p(z) through the inverse flow.
    let (u, logdet_inv) = flow_inverse(tape, bound, cfg, code.z)?;
    let uu = tape.mul(u, u);
    let su = tape.sum_axis(uu, 1);
    let half_u = tape.scale(su, -0.5);
    let log_n = tape.add_scalar(half_u, -0.5 * l as f64 * LN_2PI);
    let log_p = tape.add(log_n, logdet_inv);

    let rows = tape.sub(log_q, log_p);
    let kl = tape.mean(rows);
    if !tape.value(kl).is_finite() {
        return Err(ModelError::NonFinite("Monte-Carlo KL".into()));
    }
    Ok(kl)
}

/// KL divergence estimate for the current posterior: closed form while the
/// flow is frozen at identity, Monte-Carlo through the flow otherwise.
pub fn kl_divergence(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    code: &LatentCode,
    eps: &Tensor,
    flow_frozen: bool,
) -> Result<Var, ModelError> {
    let kl = if flow_frozen {
        closed_form_kl(tape, code.mu, code.logvar)
    } else {
        mc_kl(tape, bound, cfg, code, eps)?
    };
    if !tape.value(kl).is_finite() {
        return Err(ModelError::NonFinite("KL divergence".into()));
    }
    Ok(kl)
}

/// Annealed KL term: `beta(t) * kl_divergence`.
pub fn kl_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    code: &LatentCode,
    eps: &Tensor,
    schedule: &AnnealSchedule,
    t: usize,
    flow_frozen: bool,
) -> Result<Var, ModelError> {
    let raw = kl_divergence(tape, bound, cfg, code, eps, flow_frozen)?;
    Ok(tape.scale(raw, schedule.beta(t)))
}

/// Numeric Monte-Carlo estimate of `KL(q || p)` for one posterior against the
/// stored flow prior: returns the sample mean and its standard error.
pub fn mc_kl_numeric(
    model: &StreamVae,
    mu: &[f64],
    logvar: &[f64],
    samples: usize,
    seed: u64,
) -> (f64, f64) {
    let l = model.cfg.latent_dim;
    assert_eq!(mu.len(), l, "posterior width mismatch");
    assert_eq!(logvar.len(), l, "posterior width mismatch");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(samples);
    let chunk = 8192usize;
    let mut done = 0;
    while done < samples {
        let n = chunk.min(samples - done);
        let eps = noise_tensor(n, l, &mut rng);
        let mut z = vec![0.0; n * l];
        let mut log_q = vec![0.0; n];
        for r in 0..n {
            let mut acc = 0.0;
            for d in 0..l {
                let e = eps.data()[r * l + d];
                z[r * l + d] = mu[d] + (0.5 * logvar[d]).exp() * e;
                acc += LN_2PI + logvar[d] + e * e;
            }
            log_q[r] = -0.5 * acc;
        }
        let mut tape = Tape::inference();
        let bound = model.params.bind(&mut tape);
        let zv = tape.constant(Tensor::new(vec![n, l], z));
        let (u, logdet_inv) =
            flow_inverse(&mut tape, &bound, &model.cfg, zv).expect("finite flow");
        let u = tape.value(u).data();
        let logdet_inv = tape.value(logdet_inv).data();
        for r in 0..n {
            let su: f64 = u[r * l..(r + 1) * l].iter().map(|v| v * v).sum();
            let log_p = -0.5 * (l as f64 * LN_2PI + su) + logdet_inv[r];
            values.push(log_q[r] - log_p);
        }
        done += n;
    }
    let mean = stable_sum(&values) / samples as f64;
    let var = stable_sum(&values.iter().map(|v| (v - mean) * (v - mean)).collect::<Vec<_>>())
        / (samples as f64 - 1.0);
    (mean, (var / samples as f64).sqrt())
}

/// Scalar readings of one step's loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub kl: f64,
    pub mse: f64,
    pub chamfer: f64,
    pub beta: f64,
    pub total: f64,
}

/// Target positions `[B,3]` extracted from a batch's geometry targets.
pub fn target_positions(batch: &LineageBatch) -> Tensor {
    let b = batch.batch();
    let dim = Stream::Geometry.feature_dim();
    let mut out = vec![0.0; b * 3];
    for bi in 0..b {
        let src = bi * dim;
        out[bi * 3..(bi + 1) * 3]
            .copy_from_slice(&batch.target_geometry.data()[src..src + 3]);
    }
    Tensor::new(vec![b, 3], out)
}

/// Assemble the full objective for one batch:
/// `λ_kl·β·KL + λ_mse·MSE + λ_chamfer·SetDistance`, with reconstruction terms
/// weighted per sequence. The set-distance term applies to the geometry
/// stream, which is the only one predicting positions.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    model: &StreamVae,
    bound: &Bound,
    batch: &LineageBatch,
    weights: &LossWeights,
    beta: f64,
    eps: &Tensor,
    flow_frozen: bool,
) -> Result<(Var, LossParts), ModelError> {
    weights.validate()?;
    let code = model.encode_sample(tape, bound, batch, eps)?;
    let decoded = model.decode(tape, bound, batch, code.z)?;
    let kl_raw = kl_divergence(tape, bound, &model.cfg, &code, eps, flow_frozen)?;

    let w = &batch.hessian_weight;
    let (mse, chamfer) = match model.stream {
        Stream::Geometry => {
            let mse = geometry_mse(tape, decoded.output, &batch.target_geometry, w)?;
            let positions = decoded.positions.expect("geometry stream predicts positions");
            let targets = target_positions(batch);
            let ch = chamfer_loss(tape, positions, &targets, w, w)?;
            (mse, Some(ch))
        }
        Stream::Appearance => {
            let (main, aux) = appearance_mse(tape, decoded.output, &batch.target_appearance, w)?;
            let aux_scaled = tape.scale(aux, weights.aux_sh);
            (tape.add(main, aux_scaled), None)
        }
    };

    let kl_term = tape.scale(kl_raw, weights.kl * beta);
    let mse_term = tape.scale(mse, weights.mse);
    let mut total = tape.add(kl_term, mse_term);
    let mut chamfer_value = 0.0;
    if let Some(ch) = chamfer {
        chamfer_value = tape.value(ch).item();
        let ch_term = tape.scale(ch, weights.chamfer);
        total = tape.add(total, ch_term);
    }

    let parts = LossParts {
        kl: tape.value(kl_raw).item(),
        mse: tape.value(mse).item(),
        chamfer: chamfer_value,
        beta,
        total: tape.value(total).item(),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_is_zero_at_the_origin() {
        let s = AnnealSchedule::new(0.002, 1000);
        assert_eq!(s.beta(0), 0.0);
    }

    #[test]
    fn beta_ramps_linearly_before_the_cap() {
        let s = AnnealSchedule::new(0.002, 1000);
        assert!((s.beta(400) - 0.8).abs() < 1e-12, "0.002 * 400 = 0.8");
    }

    #[test]
    fn beta_restarts_each_cycle() {
        let s = AnnealSchedule::new(0.002, 1000);
        assert!((s.beta(1400) - 0.8).abs() < 1e-12, "cycle restarts at t = 1000");
        for t in 0..10_000 {
            assert_eq!(s.beta(t + s.ramp), s.beta(t), "period {} violated at t={t}", s.ramp);
            assert!((0.0..=1.0).contains(&s.beta(t)), "beta out of range at t={t}");
        }
    }

    #[test]
    fn beta_caps_at_one_late_in_a_cycle() {
        let s = AnnealSchedule::new(0.002, 1000);
        assert_eq!(s.beta(700), 1.0, "0.002 * 700 caps at 1");
    }

    #[test]
    fn alternate_precedence_wraps_the_product() {
        let s = AnnealSchedule { alpha: 0.002, ramp: 1000, alt_precedence: true };
        // 0.002 * 400 = 0.8 is far below the wrap length, so only the cap acts.
        assert!((s.beta(400) - 0.8).abs() < 1e-12);
        // 0.002 * 600_000 = 1200 wraps to 200, then caps at 1.
        assert_eq!(s.beta(600_000), 1.0);
    }

    fn const_pred(tape: &mut Tape, rows: usize, dim: usize, data: Vec<f64>) -> Var {
        tape.constant(Tensor::new(vec![rows, dim], data))
    }

    #[test]
    fn appearance_error_is_zero_for_a_perfect_prediction() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..50).map(|i| i as f64 * 0.01).collect();
        let pred = const_pred(&mut tape, 1, 50, data.clone());
        let target = Tensor::new(vec![1, 50], data);
        let (main, aux) = appearance_mse(&mut tape, pred, &target, &[1.0]).expect("shapes");
        assert_eq!(tape.value(main).item(), 0.0);
        assert_eq!(tape.value(aux).item(), 0.0);
    }

    #[test]
    fn unit_color_error_costs_one() {
        let mut tape = Tape::new();
        let mut pred_data = vec![0.0; 50];
        pred_data[45] = 1.0; // red channel off by exactly 1
        let pred = const_pred(&mut tape, 1, 50, pred_data);
        let target = Tensor::new(vec![1, 50], vec![0.0; 50]);
        let (main, _) = appearance_mse(&mut tape, pred, &target, &[1.0]).expect("shapes");
        assert_eq!(tape.value(main).item(), 1.0);
    }

    #[test]
    fn half_opacity_error_costs_a_quarter() {
        let mut tape = Tape::new();
        let mut pred_data = vec![0.0; 50];
        pred_data[48] = 0.5; // opacity logit off by 0.5
        let pred = const_pred(&mut tape, 1, 50, pred_data);
        let target = Tensor::new(vec![1, 50], vec![0.0; 50]);
        let (main, _) = appearance_mse(&mut tape, pred, &target, &[1.0]).expect("shapes");
        assert_eq!(tape.value(main).item(), 0.25);
    }

    #[test]
    fn sh_errors_land_in_the_auxiliary_term_only() {
        let mut tape = Tape::new();
        let mut pred_data = vec![0.0; 50];
        pred_data[7] = 2.0; // a spherical-harmonic entry
        let pred = const_pred(&mut tape, 1, 50, pred_data);
        let target = Tensor::new(vec![1, 50], vec![0.0; 50]);
        let (main, aux) = appearance_mse(&mut tape, pred, &target, &[1.0]).expect("shapes");
        assert_eq!(tape.value(main).item(), 0.0);
        assert_eq!(tape.value(aux).item(), 4.0);
    }

    #[test]
    fn geometry_error_ignores_position_columns() {
        let mut tape = Tape::new();
        let mut pred_data = vec![0.0; 11];
        pred_data[0] = 5.0; // position: covered by the set loss instead
        pred_data[3] = 1.0; // rotation w: counted
        let pred = const_pred(&mut tape, 1, 11, pred_data);
        let target = Tensor::new(vec![1, 11], vec![0.0; 11]);
        let mse = geometry_mse(&mut tape, pred, &target, &[1.0]).expect("shapes");
        assert_eq!(tape.value(mse).item(), 1.0);
    }

    #[test]
    fn set_distance_is_zero_for_identical_sets() {
        let mut tape = Tape::new();
        let pts = vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        let pred = const_pred(&mut tape, 2, 3, pts.clone());
        let target = Tensor::new(vec![2, 3], pts);
        let d = chamfer_loss(&mut tape, pred, &target, &[1.0, 1.0], &[1.0, 1.0]).expect("valid");
        assert_eq!(tape.value(d).item(), 0.0);
    }

    #[test]
    fn set_distance_counts_both_directions() {
        let mut tape = Tape::new();
        let pred = const_pred(&mut tape, 1, 3, vec![0.0, 0.0, 0.0]);
        let target = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]);
        let d = chamfer_loss(&mut tape, pred, &target, &[1.0], &[1.0]).expect("valid");
        assert_eq!(tape.value(d).item(), 2.0, "1^2 forward plus 1^2 backward");
    }

    #[test]
    fn set_distance_sums_rather_than_averages() {
        let mut tape = Tape::new();
        let pred = const_pred(&mut tape, 2, 3, vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let target = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]);
        let d = chamfer_loss(&mut tape, pred, &target, &[1.0, 1.0], &[1.0]).expect("valid");
        assert_eq!(tape.value(d).item(), 3.0, "(1 + 1) forward plus 1 backward");
    }

    #[test]
    fn set_distance_rejects_empty_sets() {
        let mut tape = Tape::new();
        let pred = const_pred(&mut tape, 1, 3, vec![0.0; 3]);
        let empty = Tensor::new(vec![0, 3], vec![]);
        assert!(chamfer_loss(&mut tape, pred, &empty, &[1.0], &[]).is_err());
    }

    #[test]
    fn standard_posterior_has_zero_divergence() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(vec![2, 4]));
        let lv = tape.constant(Tensor::zeros(vec![2, 4]));
        let kl = closed_form_kl(&mut tape, mu, lv);
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn unit_mean_shift_costs_half_per_dimension() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::full(vec![1, 1], 1.0));
        let lv = tape.constant(Tensor::zeros(vec![1, 1]));
        let kl = closed_form_kl(&mut tape, mu, lv);
        assert_eq!(tape.value(kl).item(), 0.5);
    }
}
