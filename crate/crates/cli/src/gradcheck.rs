//! Gradient verification: every differentiable primitive checked against
//! central differences, plus a full-objective sweep over all model parameters.

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resplat_autodiff::{grad_check, Tape, Tensor, Var};
use resplat_core::GaussianRecord;
use resplat_data::{tensorize, Lineage};
use resplat_model::{seeded_noise, total_loss, LossWeights, ModelConfig, Stream, StreamVae};

/// Pass threshold for a single primitive's worst relative gradient error.
pub const OPS_TOL: f64 = 1e-6;
/// Pass threshold for the full objective's worst relative gradient error.
pub const LOSS_TOL: f64 = 1e-4;

/// Result of checking one primitive.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel: f64,
}

/// Result of the full-objective parameter sweep.
#[derive(Debug, Clone)]
pub struct LossCheck {
    pub worst_rel: f64,
    pub checked: usize,
}

fn rand_tensor(seed: u64, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

fn check_one(
    name: &'static str,
    x: Tensor,
    build: impl Fn(&mut Tape, Var) -> Var,
) -> Result<OpCheck> {
    let max_rel = grad_check(build, &x, 1e-4).with_context(|| format!("checking {name}"))?;
    Ok(OpCheck { name, max_rel })
}

/// Run the per-primitive gradient checks. Each check feeds a seeded random
/// input through one primitive (scalarized by a fixed weighting) and compares
/// reverse-mode gradients with central differences.
pub fn check_ops(seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    let s = |i: u64| seed.wrapping_mul(1000).wrapping_add(i);

    out.push(check_one("add", rand_tensor(s(0), vec![8], -2.0, 2.0), |t, v| {
        let a = t.slice(v, 0, 0, 4);
        let b = t.slice(v, 0, 4, 4);
        let c = t.add(a, b);
        let sq = t.mul(c, c);
        t.sum(sq)
    })?);
    out.push(check_one("sub", rand_tensor(s(1), vec![8], -2.0, 2.0), |t, v| {
        let a = t.slice(v, 0, 0, 4);
        let b = t.slice(v, 0, 4, 4);
        let c = t.sub(a, b);
        let sq = t.mul(c, c);
        t.sum(sq)
    })?);
    out.push(check_one("mul", rand_tensor(s(2), vec![8], -2.0, 2.0), |t, v| {
        let a = t.slice(v, 0, 0, 4);
        let b = t.slice(v, 0, 4, 4);
        let c = t.mul(a, b);
        t.sum(c)
    })?);
    out.push(check_one("neg", rand_tensor(s(3), vec![6], -2.0, 2.0), |t, v| {
        let n = t.neg(v);
        let sq = t.mul(n, v);
        t.sum(sq)
    })?);
    out.push(check_one("scale", rand_tensor(s(4), vec![6], -2.0, 2.0), |t, v| {
        let c = t.scale(v, 1.7);
        let sq = t.mul(c, c);
        t.sum(sq)
    })?);
    out.push(check_one("add_scalar", rand_tensor(s(5), vec![6], -2.0, 2.0), |t, v| {
        let c = t.add_scalar(v, 0.7);
        let sq = t.mul(c, c);
        t.sum(sq)
    })?);
    out.push(check_one("gelu", rand_tensor(s(6), vec![8], -2.0, 2.0), |t, v| {
        let g = t.gelu(v);
        t.sum(g)
    })?);
    out.push(check_one("sigmoid", rand_tensor(s(7), vec![8], -3.0, 3.0), |t, v| {
        let g = t.sigmoid(v);
        t.sum(g)
    })?);
    out.push(check_one("tanh", rand_tensor(s(8), vec![8], -2.0, 2.0), |t, v| {
        let g = t.tanh(v);
        t.sum(g)
    })?);
    out.push(check_one("exp", rand_tensor(s(9), vec![8], -1.0, 1.0), |t, v| {
        let g = t.exp(v);
        t.sum(g)
    })?);
    out.push(check_one("log", rand_tensor(s(10), vec![8], 0.5, 2.5), |t, v| {
        let g = t.log(v);
        t.sum(g)
    })?);
    // Fixed clamp input: every point sits well clear of the bounds, so the
    // central difference never straddles a kink.
    out.push(check_one(
        "clamp",
        Tensor::new(vec![6], vec![-2.5, -0.7, 0.3, 1.8, 0.9, -1.6]),
        |t, v| {
            let c = t.clamp(v, -1.0, 1.0);
            let sq = t.mul(c, c);
            t.sum(sq)
        },
    )?);
    out.push(check_one("matmul_lhs", rand_tensor(s(11), vec![3, 4], -1.0, 1.0), |t, v| {
        let w = t.leaf(rand_tensor(900, vec![4, 2], -1.0, 1.0));
        let p = t.matmul(v, w);
        t.sum(p)
    })?);
    out.push(check_one("matmul_rhs", rand_tensor(s(12), vec![4, 2], -1.0, 1.0), |t, v| {
        let a = t.leaf(rand_tensor(901, vec![3, 4], -1.0, 1.0));
        let p = t.matmul(a, v);
        t.sum(p)
    })?);
    out.push(check_one("bmm_lhs", rand_tensor(s(13), vec![2, 3, 4], -1.0, 1.0), |t, v| {
        let w = t.leaf(rand_tensor(902, vec![2, 4, 2], -1.0, 1.0));
        let p = t.bmm(v, w, false);
        t.sum(p)
    })?);
    out.push(check_one("bmm_rhs_t", rand_tensor(s(14), vec![2, 5, 4], -1.0, 1.0), |t, v| {
        let a = t.leaf(rand_tensor(903, vec![2, 3, 4], -1.0, 1.0));
        let p = t.bmm(a, v, true);
        t.sum(p)
    })?);
    out.push(check_one("add_bias", rand_tensor(s(15), vec![5], -1.0, 1.0), |t, v| {
        let x = t.leaf(rand_tensor(904, vec![3, 5], -1.0, 1.0));
        let y = t.add_bias(x, v);
        let sq = t.mul(y, y);
        t.sum(sq)
    })?);
    // A plain sum of softmax outputs is constant, so weight the entries.
    out.push(check_one("softmax", rand_tensor(s(16), vec![3, 5], -2.0, 2.0), |t, v| {
        let sm = t.softmax(v);
        let w = t.leaf(rand_tensor(905, vec![3, 5], 0.2, 2.0));
        let p = t.mul(sm, w);
        t.sum(p)
    })?);
    // Distinct gains: with a uniform gain the sum of a normalized row is
    // constant and the check would compare roundoff noise.
    out.push(check_one("layer_norm_x", rand_tensor(s(17), vec![3, 6], -1.0, 1.0), |t, v| {
        let gamma = t.leaf(Tensor::new(vec![6], vec![1.3, 0.7, 1.1, -0.4, 1.9, 0.2]));
        let beta = t.leaf(Tensor::full(vec![6], -0.2));
        let ln = t.layer_norm(v, gamma, beta, 1e-5);
        t.sum(ln)
    })?);
    out.push(check_one("layer_norm_gamma", rand_tensor(s(18), vec![6], 0.3, 1.7), |t, v| {
        let x = t.leaf(rand_tensor(906, vec![3, 6], -1.0, 1.0));
        let beta = t.leaf(Tensor::full(vec![6], 0.1));
        let ln = t.layer_norm(x, v, beta, 1e-5);
        let sq = t.mul(ln, ln);
        t.sum(sq)
    })?);
    out.push(check_one("sum", rand_tensor(s(19), vec![7], -2.0, 2.0), |t, v| t.sum(v))?);
    out.push(check_one("mean", rand_tensor(s(20), vec![9], -2.0, 2.0), |t, v| {
        t.mean(v)
    })?);
    out.push(check_one("sum_axis", rand_tensor(s(21), vec![3, 4], -1.0, 1.0), |t, v| {
        let rows = t.sum_axis(v, 1);
        let w = t.leaf(Tensor::new(vec![3], vec![0.5, -1.5, 2.0]));
        let p = t.mul(rows, w);
        t.sum(p)
    })?);
    out.push(check_one("slice_concat", rand_tensor(s(22), vec![2, 6], -1.0, 1.0), |t, v| {
        let a = t.slice(v, 1, 0, 2);
        let b = t.slice(v, 1, 2, 4);
        let c = t.concat(b, a, 1);
        let w = t.leaf(rand_tensor(907, vec![2, 6], 0.2, 2.0));
        let p = t.mul(c, w);
        t.sum(p)
    })?);
    out.push(check_one("transpose2d", rand_tensor(s(23), vec![3, 4], -1.0, 1.0), |t, v| {
        let tr = t.transpose2d(v);
        let w = t.leaf(rand_tensor(908, vec![4, 3], 0.2, 2.0));
        let p = t.mul(tr, w);
        t.sum(p)
    })?);
    out.push(check_one("reshape", rand_tensor(s(24), vec![2, 6], -1.0, 1.0), |t, v| {
        let r = t.reshape(v, vec![3, 4]);
        let w = t.leaf(rand_tensor(909, vec![3, 4], 0.2, 2.0));
        let p = t.mul(r, w);
        t.sum(p)
    })?);
    out.push(check_one("gather_rows", rand_tensor(s(25), vec![5, 3], -1.0, 1.0), |t, v| {
        // Repeated index 2 exercises gradient accumulation into one row.
        let g = t.gather_rows(v, &[0, 2, 2, 4]);
        let w = t.leaf(rand_tensor(910, vec![4, 3], 0.2, 2.0));
        let p = t.mul(g, w);
        t.sum(p)
    })?);
    out.push(check_one("gather_time", rand_tensor(s(26), vec![2, 4, 3], -1.0, 1.0), |t, v| {
        let g = t.gather_time(v, &[1, 3]);
        let w = t.leaf(rand_tensor(911, vec![2, 3], 0.2, 2.0));
        let p = t.mul(g, w);
        t.sum(p)
    })?);
    out.push(check_one("repeat_time", rand_tensor(s(27), vec![2, 3], -1.0, 1.0), |t, v| {
        let r = t.repeat_time(v, 4);
        let w = t.leaf(rand_tensor(912, vec![2, 4, 3], 0.2, 2.0));
        let p = t.mul(r, w);
        t.sum(p)
    })?);

    Ok(out)
}

/// Add seeded uniform noise to every flow parameter so the prior path of the
/// objective carries real gradients.
pub fn perturb_flow(model: &mut StreamVae, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model
        .params
        .names()
        .iter()
        .filter(|n| n.starts_with("flow."))
        .cloned()
        .collect();
    for name in names {
        for v in model.params.tensor_mut(&name).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn varied_lineage(id: u32, len: usize) -> Lineage {
    let states = (0..len)
        .map(|s| {
            let mut rec = GaussianRecord::zeroed(id);
            rec.position = [
                0.3 * s as f32 - 0.1 * id as f32,
                0.2 * id as f32,
                0.1 + 0.05 * s as f32,
            ];
            rec.rotation =
                resplat_core::normalize_quaternion([1.0, 0.1 * id as f32, 0.05 * s as f32, 0.0]);
            rec.log_scale = [-1.0 - 0.1 * id as f32, -1.0, -1.0 + 0.02 * s as f32];
            rec.opacity = 0.2 * s as f32 - 0.1 * id as f32;
            rec.color = [0.1 * id as f32, 0.5, 1.0 - 0.05 * id as f32];
            for k in 0..6 {
                rec.sh_rest[k] = 0.01 * (id as f32 + 1.0) * (k as f32 + 1.0);
            }
            (s, rec)
        })
        .collect();
    Lineage { id, parent: None, birth_step: 0, states, dead: false }
}

/// Check the full training objective's reverse-mode gradients against central
/// finite differences over every model parameter, with frozen sampling noise.
/// Coordinates whose analytic and numeric gradients are both below the
/// roundoff floor are skipped.
pub fn check_loss(seed: u64) -> Result<LossCheck> {
    let mut model = StreamVae::new(Stream::Geometry, ModelConfig::tiny(), seed)
        .context("building the check model")?;
    perturb_flow(&mut model, 0.1, seed.wrapping_add(1));

    let lins = vec![varied_lineage(0, 3), varied_lineage(1, 4)];
    let batch = tensorize(&lins, 4, &[1.0, 1.0]).context("building the check batch")?;
    let eps = seeded_noise(2, model.cfg.latent_dim, seed.wrapping_add(2));
    let weights = LossWeights { kl: 0.5, mse: 1.0, chamfer: 0.5, aux_sh: 0.1 };
    let beta = 0.7;

    let loss_value = |model: &StreamVae| -> Result<f64> {
        let mut tape = Tape::inference();
        let bound = model.params.bind(&mut tape);
        let (total, _) = total_loss(&mut tape, model, &bound, &batch, &weights, beta, &eps, false)?;
        Ok(tape.value(total).item())
    };

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (total, _) = total_loss(&mut tape, &model, &bound, &batch, &weights, beta, &eps, false)
        .context("evaluating the objective")?;
    tape.backward(total);
    let grads = bound.collect_grads(&tape);
    drop(tape);

    let h = 1e-5;
    // Below this magnitude the central difference quotient is roundoff noise.
    let floor = 3e-6;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for ti in 0..model.params.tensors().len() {
        let len = model.params.tensors()[ti].data().len();
        for k in 0..len {
            let ad = grads[ti].as_ref().map_or(0.0, |g| g.data()[k]);
            let orig = model.params.tensors()[ti].data()[k];
            model.params.tensors_mut()[ti].data_mut()[k] = orig + h;
            let plus = loss_value(&model)?;
            model.params.tensors_mut()[ti].data_mut()[k] = orig - h;
            let minus = loss_value(&model)?;
            model.params.tensors_mut()[ti].data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);

            let mag = ad.abs().max(fd.abs());
            if mag < floor {
                continue;
            }
            checked += 1;
            worst = worst.max((ad - fd).abs() / mag);
        }
    }
    Ok(LossCheck { worst_rel: worst, checked })
}
