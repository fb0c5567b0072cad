//! Affine-coupling transform between the standard normal base and the latent
//! prior. Couplings alternate which half conditions which, the conditioner
//! output layer starts at zero so the transform begins as the identity, and
//! the log-determinant is the sum of the per-coupling log-scales by
//! construction.

use rand_chacha::ChaCha8Rng;
use resplat_autodiff::{Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::params::{linear_init, Bound, ParamStore};

/// Register the coupling conditioner parameters. The final linear layer is
/// zero so a fresh prior is exactly the identity map.
pub fn init_flow_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let half = cfg.latent_dim / 2;
    for c in 0..cfg.flow_layers {
        store.add(&format!("flow.c{c}.w1"), linear_init(rng, half, cfg.flow_hidden));
        store.add(&format!("flow.c{c}.b1"), Tensor::zeros(vec![cfg.flow_hidden]));
        store.add(&format!("flow.c{c}.w2"), Tensor::zeros(vec![cfg.flow_hidden, cfg.latent_dim]));
        store.add(&format!("flow.c{c}.b2"), Tensor::zeros(vec![cfg.latent_dim]));
    }
}

/// Scale and shift produced by coupling `c` from its passive half.
fn conditioner(tape: &mut Tape, bound: &Bound, c: usize, passive: Var, half: usize) -> (Var, Var) {
    let w1 = bound.get(&format!("flow.c{c}.w1"));
    let b1 = bound.get(&format!("flow.c{c}.b1"));
    let w2 = bound.get(&format!("flow.c{c}.w2"));
    let b2 = bound.get(&format!("flow.c{c}.b2"));
    let h = tape.matmul(passive, w1);
    let h = tape.add_bias(h, b1);
    let h = tape.gelu(h);
    let st = tape.matmul(h, w2);
    let st = tape.add_bias(st, b2);
    let s = tape.slice(st, 1, 0, half);
    let t = tape.slice(st, 1, half, half);
    (s, t)
}

/// Which latent half coupling `c` leaves untouched.
fn passive_start(c: usize, half: usize) -> usize {
    if c % 2 == 0 {
        0
    } else {
        half
    }
}

/// Map base noise to the prior: returns the transformed sample `[B, latent]`
/// and the per-row log-determinant `[B]` of the forward Jacobian.
pub fn flow_forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    eps: Var,
) -> Result<(Var, Var), ModelError> {
    let half = cfg.latent_dim / 2;
    let b = tape.value(eps).shape()[0];
    let mut x = eps;
    let mut logdet = tape.constant(Tensor::zeros(vec![b]));
    for c in 0..cfg.flow_layers {
        let p_start = passive_start(c, half);
        let a_start = half - p_start;
        let passive = tape.slice(x, 1, p_start, half);
        let active = tape.slice(x, 1, a_start, half);
        let (s, t) = conditioner(tape, bound, c, passive, half);
        let scaled = tape.exp(s);
        let scaled = tape.mul(active, scaled);
        let new_active = tape.add(scaled, t);
        x = if p_start == 0 {
            tape.concat(passive, new_active, 1)
        } else {
            tape.concat(new_active, passive, 1)
        };
        let ld = tape.sum_axis(s, 1);
        logdet = tape.add(logdet, ld);
    }
    if !tape.value(x).is_finite() || !tape.value(logdet).is_finite() {
        return Err(ModelError::NonFinite("flow forward".into()));
    }
    Ok((x, logdet))
}

/// Invert the flow: returns the base-space point `[B, latent]` and the
/// per-row log-determinant `[B]` of the inverse Jacobian (the negated forward
/// one). Division-free: the inverse scale is `exp(-s)`.
pub fn flow_inverse(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    z: Var,
) -> Result<(Var, Var), ModelError> {
    let half = cfg.latent_dim / 2;
    let b = tape.value(z).shape()[0];
    let mut x = z;
    let mut logdet = tape.constant(Tensor::zeros(vec![b]));
    for c in (0..cfg.flow_layers).rev() {
        let p_start = passive_start(c, half);
        let a_start = half - p_start;
        let passive = tape.slice(x, 1, p_start, half);
        let active = tape.slice(x, 1, a_start, half);
        let (s, t) = conditioner(tape, bound, c, passive, half);
        let shifted = tape.sub(active, t);
        let neg_s = tape.neg(s);
        let inv_scale = tape.exp(neg_s);
        let new_active = tape.mul(shifted, inv_scale);
        x = if p_start == 0 {
            tape.concat(passive, new_active, 1)
        } else {
            tape.concat(new_active, passive, 1)
        };
        let ld = tape.sum_axis(s, 1);
        logdet = tape.sub(logdet, ld);
    }
    if !tape.value(x).is_finite() || !tape.value(logdet).is_finite() {
        return Err(ModelError::NonFinite("flow inverse".into()));
    }
    Ok((x, logdet))
}
