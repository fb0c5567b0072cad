//! Transformer building blocks shared by the encoder and decoder: token
//! embedding with sinusoidal step encodings, pre-norm residual layers with
//! masked multi-head self-attention, and mask-aware mean pooling.
//!
//! Padding never reaches any output bit: padded key columns get an additive
//! -1e30 bias so softmax rounds them to exactly 0.0, the batched matmul skips
//! zero attention weights, and pooling multiplies padded rows by exactly 0.0.

use rand_chacha::ChaCha8Rng;
use resplat_autodiff::{positional_encoding, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::ModelError;
use crate::params::{linear_init, Bound, ParamStore};

const LN_EPS: f64 = 1e-5;
const MASK_BIAS: f64 = -1e30;

/// Register a dense layer (`{name}.w`, `{name}.b`).
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) {
    store.add(&format!("{name}.w"), linear_init(rng, rows, cols));
    store.add(&format!("{name}.b"), Tensor::zeros(vec![cols]));
}

/// Register a layer norm (`{name}.g`, `{name}.b`).
fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.add(&format!("{name}.g"), Tensor::full(vec![d], 1.0));
    store.add(&format!("{name}.b"), Tensor::zeros(vec![d]));
}

/// Register one transformer stack: token embedding, `layers` residual blocks,
/// and a final layer norm, all under `prefix`.
pub fn init_stack(
    store: &mut ParamStore,
    prefix: &str,
    input_dim: usize,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) {
    init_linear(store, &format!("{prefix}.embed"), input_dim, cfg.d_model, rng);
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        init_layer_norm(store, &format!("{p}.ln1"), cfg.d_model);
        init_linear(store, &format!("{p}.attn.q"), cfg.d_model, cfg.d_model, rng);
        init_linear(store, &format!("{p}.attn.k"), cfg.d_model, cfg.d_model, rng);
        init_linear(store, &format!("{p}.attn.v"), cfg.d_model, cfg.d_model, rng);
        init_linear(store, &format!("{p}.attn.o"), cfg.d_model, cfg.d_model, rng);
        init_layer_norm(store, &format!("{p}.ln2"), cfg.d_model);
        init_linear(store, &format!("{p}.ff.1"), cfg.d_model, cfg.ff_dim, rng);
        init_linear(store, &format!("{p}.ff.2"), cfg.ff_dim, cfg.d_model, rng);
    }
    init_layer_norm(store, &format!("{prefix}.final_ln"), cfg.d_model);
}

/// Apply a registered dense layer to a 2-D input.
pub fn linear(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Var {
    let w = bound.get(&format!("{name}.w"));
    let b = bound.get(&format!("{name}.b"));
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

fn layer_norm(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Var {
    let g = bound.get(&format!("{name}.g"));
    let b = bound.get(&format!("{name}.b"));
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Additive attention bias `[B,T,T]`: 0 where the key column is a real
/// timestep, -1e30 where it is padding.
pub fn attention_mask_bias(mask: &[bool], b: usize, t: usize) -> Tensor {
    assert_eq!(mask.len(), b * t, "mask length mismatch");
    let mut data = vec![0.0; b * t * t];
    for bi in 0..b {
        for j in 0..t {
            if !mask[bi * t + j] {
                for i in 0..t {
                    data[(bi * t + i) * t + j] = MASK_BIAS;
                }
            }
        }
    }
    Tensor::new(vec![b, t, t], data)
}

/// Pooling constants: a `[B,T,d]` 0/1 mask and a `[B,d]` reciprocal count.
/// Errors if any sequence has no visible timestep.
pub fn pooling_masks(
    mask: &[bool],
    b: usize,
    t: usize,
    d: usize,
) -> Result<(Tensor, Tensor), ModelError> {
    let mut keep = vec![0.0; b * t * d];
    let mut inv = vec![0.0; b * d];
    for bi in 0..b {
        let count = (0..t).filter(|&ti| mask[bi * t + ti]).count();
        if count == 0 {
            return Err(ModelError::Config(format!("sequence {bi} has no visible timesteps")));
        }
        for ti in 0..t {
            if mask[bi * t + ti] {
                for k in 0..d {
                    keep[(bi * t + ti) * d + k] = 1.0;
                }
            }
        }
        let r = 1.0 / count as f64;
        for k in 0..d {
            inv[bi * d + k] = r;
        }
    }
    Ok((Tensor::new(vec![b, t, d], keep), Tensor::new(vec![b, d], inv)))
}

/// Embed per-step features and add the sinusoidal step encoding:
/// `[B,T,F] -> [B,T,d]`.
pub fn embed_tokens(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    features: Var,
    step_index: &[usize],
) -> Var {
    let shape = tape.value(features).shape().to_vec();
    let (b, t, f) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(features, vec![b * t, f]);
    let emb = linear(tape, bound, &format!("{prefix}.embed"), flat);
    let emb = tape.reshape(emb, vec![b, t, cfg.d_model]);
    let pe = positional_encoding(step_index, cfg.d_model).reshaped(vec![b, t, cfg.d_model]);
    let pe = tape.constant(pe);
    tape.add(emb, pe)
}

/// One pre-norm residual block: masked multi-head self-attention followed by
/// a gelu feed-forward.
fn residual_block(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    h: Var,
    mask_bias: Var,
) -> Var {
    let shape = tape.value(h).shape().to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let heads = cfg.heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    // Attention sublayer.
    let normed = layer_norm(tape, bound, &format!("{prefix}.ln1"), h);
    let flat = tape.reshape(normed, vec![b * t, d]);
    let q = linear(tape, bound, &format!("{prefix}.attn.q"), flat);
    let k = linear(tape, bound, &format!("{prefix}.attn.k"), flat);
    let v = linear(tape, bound, &format!("{prefix}.attn.v"), flat);
    let q = tape.reshape(q, vec![b, t, d]);
    let k = tape.reshape(k, vec![b, t, d]);
    let v = tape.reshape(v, vec![b, t, d]);

    let mut merged = None;
    for head in 0..heads {
        let qh = tape.slice(q, 2, head * hd, hd);
        let kh = tape.slice(k, 2, head * hd, hd);
        let vh = tape.slice(v, 2, head * hd, hd);
        let scores = tape.bmm(qh, kh, true);
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask_bias);
        let attn = tape.softmax(scores);
        let ctx = tape.bmm(attn, vh, false);
        merged = Some(match merged {
            None => ctx,
            Some(prev) => tape.concat(prev, ctx, 2),
        });
    }
    let ctx = merged.expect("at least one head");
    let ctx_flat = tape.reshape(ctx, vec![b * t, d]);
    let out = linear(tape, bound, &format!("{prefix}.attn.o"), ctx_flat);
    let out = tape.reshape(out, vec![b, t, d]);
    let h = tape.add(h, out);

    // Feed-forward sublayer.
    let normed = layer_norm(tape, bound, &format!("{prefix}.ln2"), h);
    let flat = tape.reshape(normed, vec![b * t, d]);
    let mid = linear(tape, bound, &format!("{prefix}.ff.1"), flat);
    let mid = tape.gelu(mid);
    let out = linear(tape, bound, &format!("{prefix}.ff.2"), mid);
    let out = tape.reshape(out, vec![b, t, d]);
    tape.add(h, out)
}

/// Run tokens through a registered stack: residual blocks then the final
/// layer norm. `tokens` is `[B,T,d]`.
pub fn transformer_stack(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &ModelConfig,
    tokens: Var,
    mask_bias: Var,
) -> Var {
    let mut h = tokens;
    for l in 0..cfg.layers {
        h = residual_block(tape, bound, &format!("{prefix}.l{l}"), cfg, h, mask_bias);
    }
    layer_norm(tape, bound, &format!("{prefix}.final_ln"), h)
}

/// Mask-aware mean over time: `[B,T,d] -> [B,d]`, ignoring padded timesteps.
pub fn masked_mean_pool(
    tape: &mut Tape,
    h: Var,
    keep: &Tensor,
    inv_count: &Tensor,
) -> Var {
    let keep = tape.constant(keep.clone());
    let inv = tape.constant(inv_count.clone());
    let masked = tape.mul(h, keep);
    let summed = tape.sum_axis(masked, 1);
    tape.mul(summed, inv)
}
