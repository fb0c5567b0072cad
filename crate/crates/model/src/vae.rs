//! One stream's sequence VAE: a masked transformer encoder pools each
//! trajectory into a Gaussian posterior, and a mirrored decoder conditioned on
//! both the latent draw and the visible context predicts the state at the
//! query slot. Geometry and appearance are fully separate models sharing only
//! the batch layout.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resplat_autodiff::{Tape, Tensor, Var};
use resplat_data::LineageBatch;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    attention_mask_bias, embed_tokens, init_linear, init_stack, linear, masked_mean_pool,
    pooling_masks, transformer_stack,
};
use crate::config::{ModelConfig, Stream};
use crate::error::ModelError;
use crate::flow::init_flow_params;
use crate::params::{standard_normal, Bound, ParamStore};

const LOGVAR_CLAMP: f64 = 10.0;

/// Posterior moments and the reparameterized sample for one batch.
pub struct LatentCode {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Decoder output for one batch: the raw head output, and for the geometry
/// stream the absolute predicted positions (delta plus last visible state).
pub struct Decoded {
    pub output: Var,
    pub positions: Option<Var>,
}

/// Checkpoint metadata identifying the stream and architecture.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stream: Stream,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
}

/// A complete single-stream model: parameters plus architecture config.
#[derive(Debug, Clone)]
pub struct StreamVae {
    pub stream: Stream,
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl StreamVae {
    /// Initialize a fresh model with seeded weights.
    pub fn new(stream: Stream, cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f = stream.feature_dim();
        init_stack(&mut store, "enc", f, &cfg, &mut rng);
        init_linear(&mut store, "enc.mu", cfg.d_model, cfg.latent_dim, &mut rng);
        init_linear(&mut store, "enc.logvar", cfg.d_model, cfg.latent_dim, &mut rng);
        init_linear(&mut store, "dec.zproj", cfg.latent_dim, cfg.d_model, &mut rng);
        init_stack(&mut store, "dec", f, &cfg, &mut rng);
        init_linear(&mut store, "dec.head.1", cfg.d_model, cfg.d_model, &mut rng);
        init_linear(&mut store, "dec.head.2", cfg.d_model, f, &mut rng);
        // Start the exist output at the live-logit convention: records are
        // live until evidence says otherwise, and the optimizer would need
        // thousands of steps to crawl a zero bias up to the convention value.
        let exist_column = f - 1;
        store.tensor_mut("dec.head.2.b").data_mut()[exist_column] =
            resplat_core::LIVE_EXIST_LOGIT as f64;
        init_flow_params(&mut store, &cfg, &mut rng);
        Ok(StreamVae { stream, cfg, params: store })
    }

    /// The batch tensor this stream consumes.
    pub fn features<'a>(&self, batch: &'a LineageBatch) -> &'a Tensor {
        match self.stream {
            Stream::Geometry => &batch.geometry,
            Stream::Appearance => &batch.appearance,
        }
    }

    /// Encode a batch into per-sequence posterior moments `[B, latent]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &LineageBatch,
    ) -> Result<(Var, Var), ModelError> {
        let (b, t) = (batch.batch(), batch.time());
        let (keep, inv) = pooling_masks(&batch.mask, b, t, self.cfg.d_model)?;
        let feats = tape.constant(self.features(batch).clone());
        let tokens = embed_tokens(tape, bound, "enc", &self.cfg, feats, &batch.step_index);
        let bias = tape.constant(attention_mask_bias(&batch.mask, b, t));
        let h = transformer_stack(tape, bound, "enc", &self.cfg, tokens, bias);
        let pooled = masked_mean_pool(tape, h, &keep, &inv);
        let mu = linear(tape, bound, "enc.mu", pooled);
        let logvar = linear(tape, bound, "enc.logvar", pooled);
        let logvar = tape.clamp(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        Ok((mu, logvar))
    }

    /// Draw `z = mu + exp(logvar/2) * eps` with externally supplied noise.
    pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: &Tensor) -> Var {
        assert_eq!(
            tape.value(mu).shape(),
            eps.shape(),
            "noise shape must match the posterior"
        );
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let eps = tape.constant(eps.clone());
        let scaled = tape.mul(sigma, eps);
        tape.add(mu, scaled)
    }

    /// Encode and sample in one call.
    pub fn encode_sample(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &LineageBatch,
        eps: &Tensor,
    ) -> Result<LatentCode, ModelError> {
        let (mu, logvar) = self.encode(tape, bound, batch)?;
        let z = Self::reparameterize(tape, mu, logvar, eps);
        Ok(LatentCode { mu, logvar, z })
    }

    /// Positions of each row's last visible state, `[B, 3]`.
    fn last_visible_positions(&self, batch: &LineageBatch) -> Result<Tensor, ModelError> {
        let (b, t) = (batch.batch(), batch.time());
        let dim = Stream::Geometry.feature_dim();
        let data = batch.geometry.data();
        let mut out = vec![0.0; b * 3];
        for bi in 0..b {
            let target = batch.target_index[bi];
            if target == 0 || !batch.mask[bi * t + target - 1] {
                return Err(ModelError::Config(format!(
                    "sequence {bi} has no visible state before its query slot"
                )));
            }
            let src = (bi * t + target - 1) * dim;
            out[bi * 3..(bi + 1) * 3].copy_from_slice(&data[src..src + 3]);
        }
        Ok(Tensor::new(vec![b, 3], out))
    }

    /// Decode the query-slot state from the latent draw and visible context.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &LineageBatch,
        z: Var,
    ) -> Result<Decoded, ModelError> {
        let (b, t) = (batch.batch(), batch.time());
        if t < 2 {
            return Err(ModelError::Config("decoding needs at least two time slots".into()));
        }
        let base = match self.stream {
            Stream::Geometry => Some(self.last_visible_positions(batch)?),
            Stream::Appearance => None,
        };
        let feats = tape.constant(self.features(batch).clone());
        let tokens = embed_tokens(tape, bound, "dec", &self.cfg, feats, &batch.step_index);
        let zproj = linear(tape, bound, "dec.zproj", z);
        let zbr = tape.repeat_time(zproj, t);
        let tokens = tape.add(tokens, zbr);
        let bias = tape.constant(attention_mask_bias(&batch.mask, b, t));
        let h = transformer_stack(tape, bound, "dec", &self.cfg, tokens, bias);
        let at_query = tape.gather_time(h, &batch.target_index);
        let mid = linear(tape, bound, "dec.head.1", at_query);
        let mid = tape.gelu(mid);
        let output = linear(tape, bound, "dec.head.2", mid);
        let positions = match base {
            Some(base) => {
                let delta = tape.slice(output, 1, 0, 3);
                let base = tape.constant(base);
                Some(tape.add(delta, base))
            }
            None => None,
        };
        Ok(Decoded { output, positions })
    }

    /// Serialize parameters with identifying metadata, enforcing the stream's
    /// size budget.
    pub fn save(
        &self,
        path: impl AsRef<Path>,
        train: Option<serde_json::Value>,
    ) -> Result<(), ModelError> {
        let payload = self.params.payload_bytes();
        let budget = self.stream.size_budget_bytes();
        if payload > budget {
            return Err(ModelError::Checkpoint(format!(
                "{} stream parameters occupy {payload} bytes, budget is {budget}",
                self.stream.name()
            )));
        }
        let meta = CheckpointMeta { stream: self.stream, config: self.cfg.clone(), train };
        let meta =
            serde_json::to_string(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        self.params.save(path, &meta)
    }

    /// Load a checkpoint and verify it matches the recorded architecture.
    pub fn load(path: impl AsRef<Path>) -> Result<StreamVae, ModelError> {
        let (meta, store) = ParamStore::load(path.as_ref())?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let expected = StreamVae::new(meta.stream, meta.config.clone(), 0)?;
        if store.names() != expected.params.names() {
            return Err(ModelError::Checkpoint(
                "checkpoint tensor names do not match the recorded architecture".into(),
            ));
        }
        for name in store.names() {
            if store.tensor(name).shape() != expected.params.tensor(name).shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    store.tensor(name).shape(),
                    expected.params.tensor(name).shape()
                )));
            }
        }
        Ok(StreamVae { stream: meta.stream, cfg: meta.config, params: store })
    }
}

/// Seeded standard-normal noise of shape `[b, latent]`.
pub fn noise_tensor(b: usize, latent: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![b, latent], (0..b * latent).map(|_| standard_normal(rng)).collect())
}

/// Seeded noise helper when only a seed is at hand.
pub fn seeded_noise(b: usize, latent: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    noise_tensor(b, latent, &mut rng)
}
